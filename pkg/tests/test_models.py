import numpy as np
import pytest

from spherevid.angular import AngularLossConfig
from spherevid.errors import ConfigError, ShapeError
from spherevid.models import PRESETS, Model, ModelConfig, build_model, preset
from spherevid.nn import Tape, Var
from spherevid.nn import functional as F
from spherevid.tensor import Rng

from conftest import max_rel_err

# recorded at the first verified build; any architectural change must update these deliberately
GOLDEN_PARAMS = {
    "desk-resnet10-basic": 913_056,
    "desk-resnet18-basic": 2_089_536,
    "desk-resnet10-bottleneck": 246_160,
    "desk-resnet10-preact": 245_224,
    "desk-wide10": 720_096,
    "desk-dense10": 57_096,
    "resnet-18": 33_473_024,
    "resnet-34": 63_786_368,
    "resnet-50": 47_273_344,
    "resnet-101": 86_345_600,
    "resnet-152": 118_527_360,
    "preact-resnet-200": 127_731_776,
    "wide-resnet-50": 158_510_592,
    "resnext-101": 6_044_288,
    "densenet-121": 11_855_712,
    "densenet-201": 26_475_360,
}


def small(name="desk-resnet10-basic", **kw):
    """Reduced clip geometry so forward passes stay fast."""
    return preset(name, clip_len=8, input_size=32, **kw)


def test_every_preset_has_a_golden_count():
    assert set(GOLDEN_PARAMS) == set(PRESETS)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_parameter_counts(name):
    model = Model(preset(name))
    assert model.param_count == GOLDEN_PARAMS[name]
    assert model.trace[-1][1] == (1, model.cfg.embedding_dim)
    del model


def test_parameter_count_is_a_pure_function_of_config():
    a = Model(preset("desk-resnet10-basic"), seed=1)
    b = Model(preset("desk-resnet10-basic"), seed=2)
    assert a.param_count == b.param_count
    assert not np.array_equal(a.parameters()[0].value, b.parameters()[0].value)


def test_desk_preset_dry_runs_reference_clip():
    model = build_model(preset("desk-resnet10-basic", num_classes=7))
    assert model.trace[0][1] == (1, 3, 16, 112, 112)
    emb, logits = model.forward(Rng(0).normal((1, 3, 16, 112, 112)).astype(np.float32))
    assert emb.shape == (1, 64) and logits.shape == (1, 7)


@pytest.mark.parametrize("name", ["desk-resnet10-basic", "desk-resnet10-bottleneck", "desk-resnet10-preact",
                                  "desk-wide10", "desk-dense10"])
def test_dry_run_matches_forward_at_every_layer(name):
    model = Model(preset(name, input_size=32))
    x = Var(Rng(1).normal((2, 3, 16, 32, 32)).astype(np.float32))
    trace = dict(model.trace_shapes(x.shape))
    for stage, mod in model.backbone:
        layers = mod.layers if hasattr(mod, "layers") else [mod]
        for k, layer in enumerate(layers):
            x = layer(x)
            key = f"{stage}.{k}" if hasattr(mod, "layers") else stage
            assert x.shape == trace[key], key


def test_stem_extent_formula():
    cfg = preset("desk-resnet10-basic")
    model = Model(cfg)
    k, s = cfg.stem_kernel, cfg.stem_stride
    expect = F.out_extents((16, 112, 112), k, s, tuple(i // 2 for i in k))
    assert model.trace[1][1][2:] == expect


def test_widen_doubles_channels_and_more_than_doubles_params():
    narrow = Model(preset("desk-wide10", widen=1))
    wide = Model(preset("desk-wide10", widen=2))
    assert wide.feature_channels == 2 * narrow.feature_channels
    assert wide.param_count > 2 * narrow.param_count


def test_baseline_configuration():
    model = Model(small(activation="relu", head="cross_entropy"))
    assert model.head.kind == "cross_entropy"
    assert not any("slope" in name for name, _ in model.named_parameters())


def test_identical_clips_identical_embeddings():
    model = Model(small())
    clip = Rng(2).normal((1, 3, 8, 32, 32)).astype(np.float32)
    emb, _ = model.forward(np.repeat(clip, 3, axis=0))
    model.eval()
    emb_eval, _ = model.forward(np.repeat(clip, 3, axis=0))
    assert np.all(emb_eval == emb_eval[0])
    assert np.all(np.isfinite(emb)) and np.abs(emb).max() > 0


def test_head_swap_keeps_embeddings():
    a = Model(small(head="asoftmax"), seed=5)
    b = Model(small(head="cross_entropy"), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        if na.startswith("head") or nb.startswith("head"):
            break
        pb.value[...] = pa.value
    a.eval(), b.eval()
    x = Rng(6).normal((2, 3, 8, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(a.features(x).value, b.features(x).value)


def test_single_class_predicts_zero():
    model = Model(small(num_classes=1))
    np.testing.assert_array_equal(model.predict(Rng(0).normal((3, 3, 8, 32, 32)).astype(np.float32)), 0)


def test_input_gradient_spot_check_32bit():
    model = Model(small(), loss_cfg=AngularLossConfig(4, 5.0))
    x = Rng(7).normal((2, 3, 8, 32, 32)).astype(np.float32)
    y = np.array([1, 3])
    with Tape() as tape:
        xv = Var(x, requires_grad=True)
        loss = model.loss(xv, y)
    g = tape.backward(loss)[id(xv)]
    # a 32-bit difference quotient is swamped by rounding at this depth, so the
    # oracle re-evaluates the same weights in 64-bit
    for p in model.parameters():
        p.value = p.value.astype(np.float64)
    x64 = x.astype(np.float64)

    def f():
        return float(model.loss(Var(x64), y).value)

    assert max_rel_err(g, f, x64, probes=16) <= 1e-2


def test_shape_mismatch():
    model = Model(small())
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 3, 16, 32, 32), dtype=np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        preset("resnet-9000")
    with pytest.raises(ConfigError):
        ModelConfig(genre="capsule").validate()
    with pytest.raises(ConfigError):
        ModelConfig(blocks=(1, 0)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(head="svm").validate()
