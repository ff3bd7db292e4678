import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherevid.errors import ConfigError, ShapeError
from spherevid.nn import (BatchNorm3d, BlockSpec, Conv3d, DenseTransition, GlobalAvgPool, Linear,
                          Parameter, Pool3d, PReLU, ReLU, Sequential, Tape, Var, build_block,
                          residual_block)
from spherevid.nn.autograd import active_tape, add, concat_channels
from spherevid.nn.layers import DenseLayer, PreActBlock, ResidualBlock, he_std
from spherevid.tensor import Rng, check_mode

from conftest import max_rel_err


def module_fd(module, x, rng, tol, probes=32):
    module.train()
    R = rng.normal(module(Var(x)).shape)
    module.zero_grad()
    with Tape() as tape:
        xv = Var(x, requires_grad=True)
        out = module(xv)
    grads = tape.backward(out, R)

    def f():
        return float(np.sum(module(Var(x)).value * R))

    errs = {"input": max_rel_err(grads[id(xv)], f, x, probes)}
    for name, p in module.named_parameters():
        errs[name] = max_rel_err(p.grad, f, p.value, probes)
    assert max(errs.values()) <= tol, errs


class TestTape:
    def test_nothing_recorded_without_tape(self):
        assert active_tape() is None
        conv = Conv3d(1, 1, 1)
        out = conv(Var(np.ones((1, 1, 1, 1, 1))))
        assert not out.requires_grad

    def test_nested_tapes_restore(self):
        with Tape() as outer:
            with Tape() as inner:
                assert active_tape() is inner
            assert active_tape() is outer
        assert active_tape() is None

    def test_shared_input_gradients_accumulate(self):
        with Tape() as tape:
            x = Var(np.array([[1.0, 2.0]]), requires_grad=True)
            y = add(x, x)
        grads = tape.backward(y, np.ones((1, 2)))
        np.testing.assert_array_equal(grads[id(x)], [[2.0, 2.0]])

    def test_each_node_visited_once(self):
        calls = []
        lin = Linear(2, 2, rng=Rng(0))
        with Tape() as tape:
            x = Var(np.ones((1, 2)), requires_grad=True)
            h = lin(x)
            y = add(h, h)
        for node in tape.nodes:
            bw = node.backward
            node.backward = lambda g, bw=bw, op=node.op: calls.append(op) or bw(g)
        tape.backward(y, np.ones((1, 2)))
        assert sorted(calls) == ["add", "linear"]

    def test_parameter_gradient_accumulates_over_backward_calls(self):
        p = Parameter(np.zeros(2), "p")
        p.accumulate(np.ones(2))
        p.accumulate(np.ones(2))
        np.testing.assert_array_equal(p.grad, [2, 2])
        with pytest.raises(ShapeError):
            p.accumulate(np.ones(3))
        p.zero_grad()
        assert p.grad is None

    def test_concat_channels_splits_gradient(self):
        with Tape() as tape:
            a = Var(np.zeros((1, 2, 1, 1, 1)), requires_grad=True)
            b = Var(np.zeros((1, 3, 1, 1, 1)), requires_grad=True)
            c = concat_channels(a, b)
        g = np.arange(5.0).reshape(1, 5, 1, 1, 1)
        grads = tape.backward(c, g)
        np.testing.assert_array_equal(grads[id(a)].ravel(), [0, 1])
        np.testing.assert_array_equal(grads[id(b)].ravel(), [2, 3, 4])


class TestLayers:
    def test_prelu_initial_slope(self):
        np.testing.assert_array_equal(PReLU(3).slope.value, 0.25)

    def test_he_init_scale(self):
        conv = Conv3d(8, 64, 3, rng=Rng(0))
        assert conv.weight.value.std() == pytest.approx(he_std(8 * 27), rel=0.05)
        assert he_std(10, 0.25) < he_std(10, 0.0)

    def test_conv_params_validated(self):
        with pytest.raises(ConfigError):
            Conv3d(1, 1, 0)
        with pytest.raises(ConfigError):
            Conv3d(1, 1, 3, stride=0)
        with pytest.raises(ConfigError):
            Conv3d(1, 1, 3, padding=-1)

    def test_output_shape_matches_forward(self):
        rng = Rng(1)
        layers = [Conv3d(3, 4, (3, 5, 5), (2, 2, 2), (1, 2, 2), rng=rng), BatchNorm3d(4), PReLU(4),
                  Pool3d("max", 3, 2, 1), GlobalAvgPool(), Linear(4, 6, rng=rng)]
        seq = Sequential(*layers)
        x = rng.normal((2, 3, 7, 9, 9)).astype(np.float32)
        assert seq(Var(x)).shape == seq.output_shape(x.shape)

    def test_eval_mode_freezes_batchnorm(self):
        bn = BatchNorm3d(2)
        x = Var(Rng(0).normal((4, 2, 2, 2, 2)).astype(np.float32))
        bn(x)
        before = dict(bn.named_buffers())
        rm = before["running_mean"].copy()
        bn.eval()
        bn(x)
        np.testing.assert_array_equal(dict(bn.named_buffers())["running_mean"], rm)

    def test_forward_is_deterministic(self):
        block = build_block(BlockSpec("basic", 4, 4), Rng(2))
        x = Var(Rng(3).normal((2, 4, 2, 4, 4)).astype(np.float32))
        assert block(x).value.tobytes() == block(x).value.tobytes()

    @pytest.mark.parametrize("make,shape", [
        (lambda r: Conv3d(2, 3, 3, (1, 2, 2), 1, bias=True, rng=r), (2, 2, 3, 5, 5)),
        (lambda r: PReLU(3), (2, 3, 2, 2, 2)),
        (lambda r: BatchNorm3d(3), (3, 3, 2, 2, 2)),
        (lambda r: Pool3d("max", 3, 2, 1), (2, 2, 3, 4, 4)),
        (lambda r: GlobalAvgPool(), (2, 3, 2, 2, 2)),
        (lambda r: Linear(5, 3, rng=r), (4, 5)),
    ])
    def test_layer_fd_64bit(self, make, shape):
        with check_mode():
            rng = Rng(4)
            module_fd(make(rng), rng.normal(shape), rng, 1e-5)


class TestBlocks:
    @pytest.mark.parametrize("genre,planes", [("basic", 4), ("bottleneck", 2), ("wide", 2), ("preact", 2),
                                              ("dense-transition", 3)])
    def test_stride_and_channels(self, genre, planes):
        stride = 1 if genre == "dense-transition" else 2
        spec = BlockSpec(genre, 4, planes, stride)
        block = build_block(spec, Rng(0))
        x = Rng(1).normal((2, 4, 4, 6, 6)).astype(np.float32)
        out = block(Var(x))
        assert out.shape[1] == spec.out_channels
        assert out.shape[2:] == ((4, 6, 6) if stride == 1 else (2, 3, 3))
        assert out.shape == block.output_shape(x.shape)

    def test_block_types(self):
        assert isinstance(build_block(BlockSpec("basic", 2, 2), Rng(0)), ResidualBlock)
        assert isinstance(build_block(BlockSpec("preact", 2, 2), Rng(0)), PreActBlock)
        assert isinstance(build_block(BlockSpec("dense-transition", 2, 2), Rng(0)), DenseLayer)

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            BlockSpec("inception", 2, 2).validate()
        with pytest.raises(ConfigError):
            BlockSpec("dense-transition", 2, 2, stride=2).validate()
        with pytest.raises(ConfigError):
            BlockSpec("basic", 0, 2).validate()

    def test_zero_main_path_gives_activation_of_input(self):
        block = build_block(BlockSpec("basic", 3, 3), Rng(0))
        last_bn = block.main.layers[-1]
        last_bn.gamma.value[:] = 0
        last_bn.beta.value[:] = 0
        x = Rng(1).normal((2, 3, 2, 3, 3)).astype(np.float32)
        out = block(Var(x)).value
        expect = np.where(x > 0, x, 0.25 * x)
        np.testing.assert_allclose(out, expect, rtol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=3, max_size=3, unique=True))
    def test_zero_main_path_preserves_channel_argmax(self, levels):
        block = build_block(BlockSpec("basic", 3, 3), Rng(0))
        block.main.layers[-1].gamma.value[:] = 0
        x = np.broadcast_to((np.float32(levels) / 10).reshape(1, 3, 1, 1, 1), (1, 3, 2, 2, 2)).copy()
        out = block(Var(x)).value
        assert np.argmax(out.mean(axis=(0, 2, 3, 4))) == np.argmax(levels)

    def test_residual_block_function(self):
        x = Var(Rng(0).normal((1, 2, 2, 4, 4)).astype(np.float32))
        out = residual_block(x, BlockSpec("basic", 2, 4, 2))
        assert out.shape == (1, 4, 1, 2, 2)

    @pytest.mark.parametrize("spec", [BlockSpec("basic", 3, 3, 1), BlockSpec("basic", 3, 4, 2, "relu"),
                                      BlockSpec("bottleneck", 4, 2, 1), BlockSpec("wide", 4, 2, 2),
                                      BlockSpec("preact", 4, 2, 2), BlockSpec("dense-transition", 3, 2)])
    def test_block_fd_64bit(self, spec):
        with check_mode():
            rng = Rng(5)
            module_fd(build_block(spec, rng), rng.normal((2, spec.in_channels, 2, 4, 4)), rng, 1e-5, probes=16)

    def test_block_fd_32bit(self):
        rng = Rng(6)
        block = build_block(BlockSpec("basic", 3, 3), rng)
        x = rng.normal((2, 3, 2, 4, 4)).astype(np.float32)
        R = rng.normal(block(Var(x)).shape)
        block.zero_grad()
        with Tape() as tape:
            xv = Var(x, requires_grad=True)
            out = block(xv)
        gx = tape.backward(out, R.astype(np.float32))[id(xv)]
        x64 = x.astype(np.float64)
        # forward in 64-bit with the same (32-bit) weights gives a clean difference quotient
        with check_mode():
            for p in block.parameters():
                p.value = p.value.astype(np.float64)

            def f():
                return float(np.sum(block(Var(x64)).value * R))

            assert max_rel_err(gx, f, x64) <= 1e-3

    def test_dense_transition_halves(self):
        t = DenseTransition(6, 3, "prelu", Rng(0))
        assert t.output_shape((1, 6, 4, 4, 4)) == (1, 3, 2, 2, 2)
