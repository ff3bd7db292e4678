import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherevid.errors import ConfigError, InputError
from spherevid.tensor import Rng
from spherevid.video import (PAPER_SCALES, POSITIONS, AugmentPolicy, SyntheticSpec, Video,
                             augment_clip, channel_means, clip_indices, clip_rng, corner_crop,
                             crop_box, generate_synthetic, hflip, load_dataset, mean_subtract,
                             render_video, resize_bilinear, sample_clip, save_dataset, split_dataset)


def video(T=20, H=24, W=30, seed=0, label=0):
    return Video(Rng(seed).uniform((T, 3, H, W)), label, f"v{seed}")


class TestSampling:
    def test_exact_length_is_identity(self):
        v = video(T=16)
        np.testing.assert_array_equal(sample_clip(v, 16, Rng(0)), v.frames)

    def test_short_video_loops(self):
        np.testing.assert_array_equal(clip_indices(10, 16), list(range(10)) + list(range(6)))
        v = video(T=1)
        clip = sample_clip(v, 16)
        assert clip.shape[0] == 16 and np.all(clip == v.frames[0])

    def test_long_video_windows(self):
        idx = clip_indices(40, 16)
        np.testing.assert_array_equal(idx, np.arange(12, 28))
        for s in range(20):
            w = clip_indices(40, 16, Rng(s))
            assert np.all(np.diff(w) == 1) and 0 <= w[0] <= 24

    def test_empty_video(self):
        with pytest.raises(InputError):
            clip_indices(0, 16)
        with pytest.raises(InputError):
            Video(np.zeros((0, 3, 4, 4)), 0)


class TestCrop:
    def test_center_half_of_224(self):
        assert crop_box(224, 224, "C", 0.5) == (56, 56, 112)
        stack = np.zeros((2, 3, 224, 224))
        assert corner_crop(stack, "C", 0.5).shape == (2, 3, 112, 112)

    def test_scale_one_center_is_short_side_square(self):
        assert crop_box(100, 160, "C", 1.0) == (0, 30, 100)

    @pytest.mark.parametrize("pos", POSITIONS)
    def test_full_scale_on_square_is_identity(self, pos):
        stack = Rng(0).uniform((1, 3, 112, 112))
        np.testing.assert_array_equal(corner_crop(stack, pos, 1.0), stack)

    def test_corners(self):
        assert crop_box(50, 60, "TL", 0.5) == (0, 0, 25)
        assert crop_box(50, 60, "TR", 0.5) == (0, 35, 25)
        assert crop_box(50, 60, "BL", 0.5) == (25, 0, 25)
        assert crop_box(50, 60, "BR", 0.5) == (25, 35, 25)

    def test_side_rounding(self):
        assert crop_box(48, 48, "C", 2 ** -0.25)[2] == int(np.floor(48 * 2 ** -0.25 + 0.5))

    def test_crop_of_crop_at_scale_one(self):
        stack = Rng(1).uniform((1, 3, 40, 50))
        once = corner_crop(stack, "BR", PAPER_SCALES[1])
        np.testing.assert_array_equal(corner_crop(once, "C", 1.0), once)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            crop_box(10, 10, "MID", 0.5)
        with pytest.raises(ConfigError):
            crop_box(10, 10, "C", 1.5)


class TestResize:
    def test_same_size_passthrough(self):
        stack = Rng(0).uniform((2, 3, 112, 112)).astype(np.float32)
        out = resize_bilinear(stack, 112)
        assert out.tobytes() == stack.tobytes()

    def test_constant_stays_constant(self):
        out = resize_bilinear(np.full((1, 3, 17, 29), 0.3, dtype=np.float32), 112)
        np.testing.assert_allclose(out, 0.3, atol=1e-6)

    def test_checkerboard_hand_values(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        out = resize_bilinear(board, 4)
        assert out[1, 1] == pytest.approx(0.375)
        assert out[1, 2] == pytest.approx(0.625)
        inner = out[1:3, 1:3]
        assert np.all((inner > 0) & (inner < 1))
        assert out[0, 0] == 0.0 and out[0, 3] == 1.0

    def test_downscale_of_blocks(self):
        img = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2))).astype(np.float32)
        np.testing.assert_allclose(resize_bilinear(img, 2), [[1, 2], [3, 4]])


class TestFlipAndMeans:
    def test_flip_probabilities(self):
        s = Rng(0).uniform((2, 3, 4, 5))
        assert hflip(s, None, 0.0) is s
        np.testing.assert_array_equal(hflip(hflip(s, None, 1.0), None, 1.0), s)
        np.testing.assert_array_equal(hflip(s, None, 1.0), s[..., ::-1])

    def test_flip_draws_reproducible(self):
        s = Rng(0).uniform((1, 3, 2, 2))
        a = [hflip(s, Rng(9, i)).tobytes() for i in range(20)]
        b = [hflip(s, Rng(9, i)).tobytes() for i in range(20)]
        assert a == b and len(set(a)) == 2

    def test_mean_subtract(self):
        s = Rng(0).uniform((2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(mean_subtract(s, (0, 0, 0)), s)
        const = np.broadcast_to(np.float32([0.1, 0.2, 0.3]).reshape(1, 3, 1, 1), (2, 3, 4, 4))
        np.testing.assert_allclose(mean_subtract(const, (0.1, 0.2, 0.3)), 0, atol=1e-7)
        with pytest.raises(ConfigError):
            mean_subtract(s, (0, 0))

    def test_train_split_means_center_the_train_set(self):
        vids = [video(seed=i) for i in range(4)]
        means = channel_means(vids)
        centered = np.concatenate([mean_subtract(v.frames, means) for v in vids])
        assert np.abs(centered.astype(np.float64).mean(axis=(0, 2, 3))).max() <= 1e-6


class TestAugment:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 40), st.integers(8, 70), st.integers(8, 70), st.integers(0, 1000))
    def test_output_always_3x16x112(self, T, H, W, seed):
        v = Video(Rng(seed).uniform((T, 3, H, W)), 0)
        means = (0.2, 0.4, 0.6)
        out = augment_clip(v, AugmentPolicy(channel_means=means), clip_rng(seed, 0, 0))
        assert out.shape == (3, 16, 112, 112)
        assert np.all(np.isfinite(out))
        assert out.min() >= -max(means) - 1e-6 and out.max() <= 1.0

    def test_eval_deterministic(self):
        v = video(T=30)
        a = augment_clip(v, AugmentPolicy(), mode="eval")
        b = augment_clip(v, AugmentPolicy(), mode="eval")
        assert a.tobytes() == b.tobytes()

    def test_train_reproducible_and_order_independent(self):
        vids = [video(seed=i, T=25) for i in range(3)]
        pol = AugmentPolicy()
        forward = [augment_clip(v, pol, clip_rng(5, 2, i)).tobytes() for i, v in enumerate(vids)]
        backward = [augment_clip(vids[i], pol, clip_rng(5, 2, i)).tobytes() for i in reversed(range(3))]
        assert forward == backward[::-1]
        assert forward[0] != augment_clip(vids[0], pol, clip_rng(5, 3, 0)).tobytes()

    def test_modes(self):
        with pytest.raises(ConfigError):
            augment_clip(video(), AugmentPolicy(), None, "train")
        with pytest.raises(ConfigError):
            augment_clip(video(), AugmentPolicy(), mode="test")

    def test_policy_validation(self):
        with pytest.raises(ConfigError):
            AugmentPolicy(scales=(1.5,))
        with pytest.raises(ConfigError):
            AugmentPolicy(positions=("XX",))
        with pytest.raises(ConfigError):
            AugmentPolicy(flip_prob=2.0)


class TestSplit:
    def test_round_rule(self):
        s = split_dataset(range(675), 0.6, seed=0)
        assert (len(s.train), len(s.val)) == (405, 270)
        s = split_dataset(range(10))
        assert (len(s.train), len(s.val)) == (6, 4)

    def test_explicit_counts(self):
        s = split_dataset(range(675), seed=3, train_count=415, val_count=260)
        assert (len(s.train), len(s.val)) == (415, 260)
        with pytest.raises(ConfigError):
            split_dataset(range(675), train_count=415, val_count=200)

    def test_deterministic(self):
        assert split_dataset(range(50), seed=7) == split_dataset(range(50), seed=7)
        assert split_dataset(range(50), seed=7).train != split_dataset(range(50), seed=8).train

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 99))
    def test_disjoint_cover(self, n, ratio, seed):
        s = split_dataset(range(n), ratio, seed)
        assert sorted(s.train + s.val) == list(range(n))
        assert len(s.train) == int(np.floor(ratio * n + 0.5))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=10, max_size=120), st.integers(0, 50))
    def test_stratified_fraction(self, labels, seed):
        s = split_dataset(range(len(labels)), 0.6, seed, labels=labels)
        assert sorted(s.train + s.val) == list(range(len(labels)))
        for c in set(labels):
            n_c = labels.count(c)
            k = sum(labels[i] == c for i in s.train)
            assert abs(k - 0.6 * n_c) <= 1

    def test_errors(self):
        with pytest.raises(InputError):
            split_dataset([])
        with pytest.raises(ConfigError):
            split_dataset(range(5), 1.0)


class TestSynthetic:
    def test_rejects_single_class(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(num_classes=1)

    def test_noise_free_same_seed_identical(self):
        spec = SyntheticSpec(num_classes=2, videos_per_class=1, noise_std=0.0)
        a = render_video(spec.patterns[0], spec, Rng(3))
        b = render_video(spec.patterns[0], spec, Rng(3))
        assert a.tobytes() == b.tobytes()

    def test_generation_deterministic_and_labeled(self):
        spec = SyntheticSpec(num_classes=3, videos_per_class=2, frames_per_video=4, height=12, width=12)
        a, b = generate_synthetic(spec, Rng(1)), generate_synthetic(spec, Rng(1))
        assert [v.label for v in a] == [0, 0, 1, 1, 2, 2]
        assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))
        assert all(v.frames.min() >= 0 and v.frames.max() <= 1 for v in a)

    def test_classes_differ(self):
        spec = SyntheticSpec(num_classes=5, videos_per_class=1, noise_std=0.0)
        vids = generate_synthetic(spec, Rng(0))
        m0 = vids[0].frames.mean(axis=(2, 3))
        m2 = vids[2].frames.mean(axis=(2, 3))
        assert np.abs(m0 - m2).max() > 0

    def test_nearest_centroid_beats_chance(self):
        spec = SyntheticSpec(num_classes=5, videos_per_class=8, frames_per_video=8, height=16, width=16)
        vids = generate_synthetic(spec, Rng(2))
        feats = np.stack([v.frames.reshape(-1) for v in vids])
        labels = np.array([v.label for v in vids])
        train = np.arange(len(vids)) % 2 == 0
        cents = np.stack([feats[train & (labels == c)].mean(axis=0) for c in range(5)])
        d = ((feats[~train, None, :] - cents[None]) ** 2).sum(axis=2)
        acc = np.mean(d.argmin(axis=1) == labels[~train])
        assert acc > 0.2 + 0.2

    def test_dataset_roundtrip(self, tmp_path):
        spec = SyntheticSpec(num_classes=2, videos_per_class=2, frames_per_video=3, height=8, width=8)
        vids = generate_synthetic(spec, Rng(0))
        save_dataset(vids, tmp_path, spec.class_names)
        loaded, names = load_dataset(tmp_path)
        assert names == spec.class_names
        assert [v.label for v in loaded] == [v.label for v in vids]
        assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(loaded, vids))

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")
        with pytest.raises(InputError):
            load_dataset(tmp_path)
