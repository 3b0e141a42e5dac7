import numpy as np
import pytest

from pointpretrain.patching import (MaskSpec, PatchConfig, PatchError, fps,
                                    knn_patches, sample_mask, split)
from pointpretrain.verify import fps_oracle, knn_oracle


class TestFPS:
    def test_two_points_selects_both(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        centers, idx = fps(pts, 2, np.random.default_rng(0))
        assert sorted(idx.tolist()) == [0, 1]
        assert centers.shape == (2, 3)

    def test_greedy_picks_farthest(self):
        pts = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [10.0, 0.0, 0.0]])
        # a generator whose first integers(3) call lands on index 0
        assert np.random.default_rng(11).integers(3) == 0
        _, idx = fps(pts, 2, np.random.default_rng(11))
        assert idx.tolist() == [0, 2]

    def test_same_seed_same_sequence(self):
        pts = np.random.default_rng(0).normal(size=(64, 3))
        _, a = fps(pts, 12, np.random.default_rng(9))
        _, b = fps(pts, 12, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_too_many_centers_rejected(self):
        with pytest.raises(PatchError, match="cannot sample"):
            fps(np.zeros((3, 3)), 4, np.random.default_rng(0))

    @pytest.mark.parametrize("trial", range(50))
    def test_matches_greedy_oracle(self, trial):
        rng = np.random.default_rng(trial)
        count = int(rng.integers(2, 128))
        pts = rng.normal(size=(count, 3))
        n = int(rng.integers(1, min(count, 24) + 1))
        _, idx = fps(pts, n, np.random.default_rng([trial, 1]))
        first = int(np.random.default_rng([trial, 1]).integers(count))
        assert idx.tolist() == fps_oracle(pts, n, first)

    @pytest.mark.parametrize("seed", range(10))
    def test_min_pairwise_distance_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(80, 3))
        previous = np.inf
        for n in range(2, 20):
            centers, _ = fps(pts, n, np.random.default_rng(seed))
            d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            smallest = d.min()
            assert smallest <= previous + 1e-12
            previous = smallest


class TestKNN:
    def test_k1_patches_are_self(self):
        pts = np.random.default_rng(0).normal(size=(16, 3))
        centers, idx = fps(pts, 4, np.random.default_rng(1))
        patches = knn_patches(pts, centers, 1)
        assert np.allclose(patches.patches, 0.0)
        assert np.array_equal(patches.source_indices[:, 0], idx)

    def test_exhaustive_small_case(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        patches = knn_patches(pts, pts[:1], 2)
        assert np.allclose(patches.patches[0], [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

    def test_reconstruction_invariant(self):
        pts = np.random.default_rng(2).normal(size=(50, 3))
        centers, _ = fps(pts, 8, np.random.default_rng(3))
        ps = knn_patches(pts, centers, 6)
        rebuilt = ps.centers[:, None, :] + ps.patches
        assert np.abs(rebuilt - pts[ps.source_indices]).max() < 1e-9

    def test_empty_centers_rejected(self):
        with pytest.raises(PatchError, match="non-empty"):
            knn_patches(np.zeros((4, 3)), np.zeros((0, 3)), 1)

    def test_k_larger_than_cloud_rejected(self):
        with pytest.raises(PatchError, match="exceeds cloud size"):
            knn_patches(np.zeros((3, 3)), np.zeros((1, 3)), 4)

    @pytest.mark.parametrize("trial", range(50))
    def test_matches_sort_oracle(self, trial):
        rng = np.random.default_rng([trial, 7])
        count = int(rng.integers(4, 128))
        pts = rng.normal(size=(count, 3))
        k = int(rng.integers(1, min(count, 12) + 1))
        centers = pts[rng.choice(count, size=3, replace=False)]
        got = knn_patches(pts, centers, k)
        for center, row in zip(centers, got.source_indices):
            assert row.tolist() == knn_oracle(pts, center, k)

    def test_tie_break_lowest_index(self):
        pts = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        got = knn_patches(pts, np.zeros((1, 3)), 2)
        assert got.source_indices[0].tolist() == [0, 1]


class TestMasking:
    def test_counts_at_forced_ratio(self):
        # ratio 0.7 on 10 patches -> 7 masked / 3 visible
        spec = MaskSpec(masked_indices=np.arange(7), visible_indices=np.arange(7, 10),
                        ratio=0.7, n=10)
        assert spec.n_masked == 7 and spec.n_visible == 3

    def test_sampled_counts_follow_rounding(self):
        for seed in range(30):
            spec = sample_mask(10, (0.70, 0.70), np.random.default_rng(seed))
            assert spec.n_masked == 7
            spec = sample_mask(4, (0.75, 0.75), np.random.default_rng(seed))
            assert spec.n_masked == 3

    def test_same_seed_same_mask(self):
        a = sample_mask(32, (0.6, 0.8), np.random.default_rng(11))
        b = sample_mask(32, (0.6, 0.8), np.random.default_rng(11))
        assert np.array_equal(a.masked_indices, b.masked_indices)
        assert a.ratio == b.ratio

    def test_partition_property(self):
        for seed in range(50):
            spec = sample_mask(17, (0.6, 0.8), np.random.default_rng(seed))
            merged = np.sort(np.concatenate([spec.masked_indices, spec.visible_indices]))
            assert np.array_equal(merged, np.arange(17))
            assert 0.6 <= spec.ratio <= 0.8

    def test_bad_range_rejected(self):
        with pytest.raises(PatchError, match="inside"):
            sample_mask(10, (0.0, 0.8), np.random.default_rng(0))
        with pytest.raises(PatchError):
            PatchConfig(mask_ratio_range=(0.9, 1.0))

    def test_single_patch_rejected(self):
        with pytest.raises(PatchError, match="at least two"):
            sample_mask(1, (0.6, 0.8), np.random.default_rng(0))

    def test_inconsistent_partition_rejected(self):
        with pytest.raises(PatchError, match="partition"):
            MaskSpec(masked_indices=[0, 1], visible_indices=[1, 2], ratio=0.5, n=4)


class TestSplit:
    def _patchset(self, n=8, k=4, seed=0):
        pts = np.random.default_rng(seed).normal(size=(64, 3))
        centers, _ = fps(pts, n, np.random.default_rng(seed + 1))
        return knn_patches(pts, centers, k)

    def test_zero_masked_degenerate(self):
        ps = self._patchset()
        spec = MaskSpec(masked_indices=[], visible_indices=np.arange(8), ratio=0.0, n=8)
        visible, masked = split(ps, spec)
        assert len(visible) == 8 and len(masked) == 0
        assert np.array_equal(visible.patches, ps.patches)

    def test_union_reconstructs_patchset(self):
        ps = self._patchset()
        spec = sample_mask(8, (0.6, 0.8), np.random.default_rng(4))
        visible, masked = split(ps, spec)
        rebuilt = np.empty_like(ps.patches)
        rebuilt[spec.visible_indices] = visible.patches
        rebuilt[spec.masked_indices] = masked.patches
        assert np.array_equal(rebuilt, ps.patches)

    def test_shapes_match_mask_counts(self):
        ps = self._patchset(n=8, k=4)
        spec = MaskSpec(masked_indices=np.arange(6), visible_indices=[6, 7], ratio=0.75, n=8)
        visible, masked = split(ps, spec)
        assert visible.patches.shape == (2, 4, 3)
        assert masked.patches.shape == (6, 4, 3)

    def test_size_mismatch_rejected(self):
        ps = self._patchset(n=8)
        spec = sample_mask(6, (0.6, 0.8), np.random.default_rng(0))
        with pytest.raises(PatchError, match="does not match"):
            split(ps, spec)
