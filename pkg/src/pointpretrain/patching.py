"""Point-cloud tokenization: farthest point sampling, KNN patch grouping,
and random masking.

Patches are stored center-relative so reconstruction targets are
translation-normalized.  All tie-breaks (FPS argmax, KNN equal distances)
go to the lowest index, which keeps results bit-reproducible and lets the
brute-force oracles in the test suite demand exact index agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud


class PatchError(ValueError):
    """Invalid patching request (bad counts, bad indices, bad ratios)."""


@dataclass(frozen=True)
class PatchConfig:
    n: int = 32
    k_nn: int = 16
    mask_ratio_range: tuple[float, float] = (0.60, 0.80)

    def __post_init__(self):
        if self.n < 1:
            raise PatchError(f"need at least one patch center, got n={self.n}")
        if self.k_nn < 1:
            raise PatchError(f"need at least one neighbor per patch, got k_nn={self.k_nn}")
        lo, hi = self.mask_ratio_range
        if not (0.0 < lo <= hi < 1.0):
            raise PatchError(
                f"mask ratio range must be ordered and inside (0, 1), got [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class PatchSet:
    """FPS centers with their center-relative KNN patches.

    centers[i] + patches[i][j] reproduces the source cloud point at
    source_indices[i][j].
    """

    centers: np.ndarray         # (n, 3)
    patches: np.ndarray         # (n, k_nn, 3)
    source_indices: np.ndarray  # (n, k_nn)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        p = np.asarray(self.patches, dtype=np.float64)
        s = np.asarray(self.source_indices, dtype=np.int64)
        if c.ndim != 2 or c.shape[1] != 3 or p.ndim != 3 or p.shape[2] != 3:
            raise PatchError(f"bad patch set shapes: centers {c.shape}, patches {p.shape}")
        if p.shape[0] != c.shape[0] or s.shape != p.shape[:2]:
            raise PatchError(
                f"inconsistent patch set: centers {c.shape}, patches {p.shape}, indices {s.shape}"
            )
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "patches", p)
        object.__setattr__(self, "source_indices", s)

    def __len__(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class MaskSpec:
    """Partition of patch indices into masked and visible sets."""

    masked_indices: np.ndarray
    visible_indices: np.ndarray
    ratio: float
    n: int

    def __post_init__(self):
        m = np.sort(np.asarray(self.masked_indices, dtype=np.int64))
        v = np.sort(np.asarray(self.visible_indices, dtype=np.int64))
        both = np.concatenate([m, v])
        if len(both) != self.n or not np.array_equal(np.sort(both), np.arange(self.n)):
            raise PatchError("masked and visible indices must partition 0..n-1")
        object.__setattr__(self, "masked_indices", m)
        object.__setattr__(self, "visible_indices", v)

    @property
    def n_masked(self) -> int:
        return len(self.masked_indices)

    @property
    def n_visible(self) -> int:
        return len(self.visible_indices)


def _points_of(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PatchError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def fps(cloud, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Greedy farthest point sampling.

    The first center is drawn by the generator; each subsequent center is
    the point with the largest minimum squared distance to everything
    chosen so far (first index wins on ties).  Returns (centers, indices).
    """
    pts = _points_of(cloud)
    count = pts.shape[0]
    if n < 1:
        raise PatchError(f"need at least one center, got n={n}")
    if n > count:
        raise PatchError(f"cannot sample {n} centers from {count} points")
    first = int(rng.integers(count))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    mindist = ((pts - pts[first]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(mindist))
        chosen[i] = nxt
        mindist = np.minimum(mindist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return pts[chosen], chosen


def knn_patches(cloud, centers: np.ndarray, k_nn: int) -> PatchSet:
    """Group the k_nn nearest cloud points around each center.

    Distances tie-break to the lowest point index.  Patches are stored
    relative to their center, so a center that belongs to the cloud always
    contributes the offset (0, 0, 0).
    """
    pts = _points_of(cloud)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3 or centers.shape[0] == 0:
        raise PatchError(f"expected non-empty (n, 3) centers, got shape {centers.shape}")
    if k_nn > pts.shape[0]:
        raise PatchError(f"k_nn={k_nn} exceeds cloud size {pts.shape[0]}")
    d2 = ((centers[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_nn]
    patches = pts[order] - centers[:, None, :]
    return PatchSet(centers, patches, order)


def sample_mask(n: int, mask_ratio_range: tuple[float, float],
                rng: np.random.Generator) -> MaskSpec:
    """Draw a masking ratio from the range and mask round(m*n) patches."""
    if n < 2:
        raise PatchError(f"masking needs at least two patches, got n={n}")
    lo, hi = mask_ratio_range
    if not (0.0 < lo <= hi < 1.0):
        raise PatchError(f"mask ratio range must lie inside (0, 1), got [{lo}, {hi}]")
    ratio = float(rng.uniform(lo, hi))
    n_masked = int(math.floor(ratio * n + 0.5))
    masked = np.sort(rng.choice(n, size=n_masked, replace=False))
    visible = np.setdiff1d(np.arange(n), masked)
    return MaskSpec(masked, visible, ratio, n)


def split(patchset: PatchSet, maskspec: MaskSpec) -> tuple[PatchSet, PatchSet]:
    """Split a patch set into (visible, masked-ground-truth) halves."""
    if maskspec.n != len(patchset):
        raise PatchError(
            f"mask over {maskspec.n} patches does not match patch set of {len(patchset)}"
        )
    def _subset(idx):
        return PatchSet(patchset.centers[idx], patchset.patches[idx],
                        patchset.source_indices[idx])
    return _subset(maskspec.visible_indices), _subset(maskspec.masked_indices)
