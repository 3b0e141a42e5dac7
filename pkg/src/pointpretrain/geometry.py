"""Camera geometry: depth back-projection, rigid transforms, and fusion
of multi-view point clouds into a shared robot frame.

Every cloud carries an explicit frame tag.  Depth rasters use the pinhole
model with pixel (u, v) = (column, row); a pixel with depth d back-projects
to ((u - cx) / fx * d, (v - cy) / fy * d, d) in the camera frame.  Camera
extrinsics map camera coordinates into the robot frame, which is the one
coordinate system all downstream processing sees.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

ROBOT_FRAME = "robot"
ORTHONORMAL_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (bad frame, bad shape, degenerate request)."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation; rotation must be orthonormal with det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(self.rotation))
        object.__setattr__(self, "translation", _freeze(self.translation))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise GeometryError(
                f"rigid transform needs 3x3 rotation and 3-vector translation, "
                f"got {self.rotation.shape} and {self.translation.shape}"
            )
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise GeometryError(f"rotation is not orthonormal (max |R'R - I| = {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise GeometryError(f"rotation determinant is {det}, expected +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"homogeneous matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > ORTHONORMAL_TOL:
            raise GeometryError("bottom row of a rigid homogeneous matrix must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera-to-robot extrinsic."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: RigidTransform

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"raster extents must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside raster {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class PointCloud:
    """Points (N, 3) in meters, tagged with the frame they live in."""

    points: np.ndarray
    frame: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _freeze(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ViewSet:
    """Per-view (depth raster, camera) pairs observing one scene."""

    views: tuple

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 1:
            raise GeometryError("a view set needs at least one view")
        for depth, camera in views:
            depth = np.asarray(depth)
            if depth.shape != (camera.height, camera.width):
                raise GeometryError(
                    f"depth raster {depth.shape} does not match camera "
                    f"{camera.height}x{camera.width}"
                )
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)


@dataclass(frozen=True)
class FusionPolicy:
    """How many of the available viewpoints to fuse per draw.

    ``fixed_k`` pins the subset size; otherwise it is drawn uniformly from
    {1, ..., v}, or {1, ..., v-1} when ``strict_subset`` is set (with a
    fallback to k=1 for single-view sets).
    """

    fixed_k: int | None = None
    strict_subset: bool = False


def backproject_depth(depth: np.ndarray, camera: CameraModel, frame: str = "camera") -> PointCloud:
    """Back-project a depth raster into a camera-frame cloud.

    Pixels with non-positive or non-finite depth are dropped (no-return
    sensor readings come through as zeros).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise GeometryError(
            f"depth raster {depth.shape} does not match camera "
            f"{camera.height}x{camera.width}"
        )
    valid = np.isfinite(depth) & (depth > 0)
    vs, us = np.nonzero(valid)
    d = depth[vs, us]
    x = (us - camera.cx) / camera.fx * d
    y = (vs - camera.cy) / camera.fy * d
    return PointCloud(np.stack([x, y, d], axis=1), frame)


def to_robot_frame(cloud: PointCloud, extrinsic: RigidTransform) -> PointCloud:
    """Map a camera-frame cloud into the robot frame; count is unchanged."""
    if cloud.frame == ROBOT_FRAME:
        raise GeometryError("cloud is already in the robot frame")
    return PointCloud(extrinsic.apply(cloud.points), ROBOT_FRAME)


def fuse_random_views(views: ViewSet, rng: np.random.Generator,
                      policy: FusionPolicy | None = None) -> tuple[PointCloud, tuple[int, ...]]:
    """Fuse a random subset of viewpoints into one robot-frame cloud.

    Returns the fused cloud and the chosen view indices (sorted) so runs
    can be replayed.  Points appear in chosen-view order, per-view raster
    order; as a multiset the result is independent of view ordering.
    """
    policy = policy or FusionPolicy()
    v = len(views)
    if policy.fixed_k is not None:
        k = policy.fixed_k
        if not 1 <= k <= v:
            raise GeometryError(f"fixed subset size {k} invalid for {v} views")
        if policy.strict_subset and k >= v and v > 1:
            raise GeometryError(f"strict subset requires k < v, got k={k}, v={v}")
    else:
        hi = v - 1 if (policy.strict_subset and v > 1) else v
        if policy.strict_subset and v == 1:
            warnings.warn("strict-subset fusion with a single view; falling back to k=1")
        k = int(rng.integers(1, hi + 1))
    chosen = np.sort(rng.choice(v, size=k, replace=False))
    parts = []
    for i in chosen:
        depth, camera = views.views[int(i)]
        cam_cloud = backproject_depth(depth, camera, frame=f"camera:{int(i)}")
        parts.append(to_robot_frame(cam_cloud, camera.extrinsic).points)
    return PointCloud(np.concatenate(parts, axis=0), ROBOT_FRAME), tuple(int(i) for i in chosen)


def downsample(cloud: PointCloud, target: int, rng: np.random.Generator) -> PointCloud:
    """Resample a cloud to exactly ``target`` points.

    Larger clouds are subsampled without replacement; smaller ones keep all
    points and pad by sampling with replacement, so every output point lies
    on a real surface.
    """
    if target <= 0:
        raise GeometryError(f"target point count must be positive, got {target}")
    count = len(cloud)
    if count == 0:
        raise GeometryError("cannot downsample an empty cloud")
    if count >= target:
        idx = rng.choice(count, size=target, replace=False)
    else:
        pad = rng.choice(count, size=target - count, replace=True)
        idx = np.concatenate([np.arange(count), pad])
    return PointCloud(cloud.points[idx], cloud.frame)


def crop_workspace(cloud: PointCloud, lower, upper) -> PointCloud:
    """Keep only points inside the axis-aligned box [lower, upper]."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    keep = np.all((cloud.points >= lower) & (cloud.points <= upper), axis=1)
    return PointCloud(cloud.points[keep], cloud.frame)
