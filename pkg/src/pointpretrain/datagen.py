"""Procedural multi-camera tabletop scenes with analytic depth rendering,
deterministic synthetic teacher embeddings, and the on-disk dataset format.

Scenes are a handful of primitives (box / sphere / cylinder) resting on a
rectangular table at z = 0 in the robot frame.  Each scene gets a ring of
cameras with randomized azimuth/elevation/distance whose extrinsics are
stored explicitly.  Depth is ray-cast against the analytic primitives and
the table; rasters store distance along the optical axis (z-depth) and 0
where nothing is hit, matching the back-projection convention.

Dataset layout (all multi-byte values little-endian):

    root/manifest.json                    format_version, scene_count,
                                          views_per_scene, teacher_dim,
                                          depth_height, depth_width
    root/scene_%06d/meta.json             scene description + probe target
    root/scene_%06d/views/view_%02d/depth.bin    raw float32, row-major H*W, meters
    root/scene_%06d/views/view_%02d/camera.json  width, height, fx, fy, cx, cy,
                                                 extrinsic (16 numbers, row-major
                                                 4x4, camera -> robot)
    root/scene_%06d/teacher.json          image: v x teacher_dim, text: teacher_dim
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraModel, RigidTransform, ViewSet

FORMAT_VERSION = 1
PRIMITIVE_TYPES = ("box", "sphere", "cylinder")

_RAY_EPS = 1e-9
# rng stream tags
_T_SCENE, _T_CAMERA, _T_STATE = 11, 12, 13
_T_IMAGE, _T_TEXT = 21, 22


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset on disk."""


class ScenePlacementError(RuntimeError):
    """Object placement failed after the configured number of retries."""


@dataclass(frozen=True)
class SceneObject:
    kind: str                 # box | sphere | cylinder
    size: tuple[float, ...]   # box: half extents (3,); sphere: (r,); cylinder: (r, half_h)
    position: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if self.kind not in PRIMITIVE_TYPES:
            raise DataFormatError(f"unknown primitive kind {self.kind!r}")

    def bounding_radius(self) -> float:
        if self.kind == "box":
            return float(np.linalg.norm(self.size))
        if self.kind == "sphere":
            return float(self.size[0])
        r, hh = self.size
        return float(np.hypot(r, hh))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[SceneObject, ...]
    table_extent: tuple[float, float]   # half extents in x and y
    robot_state: tuple[float, ...]

    @property
    def target_position(self) -> tuple[float, float, float]:
        return self.objects[0].position

    @property
    def target_yaw(self) -> float:
        return self.objects[0].yaw


@dataclass(frozen=True)
class SceneSample:
    """One pretraining example: views, teacher embeddings, probe target."""

    scene_id: int
    spec: SceneSpec
    depths: tuple[np.ndarray, ...]
    cameras: tuple[CameraModel, ...]
    teacher_image: np.ndarray   # (v, teacher_dim), unit rows
    teacher_text: np.ndarray    # (teacher_dim,), unit norm

    def view_set(self) -> ViewSet:
        return ViewSet(tuple(zip(self.depths, self.cameras)))

    @property
    def n_views(self) -> int:
        return len(self.depths)


@dataclass(frozen=True)
class GeneratorConfig:
    object_count_range: tuple[int, int] = (1, 3)
    table_extent: tuple[float, float] = (0.28, 0.28)
    placement_range: float = 0.18
    box_half_range: tuple[float, float] = (0.025, 0.06)
    sphere_radius_range: tuple[float, float] = (0.03, 0.06)
    cylinder_radius_range: tuple[float, float] = (0.025, 0.05)
    cylinder_half_height_range: tuple[float, float] = (0.035, 0.08)
    views_per_scene: int = 4
    depth_height: int = 96
    depth_width: int = 96
    teacher_dim: int = 32
    teacher_seed: int = 0
    robot_state_dim: int = 7
    camera_distance_range: tuple[float, float] = (0.55, 0.75)
    camera_elevation_range: tuple[float, float] = (0.6, 1.0)   # radians above horizon
    camera_azimuth_jitter: float = 0.25
    max_place_retries: int = 200

    def __post_init__(self):
        if self.object_count_range[0] < 1:
            raise DataFormatError("scenes need at least one object")
        if self.views_per_scene < 1:
            raise DataFormatError("need at least one view per scene")
        if self.teacher_dim < 8:
            raise DataFormatError(f"teacher_dim must be >= 8, got {self.teacher_dim}")


def _sample_object(rng: np.random.Generator, cfg: GeneratorConfig,
                   kind: str | None = None) -> SceneObject:
    if kind is None:
        kind = PRIMITIVE_TYPES[int(rng.integers(len(PRIMITIVE_TYPES)))]
    r = cfg.placement_range
    x, y = rng.uniform(-r, r, size=2)
    yaw = float(rng.uniform(-np.pi, np.pi))
    if kind == "box":
        half = rng.uniform(*cfg.box_half_range, size=3)
        return SceneObject(kind, tuple(map(float, half)), (float(x), float(y), float(half[2])), yaw)
    if kind == "sphere":
        radius = float(rng.uniform(*cfg.sphere_radius_range))
        return SceneObject(kind, (radius,), (float(x), float(y), radius), yaw)
    radius = float(rng.uniform(*cfg.cylinder_radius_range))
    half_h = float(rng.uniform(*cfg.cylinder_half_height_range))
    return SceneObject(kind, (radius, half_h), (float(x), float(y), half_h), yaw)


def generate_scene(seed: int, cfg: GeneratorConfig) -> SceneSpec:
    """Deterministic scene from a seed: objects are placed by rejection
    sampling so bounding spheres never overlap.

    The first object is always the single box and doubles as the probe
    target; a unique kind makes the regression target identifiable from
    geometry alone.  Extra objects are spheres or cylinders.
    """
    rng = np.random.default_rng([_T_SCENE, seed])
    count = int(rng.integers(cfg.object_count_range[0], cfg.object_count_range[1] + 1))
    objects: list[SceneObject] = []
    for index in range(count):
        kind = "box" if index == 0 else ("sphere", "cylinder")[int(rng.integers(2))]
        for attempt in range(cfg.max_place_retries + 1):
            if attempt == cfg.max_place_retries:
                raise ScenePlacementError(
                    f"could not place object without overlap after "
                    f"{cfg.max_place_retries} tries (scene seed {seed})"
                )
            cand = _sample_object(rng, cfg, kind=kind)
            ok = all(
                np.linalg.norm(np.subtract(cand.position, o.position))
                >= cand.bounding_radius() + o.bounding_radius()
                for o in objects
            )
            if ok:
                objects.append(cand)
                break
    state_rng = np.random.default_rng([_T_STATE, seed])
    robot_state = tuple(float(v) for v in state_rng.normal(0.0, 1.0, size=cfg.robot_state_dim))
    return SceneSpec(seed, tuple(objects), cfg.table_extent, robot_state)


def make_cameras(seed: int, cfg: GeneratorConfig) -> list[CameraModel]:
    """Ring of cameras looking at the table center, randomized per scene."""
    rng = np.random.default_rng([_T_CAMERA, seed])
    cams = []
    v = cfg.views_per_scene
    for i in range(v):
        azim = 2.0 * np.pi * i / v + rng.uniform(-cfg.camera_azimuth_jitter,
                                                 cfg.camera_azimuth_jitter)
        elev = rng.uniform(*cfg.camera_elevation_range)
        dist = rng.uniform(*cfg.camera_distance_range)
        eye = np.array([dist * np.cos(azim) * np.cos(elev),
                        dist * np.sin(azim) * np.cos(elev),
                        dist * np.sin(elev)])
        forward = -eye / np.linalg.norm(eye)          # look at the origin
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        # columns are the camera axes (x right, y down, z forward) in robot frame
        rot = np.stack([right, down, forward], axis=1)
        extr = RigidTransform(rot, eye)
        h, w = cfg.depth_height, cfg.depth_width
        focal = 0.85 * max(h, w)
        cams.append(CameraModel(width=w, height=h, fx=focal, fy=focal,
                                cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, extrinsic=extr))
    return cams


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    a = (d * d).sum(axis=1)
    b = 2.0 * (d @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = np.where(hit, (-b - sq) / (2.0 * a), np.inf)
    return np.where(hit & (t > _RAY_EPS), t, np.inf)


def _intersect_box(o, d, center, half, yaw):
    rot = _yaw_matrix(-yaw)
    o_l = rot @ (o - center)
    d_l = d @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o_l) / d_l
        t2 = (half - o_l) / d_l
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
    # rays parallel to a slab they are outside of never hit it
    parallel_out = np.any((d_l == 0.0) & (np.abs(o_l) > half), axis=1)
    hit = (tn <= tf) & (tf > _RAY_EPS) & ~parallel_out
    t = np.where(tn > _RAY_EPS, tn, tf)
    return np.where(hit, t, np.inf)


def _intersect_cylinder(o, d, center, radius, half_h):
    o_l = o - center
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (o_l[0] * dx + o_l[1] * dy)
    c = o_l[0] ** 2 + o_l[1] ** 2 - radius * radius
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - 4.0 * a * c
        sq = np.sqrt(np.where(disc >= 0.0, disc, 0.0))
        t_side = np.where((disc >= 0.0) & (a > 0.0), (-b - sq) / (2.0 * a), np.inf)
    z_side = o_l[2] + t_side * dz
    t_side = np.where((t_side > _RAY_EPS) & (np.abs(z_side) <= half_h), t_side, np.inf)
    best = t_side
    with np.errstate(divide="ignore", invalid="ignore"):
        for cap in (-half_h, half_h):
            t_cap = (cap - o_l[2]) / dz
            px = o_l[0] + t_cap * dx
            py = o_l[1] + t_cap * dy
            ok = (t_cap > _RAY_EPS) & (px * px + py * py <= radius * radius)
            best = np.minimum(best, np.where(ok, t_cap, np.inf))
    return best


def render_depth(scene: SceneSpec, camera: CameraModel) -> np.ndarray:
    """Ray-cast z-depth raster; 0 marks pixels with no hit."""
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(us.ravel() - camera.cx) / camera.fx,
                         (vs.ravel() - camera.cy) / camera.fy,
                         np.ones(h * w)], axis=1)
    rot = camera.extrinsic.rotation
    origin = camera.extrinsic.translation
    dirs = dirs_cam @ rot.T
    best = np.full(h * w, np.inf)

    for obj in scene.objects:
        center = np.asarray(obj.position)
        if obj.kind == "sphere":
            t = _intersect_sphere(origin, dirs, center, obj.size[0])
        elif obj.kind == "box":
            t = _intersect_box(origin, dirs, center, np.asarray(obj.size), obj.yaw)
        else:
            t = _intersect_cylinder(origin, dirs, center, obj.size[0], obj.size[1])
        best = np.minimum(best, t)

    ex, ey = scene.table_extent
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = -origin[2] / dz
    px = origin[0] + t_table * dirs[:, 0]
    py = origin[1] + t_table * dirs[:, 1]
    ok = (t_table > _RAY_EPS) & (np.abs(px) <= ex) & (np.abs(py) <= ey)
    best = np.minimum(best, np.where(ok, t_table, np.inf))

    # The ray parameter equals z-depth because dirs_cam has unit z.
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth.reshape(h, w)


def surface_distance(scene: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Distance from each robot-frame point to the nearest scene surface
    (primitives or the table patch); the analytic oracle for rendering."""
    pts = np.asarray(points, dtype=np.float64)
    best = np.full(len(pts), np.inf)
    for obj in scene.objects:
        center = np.asarray(obj.position)
        local = pts - center
        if obj.kind == "sphere":
            d = np.abs(np.linalg.norm(local, axis=1) - obj.size[0])
        elif obj.kind == "box":
            loc = local @ _yaw_matrix(-obj.yaw).T
            q = np.abs(loc) - np.asarray(obj.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            d = np.abs(outside + inside)
        else:
            radius, half_h = obj.size
            dr = np.hypot(local[:, 0], local[:, 1]) - radius
            dzv = np.abs(local[:, 2]) - half_h
            q = np.stack([dr, dzv], axis=1)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            d = np.abs(outside + inside)
        best = np.minimum(best, d)
    ex, ey = scene.table_extent
    qx = np.maximum(np.abs(pts[:, 0]) - ex, 0.0)
    qy = np.maximum(np.abs(pts[:, 1]) - ey, 0.0)
    d_table = np.sqrt(qx * qx + qy * qy + pts[:, 2] * pts[:, 2])
    return np.minimum(best, d_table)


_VIEW_FEATURE_SCALE = 0.1
_SPREAD_SCALE = 3.0
_MAX_VIEW_SLOTS = 8


def _scene_descriptor(scene: SceneSpec) -> list[float]:
    """Permutation-invariant per-kind aggregates, centered and scaled so the
    continuous geometry terms dominate and the map from geometry to
    descriptor is smooth (no sort-order discontinuities)."""
    box = scene.objects[0]
    feats: list[float] = [(s - 0.04) * 10.0 for s in box.size]
    feats += [p * 3.0 for p in box.position]
    # boxes are symmetric under half-turns, so only 2*yaw is observable
    feats += [np.sin(2.0 * box.yaw), np.cos(2.0 * box.yaw)]
    for kind in ("sphere", "cylinder"):
        group = [o for o in scene.objects if o.kind == kind]
        feats.append((len(group) - 0.75) * 0.6)
        if group:
            xs = np.array([o.position[0] for o in group])
            ys = np.array([o.position[1] for o in group])
            feats += [(float(np.mean([np.mean(o.size) for o in group])) - 0.04) * 10.0,
                      float(xs.mean()) * 3.0, float(ys.mean()) * 3.0,
                      float(xs.std()) * _SPREAD_SCALE, float(ys.std()) * _SPREAD_SCALE]
        else:
            feats += [0.0] * 5
    feats.append((len(scene.objects) - 2.0) * 0.5)
    return feats


def _text_descriptor(scene: SceneSpec) -> list[float]:
    feats: list[float] = []
    for kind in PRIMITIVE_TYPES:
        group = [o for o in scene.objects if o.kind == kind]
        feats.append((len(group) - 2.0 / 3.0) * 0.5)
        if group:
            mean_size = float(np.mean([np.mean(o.size) for o in group]))
            mean_x = float(np.mean([o.position[0] for o in group]))
            mean_y = float(np.mean([o.position[1] for o in group]))
            feats += [(mean_size - 0.04) * 10.0, mean_x * 3.0, mean_y * 3.0]
        else:
            feats += [0.0, 0.0, 0.0]
    feats.append((len(scene.objects) - 2.0) * 0.5)
    return feats


def synth_teacher(scene: SceneSpec, selector, teacher_seed: int, teacher_dim: int) -> np.ndarray:
    """Deterministic unit-norm stand-in for a pretrained encoder.

    ``selector`` is a view index (image mode, view-dependent) or the string
    "text" (view-independent).  A fixed seeded random linear map projects a
    hand-crafted scene descriptor and the result is l2-normalized, so equal
    scenes (and views) always produce equal embeddings.
    """
    if teacher_dim < 8:
        raise DataFormatError(f"teacher_dim must be >= 8, got {teacher_dim}")
    if selector == "text":
        feats = _text_descriptor(scene)
        tag = _T_TEXT
    else:
        view = int(selector)
        feats = _scene_descriptor(scene)
        onehot = [0.0] * _MAX_VIEW_SLOTS
        onehot[view % _MAX_VIEW_SLOTS] = 1.0
        feats += [(v - 1.0 / _MAX_VIEW_SLOTS) * _VIEW_FEATURE_SCALE for v in onehot]
        tag = _T_IMAGE
    feats.append(0.1)   # keeps the projection away from the zero vector
    phi = np.asarray(feats, dtype=np.float64)
    rng = np.random.default_rng([tag, teacher_seed, len(phi)])
    w = rng.normal(0.0, 1.0, size=(teacher_dim, len(phi))) / np.sqrt(len(phi))
    e = w @ phi
    return e / np.linalg.norm(e)


def build_sample(scene_id: int, spec: SceneSpec, cfg: GeneratorConfig) -> SceneSample:
    cameras = make_cameras(spec.seed, cfg)
    depths = tuple(render_depth(spec, cam).astype(np.float32) for cam in cameras)
    image = np.stack([synth_teacher(spec, i, cfg.teacher_seed, cfg.teacher_dim)
                      for i in range(cfg.views_per_scene)])
    text = synth_teacher(spec, "text", cfg.teacher_seed, cfg.teacher_dim)
    return SceneSample(scene_id, spec, depths, cameras, image, text)


def generate_dataset(cfg: GeneratorConfig, n_scenes: int, base_seed: int = 0) -> list[SceneSample]:
    return [build_sample(i, generate_scene(base_seed + i, cfg), cfg)
            for i in range(n_scenes)]


def _camera_to_json(cam: CameraModel) -> dict:
    return {
        "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "extrinsic": [float(v) for v in cam.extrinsic.matrix().reshape(-1)],
    }


def _camera_from_json(obj: dict, path: Path) -> CameraModel:
    try:
        extr = np.asarray(obj["extrinsic"], dtype=np.float64)
        if extr.size != 16:
            raise DataFormatError(f"{path}: extrinsic must hold 16 numbers, got {extr.size}")
        return CameraModel(
            width=int(obj["width"]), height=int(obj["height"]),
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            extrinsic=RigidTransform.from_matrix(extr.reshape(4, 4)),
        )
    except KeyError as e:
        raise DataFormatError(f"{path}: missing camera field {e.args[0]!r}") from e


def _spec_to_json(spec: SceneSpec) -> dict:
    return {
        "seed": spec.seed,
        "objects": [
            {"kind": o.kind, "size": list(o.size),
             "position": list(o.position), "yaw": o.yaw}
            for o in spec.objects
        ],
        "table_extent": list(spec.table_extent),
        "probe": {
            "robot_state": list(spec.robot_state),
            "target_position": list(spec.target_position),
            "target_yaw": spec.target_yaw,
        },
    }


def _spec_from_json(obj: dict, path: Path) -> SceneSpec:
    try:
        objects = tuple(
            SceneObject(kind=o["kind"], size=tuple(o["size"]),
                        position=tuple(o["position"]), yaw=float(o["yaw"]))
            for o in obj["objects"]
        )
        return SceneSpec(
            seed=int(obj["seed"]),
            objects=objects,
            table_extent=tuple(obj["table_extent"]),
            robot_state=tuple(obj["probe"]["robot_state"]),
        )
    except KeyError as e:
        raise DataFormatError(f"{path}: missing scene field {e.args[0]!r}") from e


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _read_json(path: Path):
    if not path.is_file():
        raise DataFormatError(f"{path}: file missing")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from e


def write_dataset(samples: list[SceneSample], directory) -> None:
    """Serialize samples to the documented layout (bit-exact round trip)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise DataFormatError("refusing to write an empty dataset")
    v = samples[0].n_views
    h, w = samples[0].depths[0].shape
    td = samples[0].teacher_text.shape[0]
    _write_json(root / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "scene_count": len(samples),
        "views_per_scene": v,
        "teacher_dim": td,
        "depth_height": int(h),
        "depth_width": int(w),
    })
    for i, sample in enumerate(samples):
        sdir = root / f"scene_{i:06d}"
        sdir.mkdir(parents=True, exist_ok=True)
        _write_json(sdir / "meta.json", _spec_to_json(sample.spec))
        _write_json(sdir / "teacher.json", {
            "image": [[float(x) for x in row] for row in sample.teacher_image],
            "text": [float(x) for x in sample.teacher_text],
        })
        for j, (depth, cam) in enumerate(zip(sample.depths, sample.cameras)):
            vdir = sdir / "views" / f"view_{j:02d}"
            vdir.mkdir(parents=True, exist_ok=True)
            (vdir / "depth.bin").write_bytes(
                np.ascontiguousarray(depth, dtype="<f4").tobytes()
            )
            _write_json(vdir / "camera.json", _camera_to_json(cam))


def read_dataset(directory) -> list[SceneSample]:
    """Load a dataset, validating structure before returning anything."""
    root = Path(directory)
    manifest = _read_json(root / "manifest.json")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{root / 'manifest.json'}: unknown format_version {version!r}"
        )
    try:
        count = int(manifest["scene_count"])
        v = int(manifest["views_per_scene"])
        td = int(manifest["teacher_dim"])
        h = int(manifest["depth_height"])
        w = int(manifest["depth_width"])
    except KeyError as e:
        raise DataFormatError(f"{root / 'manifest.json'}: missing field {e.args[0]!r}") from e

    samples = []
    for i in range(count):
        sdir = root / f"scene_{i:06d}"
        spec = _spec_from_json(_read_json(sdir / "meta.json"), sdir / "meta.json")
        teacher = _read_json(sdir / "teacher.json")
        image = np.asarray(teacher.get("image"), dtype=np.float64)
        text = np.asarray(teacher.get("text"), dtype=np.float64)
        if image.shape != (v, td):
            raise DataFormatError(
                f"{sdir / 'teacher.json'}: image embeddings shape {image.shape}, expected {(v, td)}"
            )
        if text.shape != (td,):
            raise DataFormatError(
                f"{sdir / 'teacher.json'}: text embedding shape {text.shape}, expected {(td,)}"
            )
        norms = np.concatenate([np.linalg.norm(image, axis=1), [np.linalg.norm(text)]])
        if np.abs(norms - 1.0).max() > 1e-6:
            raise DataFormatError(f"{sdir / 'teacher.json'}: embeddings are not unit-norm")
        depths = []
        cameras = []
        for j in range(v):
            vdir = sdir / "views" / f"view_{j:02d}"
            cam = _camera_from_json(_read_json(vdir / "camera.json"), vdir / "camera.json")
            if (cam.height, cam.width) != (h, w):
                raise DataFormatError(
                    f"{vdir / 'camera.json'}: raster {cam.height}x{cam.width} "
                    f"does not match manifest {h}x{w}"
                )
            raw = (vdir / "depth.bin").read_bytes() if (vdir / "depth.bin").is_file() else None
            if raw is None:
                raise DataFormatError(f"{vdir / 'depth.bin'}: file missing")
            if len(raw) != h * w * 4:
                raise DataFormatError(
                    f"{vdir / 'depth.bin'}: expected {h * w * 4} bytes, found {len(raw)}"
                )
            depths.append(np.frombuffer(raw, dtype="<f4").reshape(h, w))
            cameras.append(cam)
        samples.append(SceneSample(
            scene_id=i, spec=spec, depths=tuple(depths), cameras=tuple(cameras),
            teacher_image=image, teacher_text=text,
        ))
    return samples
