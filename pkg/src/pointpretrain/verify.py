"""Oracle and property suites runnable from the command line.

Each suite compares the fast implementation against a slow independent
oracle (brute-force double loops, greedy reference FPS, exhaustive sorts,
central finite differences) at float64 and reports one pass/fail line per
check.  Failures carry the seed needed to replay the case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import GeneratorConfig, build_sample, generate_scene, surface_distance
from .geometry import (FusionPolicy, RigidTransform, backproject_depth,
                       fuse_random_views, to_robot_frame)
from .losses import chamfer_l2, contrastive_alignment, total_loss, LossWeights
from .model import Model, ModelConfig
from .patching import fps, knn_patches, sample_mask, split

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-9
SURFACE_TOL = 1e-6


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}/{self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def chamfer_oracle(pred: np.ndarray, target: np.ndarray) -> float:
    """Brute-force double loop over a single pair of point sets."""
    fwd = 0.0
    for r in pred:
        best = min(float(((r - g) ** 2).sum()) for g in target)
        fwd += best
    bwd = 0.0
    for g in target:
        best = min(float(((r - g) ** 2).sum()) for r in pred)
        bwd += best
    return fwd / len(pred) + bwd / len(target)


def fps_oracle(points: np.ndarray, n: int, first: int) -> list[int]:
    """Reference greedy selection; ties break to the lowest index."""
    chosen = [first]
    dmin = [float(((p - points[first]) ** 2).sum()) for p in points]
    for _ in range(n - 1):
        best_idx = 0
        best_val = -1.0
        for j, dj in enumerate(dmin):
            if dj > best_val:
                best_val = dj
                best_idx = j
        chosen.append(best_idx)
        for j in range(len(points)):
            dj = float(((points[j] - points[best_idx]) ** 2).sum())
            if dj < dmin[j]:
                dmin[j] = dj
    return chosen


def knn_oracle(points: np.ndarray, center: np.ndarray, k: int) -> list[int]:
    """Exhaustive (distance, index) sort."""
    keyed = sorted((float(((p - center) ** 2).sum()), j) for j, p in enumerate(points))
    return [j for _, j in keyed[:k]]


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

def _op_programs(rng: np.random.Generator):
    """Scalar-valued programs exercising every registered op."""
    def rnd(*shape):
        return rng.normal(0.0, 1.0, size=shape)

    a23, b23 = rnd(2, 3), rnd(2, 3)
    a34 = rnd(3, 4)
    a234 = rnd(2, 3, 4)
    pos23 = np.abs(rnd(2, 3)) + 0.5
    gain, bias = rnd(4), rnd(4)
    idx = rng.integers(0, 3, size=4)
    w23a, w23b = rnd(2, 3), rnd(2, 3)

    return [
        ("add", lambda x, y: ad.reduce_sum(ad.add(x, y)), [a23, b23]),
        ("add_broadcast", lambda x, y: ad.reduce_sum(ad.add(x, y)), [a23, rnd(3)]),
        ("sub", lambda x, y: ad.reduce_sum(ad.sub(x, y)), [a23, b23]),
        ("mul", lambda x, y: ad.reduce_sum(ad.mul(x, y)), [a23, b23]),
        ("div", lambda x, y: ad.reduce_sum(ad.div(x, y)), [a23, pos23]),
        ("neg", lambda x: ad.reduce_sum(ad.neg(x)), [a23]),
        ("matmul", lambda x, y: ad.reduce_sum(ad.matmul(x, y)), [a23, a34]),
        ("matmul_batched", lambda x, y: ad.reduce_sum(ad.matmul(x, y)),
         [rnd(2, 3, 4), rnd(2, 4, 3)]),
        ("matmul_mixed", lambda x, y: ad.reduce_sum(ad.matmul(x, y)),
         [a234, rnd(4, 2)]),
        ("transpose", lambda x: ad.reduce_sum(ad.mul(ad.transpose(x, (1, 0, 2)), 0.5)),
         [a234]),
        ("reshape", lambda x: ad.reduce_sum(ad.mul(ad.reshape(x, (6, 4)), 2.0)), [a234]),
        ("concat", lambda x, y: ad.reduce_sum(ad.mul(ad.concat([x, y], axis=0), 1.5)),
         [a23, b23]),
        ("take", lambda x: ad.reduce_sum(ad.mul(ad.take(x, idx), 2.0)), [a34]),
        ("broadcast_to", lambda x: ad.reduce_sum(ad.broadcast_to(x, (4, 3))), [rnd(1, 3)]),
        ("reduce_sum_axis", lambda x: ad.reduce_sum(ad.mul(ad.reduce_sum(x, axis=1), 2.0)),
         [a234]),
        ("reduce_mean", lambda x: ad.reduce_mean(x), [a234]),
        ("reduce_mean_axis", lambda x: ad.reduce_sum(ad.reduce_mean(x, axis=0)), [a23]),
        ("reduce_max", lambda x: ad.reduce_sum(ad.reduce_max(x, axis=1)), [a234]),
        ("reduce_min", lambda x: ad.reduce_sum(ad.reduce_min(x, axis=1)), [a234]),
        ("softmax", lambda x: ad.reduce_sum(ad.mul(ad.softmax(x, axis=-1), w23a)),
         [a23]),
        ("exp", lambda x: ad.reduce_sum(ad.exp(x)), [a23]),
        ("log", lambda x: ad.reduce_sum(ad.log(x)), [pos23]),
        ("sqrt", lambda x: ad.reduce_sum(ad.sqrt(x)), [pos23]),
        ("gelu", lambda x: ad.reduce_sum(ad.gelu(x)), [a23]),
        ("layer_norm", lambda x, g, b: ad.reduce_sum(ad.layer_norm(x, g, b)),
         [rnd(3, 4), gain, bias]),
        ("logsumexp", lambda x: ad.reduce_sum(ad.logsumexp(x, axis=1)), [a23]),
        ("l2_normalize", lambda x: ad.reduce_sum(ad.mul(ad.l2_normalize(x), w23b)),
         [a23]),
        ("chamfer", lambda x, y: chamfer_l2(x, y), [rnd(2, 5, 3), rnd(2, 4, 3)]),
    ]


def run_op_gradient_checks(seed: int = 0, trials: int = 20) -> list[CheckResult]:
    results = []
    names = [name for name, _, _ in _op_programs(np.random.default_rng(0))]
    for name in names:
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial])
            programs = {nm: (f, inputs) for nm, f, inputs in _op_programs(rng)}
            f, inputs = programs[name]
            worst = max(worst, ad.grad_check(f, inputs))
        results.append(CheckResult(
            "grads", name, worst < GRAD_TOL,
            f"max rel err {worst:.3e} over {trials} trials (tol {GRAD_TOL:g}, seed {seed})"
        ))
    return results


def miniature_setup(seed: int = 0):
    """Tiny end-to-end training graph: 2-block encoder/decoder, width 16,
    8 patches of 8 points, batch of 4.

    Weights are re-drawn at O(1) scale so every max-pool and nearest-point
    selection sits in general position; at the tiny training init the
    decoder outputs nearly coincide and finite differences would straddle
    the resulting argmin kinks.
    """
    cfg = ModelConfig(embed_dim=16, encoder_depth=2, decoder_depth=2, num_heads=2,
                      mlp_ratio=2.0, teacher_dim=8, n_patches=8, k_nn=8)
    model = Model.init(cfg, seed=seed, dtype=np.float64)
    spread = np.random.default_rng([seed, 17])
    for name, tensor in model.params.items():
        if name == "log_tau":
            continue
        tensor.data = spread.normal(0.0, 0.35, size=tensor.data.shape)
    rng = np.random.default_rng([seed, 99])
    batch = []
    for i in range(4):
        cloud = rng.normal(0.0, 0.2, size=(64, 3))
        centers, _ = fps(cloud, cfg.n_patches, rng)
        patches = knn_patches(cloud, centers, cfg.k_nn)
        mask = sample_mask(cfg.n_patches, (0.6, 0.8), rng)
        image = rng.normal(size=cfg.teacher_dim)
        text = rng.normal(size=cfg.teacher_dim)
        batch.append((patches, mask,
                      image / np.linalg.norm(image), text / np.linalg.norm(text)))
    return model, cfg, batch


def miniature_loss(model: Model, cfg: ModelConfig, batch) -> Tensor:
    weights = LossWeights()
    recon_terms = []
    rows = []
    images = []
    texts = []
    for patches, mask, image, text in batch:
        visible, ground_truth = split(patches, mask)
        tokens, pos = model.embed_tokens(visible.patches, visible.centers)
        feats = model.encode(tokens, pos)
        pred = model.decode_masked(feats, mask, patches.centers)
        recon_terms.append(ad.reshape(chamfer_l2(pred, ground_truth.patches), (1,)))
        rows.append(ad.reshape(model.scene_embedding(patches.patches, patches.centers),
                               (1, cfg.teacher_dim)))
        images.append(image)
        texts.append(text)
    recon = ad.reduce_mean(ad.concat(recon_terms, axis=0))
    tau = model.tau()
    points = ad.concat(rows, axis=0)
    con_image = contrastive_alignment(points, np.stack(images), tau)
    con_text = contrastive_alignment(points, np.stack(texts), tau)
    return total_loss(recon, con_image, con_text, weights)


def run_end_to_end_gradient_check(seed: int = 0, coords_per_param: int = 6) -> CheckResult:
    model, cfg, batch = miniature_setup(seed)
    names = list(model.params)
    arrays = [model.params[n].data for n in names]

    def rebuild(*tensors: Tensor) -> Tensor:
        target = Model(cfg, dict(zip(names, tensors)))
        return miniature_loss(target, cfg, batch)

    err = ad.grad_check(rebuild, arrays, eps=1e-6,
                        max_coords_per_input=coords_per_param,
                        rng=np.random.default_rng([seed, 7]))
    return CheckResult(
        "grads", "end_to_end_total_loss", err < GRAD_TOL,
        f"max rel err {err:.3e} over {coords_per_param} coords/param (tol {GRAD_TOL:g}, seed {seed})"
    )


def run_grads_suite(seed: int = 0) -> list[CheckResult]:
    results = run_op_gradient_checks(seed)
    results.append(run_end_to_end_gradient_check(seed))
    return results


# ---------------------------------------------------------------------------
# Chamfer suite
# ---------------------------------------------------------------------------

def run_chamfer_suite(seed: int = 0, trials: int = 100) -> list[CheckResult]:
    worst = 0.0
    worst_seed = None
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        p = int(rng.integers(1, 65))
        q = int(rng.integers(1, 65))
        pred = rng.normal(0.0, 1.0, size=(1, p, 3))
        target = rng.normal(0.0, 1.0, size=(1, q, 3))
        fast = float(chamfer_l2(pred, target).data)
        slow = chamfer_oracle(pred[0], target[0])
        err = abs(fast - slow)
        if err > worst:
            worst, worst_seed = err, trial
    return [CheckResult(
        "chamfer", "oracle_equivalence", worst < ORACLE_TOL,
        f"max |fast - oracle| {worst:.3e} over {trials} pairs "
        f"(tol {ORACLE_TOL:g}, seed {seed}, worst trial {worst_seed})"
    )]


# ---------------------------------------------------------------------------
# FPS / KNN suite
# ---------------------------------------------------------------------------

def run_fps_suite(seed: int = 0, trials: int = 1000) -> list[CheckResult]:
    fps_fail = None
    knn_fail = None
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        count = int(rng.integers(2, 257))
        points = rng.normal(0.0, 1.0, size=(count, 3))
        n = int(rng.integers(1, min(count, 32) + 1))
        _, idx = fps(points, n, np.random.default_rng([seed, trial, 1]))
        first = int(np.random.default_rng([seed, trial, 1]).integers(count))
        expected = fps_oracle(points, n, first)
        if idx.tolist() != expected and fps_fail is None:
            fps_fail = trial
        k = int(rng.integers(1, min(count, 16) + 1))
        centers = points[idx[: min(4, n)]]
        got = knn_patches(points, centers, k).source_indices
        for c, row in zip(centers, got):
            if row.tolist() != knn_oracle(points, c, k) and knn_fail is None:
                knn_fail = trial
    results = [
        CheckResult("fps", "fps_greedy_oracle", fps_fail is None,
                    f"exact index agreement on {trials} clouds (seed {seed})"
                    if fps_fail is None else f"mismatch at trial {fps_fail} (seed {seed})"),
        CheckResult("fps", "knn_sort_oracle", knn_fail is None,
                    f"exact index agreement on {trials} clouds (seed {seed})"
                    if knn_fail is None else f"mismatch at trial {knn_fail} (seed {seed})"),
    ]
    return results


# ---------------------------------------------------------------------------
# Fusion / rendering suite
# ---------------------------------------------------------------------------

def _small_gen_config() -> GeneratorConfig:
    return GeneratorConfig(depth_height=48, depth_width=48, views_per_scene=3)


def run_fusion_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    gen = _small_gen_config()

    commute_fail = None
    for trial in range(100):
        sample = build_sample(trial, generate_scene(seed + trial, gen), gen)
        views = sample.view_set()
        reversed_views = type(views)(tuple(reversed(views.views)))
        policy = FusionPolicy(fixed_k=len(views))
        a, _ = fuse_random_views(views, np.random.default_rng([seed, trial, 0]), policy)
        b, _ = fuse_random_views(reversed_views, np.random.default_rng([seed, trial, 1]), policy)
        sa = a.points[np.lexsort(a.points.T)]
        sb = b.points[np.lexsort(b.points.T)]
        if sa.shape != sb.shape or not np.array_equal(sa, sb):
            commute_fail = trial
            break
    results.append(CheckResult(
        "fusion", "multiset_commutativity", commute_fail is None,
        "fused clouds identical as sorted multisets over 100 scenes"
        if commute_fail is None else f"mismatch at scene {commute_fail} (seed {seed})"))

    worst_rt = 0.0
    for trial in range(100):
        rng = np.random.default_rng([seed, 500 + trial])
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        transform = RigidTransform(rot, rng.normal(size=3))
        pts = rng.normal(size=(50, 3))
        back = transform.inverse().apply(transform.apply(pts))
        worst_rt = max(worst_rt, float(np.abs(back - pts).max()))
    results.append(CheckResult(
        "fusion", "rigid_round_trip", worst_rt < ORACLE_TOL,
        f"max |inverse(apply(p)) - p| = {worst_rt:.3e} over 100 transforms "
        f"(tol {ORACLE_TOL:g}, seed {seed})"))

    worst_surface = 0.0
    for trial in range(20):
        scene = generate_scene(seed + 300 + trial, gen)
        sample = build_sample(trial, scene, gen)
        for depth, cam in zip(sample.depths, sample.cameras):
            cloud = to_robot_frame(backproject_depth(depth, cam), cam.extrinsic)
            if len(cloud):
                worst_surface = max(worst_surface,
                                    float(surface_distance(scene, cloud.points).max()))
    results.append(CheckResult(
        "fusion", "render_backproject_surface", worst_surface < SURFACE_TOL,
        f"max surface residual {worst_surface:.3e} over 20 scenes "
        f"(tol {SURFACE_TOL:g}, seed {seed})"))
    return results


SUITES = {
    "grads": run_grads_suite,
    "chamfer": run_chamfer_suite,
    "fps": run_fps_suite,
    "fusion": run_fusion_suite,
}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    if name == "all":
        results = []
        for suite in SUITES.values():
            results.extend(suite(seed))
        return results
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name](seed)
