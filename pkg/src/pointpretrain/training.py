"""Pre-training loop, optimizer, evaluation probes, and metrics.

Each step fuses a random subset of views per sample into the robot frame,
tokenizes the fused cloud (FPS + KNN + random masking), runs the visible
pass through the encoder into the masked-patch decoder for the
reconstruction loss, runs the full pass into the pooled projection for the
alignment losses against the per-scene teacher embeddings, and applies one
decoupled-weight-decay adaptive-moment update (including the learnable
log-temperature, floored after each step).

Everything is driven by integer-tagged child generators of the run seed,
so single-worker runs are bit-reproducible end to end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .datagen import SceneSample
from .geometry import (FusionPolicy, PointCloud, ViewSet, crop_workspace,
                       downsample, fuse_random_views)
from .losses import (LossReport, LossWeights, chamfer_l2, contrastive_alignment,
                     mean_positive_similarity, retrieval_top1, total_loss)
from .model import Model, ModelConfig
from .patching import PatchConfig, fps, knn_patches, sample_mask, split

# rng stream tags
_K_STEP, _K_ORDER, _K_TEACHER, _K_EVAL, _K_PROBE, _K_SHIFT, _K_RETRIEVAL = 1, 2, 3, 4, 5, 6, 7


class ConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """A step produced a non-finite loss; parameters were left untouched."""


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"   # or "cosine"
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_points: int = 1024
    # optional axis-aligned filter applied after fusion, before downsampling,
    # e.g. ((-0.5, -0.5, 0.004), (0.5, 0.5, 1.0)) to drop the table plane
    workspace_crop: tuple | None = None
    # sensor-like Gaussian noise (meters) added to training clouds only
    point_jitter: float = 0.0
    holdout_scenes: int = 0
    disable_mae: bool = False
    disable_contrastive: bool = False
    precision: str = "float32"
    checkpoint_interval: int | None = None
    contrastive_mode: str = "exclusive"
    contrastive_reduction: str = "mean"
    tau_init: float = 0.07
    tau_min: float = 0.01
    loss_weights: LossWeights = field(default_factory=LossWeights)
    patch: PatchConfig = field(default_factory=PatchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionPolicy = field(default_factory=FusionPolicy)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.disable_contrastive and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2 (negatives)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.n_points < self.patch.n:
            raise ConfigError(
                f"n_points={self.n_points} cannot be smaller than patch count {self.patch.n}"
            )
        if self.model.n_patches != self.patch.n or self.model.k_nn != self.patch.k_nn:
            raise ConfigError(
                "model token layout must match the patch config "
                f"(model n={self.model.n_patches}/k={self.model.k_nn}, "
                f"patch n={self.patch.n}/k={self.patch.k_nn})"
            )
        if not (0.0 < self.tau_min <= self.tau_init):
            raise ConfigError("need 0 < tau_min <= tau_init")
        if self.disable_mae and self.disable_contrastive:
            raise ConfigError("all loss terms disabled; nothing to train")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_schedule": self.lr_schedule,
            "warmup_frac": self.warmup_frac,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "n_points": self.n_points,
            "workspace_crop": ([list(self.workspace_crop[0]), list(self.workspace_crop[1])]
                               if self.workspace_crop is not None else None),
            "point_jitter": self.point_jitter,
            "holdout_scenes": self.holdout_scenes,
            "disable_mae": self.disable_mae,
            "disable_contrastive": self.disable_contrastive,
            "precision": self.precision,
            "checkpoint_interval": self.checkpoint_interval,
            "contrastive_mode": self.contrastive_mode,
            "contrastive_reduction": self.contrastive_reduction,
            "tau_init": self.tau_init,
            "tau_min": self.tau_min,
            "loss_weights": {"alpha": self.loss_weights.alpha,
                             "beta": self.loss_weights.beta,
                             "gamma": self.loss_weights.gamma},
            "patch": {"n": self.patch.n, "k_nn": self.patch.k_nn,
                      "mask_ratio_range": list(self.patch.mask_ratio_range)},
            "model": {"embed_dim": self.model.embed_dim,
                      "encoder_depth": self.model.encoder_depth,
                      "decoder_depth": self.model.decoder_depth,
                      "num_heads": self.model.num_heads,
                      "mlp_ratio": self.model.mlp_ratio,
                      "teacher_dim": self.model.teacher_dim,
                      "n_patches": self.model.n_patches,
                      "k_nn": self.model.k_nn,
                      "pooling": self.model.pooling,
                      "projection_hidden": self.model.projection_hidden,
                      "patch_coord_scale": self.model.patch_coord_scale,
                      "center_coord_scale": self.model.center_coord_scale},
            "fusion": {"fixed_k": self.fusion.fixed_k,
                       "strict_subset": self.fusion.strict_subset},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        kwargs = {}
        plain = ("steps", "batch_size", "learning_rate", "lr_schedule", "warmup_frac",
                 "weight_decay", "beta1", "beta2", "adam_eps", "seed", "n_points",
                 "point_jitter", "holdout_scenes", "disable_mae", "disable_contrastive",
                 "precision", "checkpoint_interval", "contrastive_mode",
                 "contrastive_reduction", "tau_init", "tau_min")
        for key in plain:
            if key in data:
                kwargs[key] = data[key]
        if "workspace_crop" in data:
            crop = data["workspace_crop"]
            kwargs["workspace_crop"] = (tuple(tuple(b) for b in crop)
                                        if crop is not None else None)
        unknown = (set(data) - set(plain)
                   - {"workspace_crop", "loss_weights", "patch", "model", "fusion"})
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "loss_weights" in data:
            kwargs["loss_weights"] = LossWeights(**data["loss_weights"])
        if "patch" in data:
            p = dict(data["patch"])
            if "mask_ratio_range" in p:
                p["mask_ratio_range"] = tuple(p["mask_ratio_range"])
            kwargs["patch"] = PatchConfig(**p)
        if "model" in data:
            kwargs["model"] = ModelConfig(**data["model"])
        if "fusion" in data:
            kwargs["fusion"] = FusionPolicy(**data["fusion"])
        return cls(**kwargs)


class AdamW:
    """Decoupled-weight-decay adaptive moment optimizer.

    Decay is applied to every parameter on every step, gradient or not;
    missing gradients count as zero.  A step with any non-finite gradient
    is rejected before anything is mutated.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 decay_filter=None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteLossError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and (self.decay_filter is None or self.decay_filter(name)):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def moments(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_moments(self, moments: dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = np.asarray(moments[f"opt.m.{name}"], dtype=self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = np.asarray(moments[f"opt.v.{name}"], dtype=self.v[name].dtype).reshape(self.v[name].shape)
        self.t = t


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate after a linear warmup prefix: constant by default, or
    cosine-decayed to zero over the remaining steps."""
    warmup = max(1, int(math.ceil(cfg.warmup_frac * cfg.steps)))
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    if cfg.lr_schedule == "cosine":
        progress = (step - warmup) / max(1, cfg.steps - warmup)
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.learning_rate


def _resample(cloud, cfg: TrainConfig, rng: np.random.Generator):
    """Workspace crop (with a fallback when it would starve the patcher)
    followed by downsampling to the configured point count."""
    if cfg.workspace_crop is not None:
        lower, upper = cfg.workspace_crop
        cropped = crop_workspace(cloud, lower, upper)
        if len(cropped) >= cfg.patch.n:
            cloud = cropped
    return downsample(cloud, cfg.n_points, rng)


def _tokenize(cloud, cfg: TrainConfig, rng: np.random.Generator):
    cloud = _resample(cloud, cfg, rng)
    centers, _ = fps(cloud, cfg.patch.n, rng)
    return knn_patches(cloud, centers, cfg.patch.k_nn)


def prepare_sample(sample: SceneSample, cfg: TrainConfig, rng: np.random.Generator):
    """Fuse, resample, and tokenize one training draw (jitter applied here
    only; evaluation paths embed clean clouds)."""
    cloud, chosen = fuse_random_views(sample.view_set(), rng, cfg.fusion)
    cloud = _resample(cloud, cfg, rng)
    if cfg.point_jitter > 0.0:
        noisy = cloud.points + rng.normal(0.0, cfg.point_jitter, size=cloud.points.shape)
        cloud = PointCloud(noisy, cloud.frame)
    centers, _ = fps(cloud, cfg.patch.n, rng)
    return knn_patches(cloud, centers, cfg.patch.k_nn), chosen


def _clamp_tau(model: Model, cfg: TrainConfig) -> None:
    floor = math.log(cfg.tau_min)
    lt = model.params["log_tau"]
    if lt.data < floor:
        lt.data = np.asarray(floor, dtype=lt.data.dtype)


def pretrain_step(batch: list[SceneSample], model: Model, opt: AdamW,
                  cfg: TrainConfig, step: int) -> LossReport:
    """One optimizer update over a batch of scenes; returns the loss report."""
    if not cfg.disable_contrastive and len(batch) < 2:
        raise ConfigError("contrastive training needs at least two samples per batch")
    ad.zero_grads(model.params)

    recon_terms = []
    point_rows = []
    image_targets = []
    text_targets = []
    for i, sample in enumerate(batch):
        rng = _rng(cfg.seed, _K_STEP, step, i)
        patches, _ = prepare_sample(sample, cfg, rng)
        if not cfg.disable_mae:
            mask = sample_mask(cfg.patch.n, cfg.patch.mask_ratio_range, rng)
            visible, ground_truth = split(patches, mask)
            tokens, pos = model.embed_tokens(visible.patches, visible.centers)
            feats = model.encode(tokens, pos)
            predicted = model.decode_masked(feats, mask, patches.centers)
            if mask.n_masked > 0:
                recon_terms.append(chamfer_l2(predicted, ground_truth.patches))
        if not cfg.disable_contrastive:
            emb = model.scene_embedding(patches.patches, patches.centers)
            point_rows.append(ad.reshape(emb, (1, cfg.model.teacher_dim)))
            pick = int(_rng(cfg.seed, _K_TEACHER, step, sample.scene_id).integers(sample.n_views))
            image_targets.append(sample.teacher_image[pick])
            text_targets.append(sample.teacher_text)

    if recon_terms:
        stacked = ad.concat([ad.reshape(t, (1,)) for t in recon_terms], axis=0)
        loss_recon = ad.reduce_mean(stacked)
    else:
        loss_recon = Tensor(np.asarray(0.0, dtype=cfg.dtype))

    top1 = None
    pos_sim = None
    if not cfg.disable_contrastive:
        points = ad.concat(point_rows, axis=0)
        image = np.stack(image_targets).astype(cfg.dtype)
        text = np.stack(text_targets).astype(cfg.dtype)
        tau = model.tau()
        loss_image = contrastive_alignment(points, image, tau, cfg.contrastive_mode,
                                           cfg.contrastive_reduction)
        loss_text = contrastive_alignment(points, text, tau, cfg.contrastive_mode,
                                          cfg.contrastive_reduction)
        top1 = retrieval_top1(points.data, image)
        pos_sim = mean_positive_similarity(points.data, image)
    else:
        loss_image = Tensor(np.asarray(0.0, dtype=cfg.dtype))
        loss_text = Tensor(np.asarray(0.0, dtype=cfg.dtype))

    combined = total_loss(loss_recon, loss_image, loss_text, cfg.loss_weights)
    if not np.isfinite(combined.data):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: recon={float(loss_recon.data)}, "
            f"image={float(loss_image.data)}, text={float(loss_text.data)}"
        )
    combined.backward()
    opt.step(lr_at(cfg, step))
    _clamp_tau(model, cfg)

    recon = float(loss_recon.data)
    con_image = float(loss_image.data)
    con_text = float(loss_text.data)
    w = cfg.loss_weights
    return LossReport(
        recon=recon, con_image=con_image, con_text=con_text,
        total=w.alpha * recon + w.beta * con_image + w.gamma * con_text,
        tau=float(np.exp(model.params["log_tau"].data)),
        retrieval_top1=top1, mean_positive_sim=pos_sim,
    )


def _metrics_line(step: int, report: LossReport) -> str:
    record = {"step": step, "loss": report.total, "loss_recon": report.recon,
              "loss_con_image": report.con_image, "loss_con_text": report.con_text,
              "tau": report.tau, "retrieval_top1": report.retrieval_top1,
              "mean_positive_sim": report.mean_positive_sim}
    return json.dumps(record, sort_keys=True)


def pretrain(samples: list[SceneSample], cfg: TrainConfig, out_dir=None,
             metrics_path=None, trainable=None, log=None) -> tuple[Model, AdamW, list[LossReport]]:
    """Run the full pre-training loop.

    ``trainable`` optionally restricts optimizer updates to parameter names
    it accepts (gradients still flow everywhere).  Checkpoints are written
    every ``checkpoint_interval`` steps (default steps // 10) plus a final
    one; a failed write aborts the run.
    """
    train = samples[:len(samples) - cfg.holdout_scenes] if cfg.holdout_scenes else samples
    if len(train) < cfg.batch_size:
        raise ConfigError(
            f"{len(train)} training scenes cannot fill a batch of {cfg.batch_size}"
        )
    model = Model.init(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
    opt_params = model.params if trainable is None else {
        k: v for k, v in model.params.items() if trainable(k)
    }
    if not opt_params:
        raise ConfigError("trainable filter selected no parameters")
    # decay only matrix-shaped weights, the usual AdamW practice
    decay_filter = lambda name: model.params[name].data.ndim >= 2
    opt = AdamW(opt_params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                decay_filter=decay_filter)
    model.params["log_tau"].data = np.asarray(math.log(cfg.tau_init), dtype=cfg.dtype)

    interval = cfg.checkpoint_interval or max(1, cfg.steps // 10)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(metrics_path, "w") if metrics_path is not None else None

    reports: list[LossReport] = []
    order: list[int] = []
    epoch = 0
    try:
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                order = list(_rng(cfg.seed, _K_ORDER, epoch).permutation(len(train)))
                epoch += 1
            picked = [train[order.pop()] for _ in range(cfg.batch_size)]
            report = pretrain_step(picked, model, opt, cfg, step)
            reports.append(report)
            line = _metrics_line(step, report)
            if metrics_fh is not None:
                metrics_fh.write(line + "\n")
                metrics_fh.flush()
            if log is not None:
                log(line)
            if out_dir is not None and ((step + 1) % interval == 0 or step + 1 == cfg.steps):
                save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.ckpt",
                                cfg.to_dict(), model.params, step + 1,
                                opt_moments=opt.moments(), opt_step=opt.t)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint_final.ckpt", cfg.to_dict(),
                            model.params, cfg.steps,
                            opt_moments=opt.moments(), opt_step=opt.t)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return model, opt, reports


class CheckpointDataError(ValueError):
    pass


def model_from_checkpoint(data: CheckpointData) -> tuple[Model, TrainConfig]:
    cfg = TrainConfig.from_dict(data.config)
    model = Model.init(cfg.model, seed=cfg.seed, dtype=cfg.dtype)
    if set(model.params) != set(data.params):
        missing = set(model.params) ^ set(data.params)
        raise CheckpointDataError(f"checkpoint parameters do not match config: {sorted(missing)}")
    for name, arr in data.params.items():
        tensor = model.params[name]
        if tuple(arr.shape) != tensor.data.shape:
            raise CheckpointDataError(
                f"parameter {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr.astype(cfg.dtype)
    return model, cfg


def load_model(path) -> tuple[Model, TrainConfig, CheckpointData]:
    data = load_checkpoint(path)
    model, cfg = model_from_checkpoint(data)
    return model, cfg, data


# ---------------------------------------------------------------------------
# Frozen-feature evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    steps: int = 400
    learning_rate: float = 1e-2
    weight_decay: float = 1e-3
    seed: int = 0
    holdout_scenes: int = 32


@dataclass(frozen=True)
class ProbeReport:
    arm: str
    mse_position: float        # held-out mean squared error per coordinate (m^2)
    mse_position_train: float
    yaw_error: float           # held-out mean absolute wrapped yaw error (rad)
    n_train: int
    n_heldout: int

    def as_dict(self) -> dict:
        return {"arm": self.arm, "mse_position": self.mse_position,
                "mse_position_train": self.mse_position_train,
                "yaw_error": self.yaw_error,
                "n_train": self.n_train, "n_heldout": self.n_heldout}


def scene_features(model: Model, sample: SceneSample, cfg: TrainConfig,
                   seed_tag: int, seed: int):
    """Pooled global feature of a scene under full fusion of all views."""
    rng = _rng(seed, seed_tag, sample.scene_id)
    views = sample.view_set()
    cloud, _ = fuse_random_views(views, rng, FusionPolicy(fixed_k=len(views)))
    patches = _tokenize(cloud, cfg, rng)
    with ad.no_grad():
        feats = model.encode_patches(patches.patches, patches.centers)
        pooled = model.pool(feats)
    return pooled.data.astype(np.float64), patches


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return np.mod(a + np.pi, 2.0 * np.pi) - np.pi


def probe(samples: list[SceneSample], model: Model, cfg: TrainConfig,
          probe_cfg: ProbeConfig, arm: str = "pretrained",
          zero_features: bool = False, zero_state: bool = False) -> ProbeReport:
    """Train a small regression head on frozen features + robot state and
    report held-out pose error.  The encoder is never updated."""
    if probe_cfg.holdout_scenes < 1 or probe_cfg.holdout_scenes >= len(samples):
        raise ConfigError("probe needs a non-empty holdout strictly smaller than the dataset")
    feats = []
    states = []
    targets = []
    for sample in samples:
        pooled, _ = scene_features(model, sample, cfg, _K_PROBE, probe_cfg.seed)
        feats.append(np.zeros_like(pooled) if zero_features else pooled)
        state = np.asarray(sample.spec.robot_state, dtype=np.float64)
        states.append(np.zeros_like(state) if zero_state else state)
        pos = np.asarray(sample.spec.target_position, dtype=np.float64)
        yaw = sample.spec.target_yaw
        targets.append(np.concatenate([pos, [np.sin(yaw), np.cos(yaw)]]))
    x = np.concatenate([np.stack(feats), np.stack(states)], axis=1)
    y = np.stack(targets)

    n_hold = probe_cfg.holdout_scenes
    x_train, x_hold = x[:-n_hold], x[-n_hold:]
    y_train, y_hold = y[:-n_hold], y[-n_hold:]

    # standardize inputs on the training split only
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd < 1e-8] = 1.0
    x_train = (x_train - mu) / sd
    x_hold = (x_hold - mu) / sd

    rng = np.random.default_rng([_K_PROBE, probe_cfg.seed, 1])
    head = {
        "w1": ad.parameter(rng.normal(0.0, 0.1, size=(x.shape[1], probe_cfg.hidden)),
                           dtype=np.float64),
        "b1": ad.parameter(np.zeros(probe_cfg.hidden), dtype=np.float64),
        "w2": ad.parameter(rng.normal(0.0, 0.1, size=(probe_cfg.hidden, y.shape[1])),
                           dtype=np.float64),
        "b2": ad.parameter(np.zeros(y.shape[1]), dtype=np.float64),
    }
    opt = AdamW(head, lr=probe_cfg.learning_rate, weight_decay=probe_cfg.weight_decay)

    def forward(inputs: np.ndarray) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(Tensor(inputs), head["w1"]), head["b1"]))
        return ad.add(ad.matmul(h, head["w2"]), head["b2"])

    for _ in range(probe_cfg.steps):
        ad.zero_grads(head)
        pred = forward(x_train)
        err = ad.sub(pred, Tensor(y_train))
        loss = ad.reduce_mean(ad.mul(err, err))
        loss.backward()
        opt.step()

    def position_mse(inputs, labels):
        with ad.no_grad():
            pred = forward(inputs).data
        return float(np.mean((pred[:, :3] - labels[:, :3]) ** 2))

    with ad.no_grad():
        pred_hold = forward(x_hold).data
    yaw_pred = np.arctan2(pred_hold[:, 3], pred_hold[:, 4])
    yaw_true = np.arctan2(y_hold[:, 3], y_hold[:, 4])
    yaw_err = float(np.mean(np.abs(_wrap_angle(yaw_pred - yaw_true))))

    return ProbeReport(
        arm=arm,
        mse_position=position_mse(x_hold, y_hold),
        mse_position_train=position_mse(x_train, y_train),
        yaw_error=yaw_err,
        n_train=len(x_train),
        n_heldout=n_hold,
    )


def embed_scene_views(model: Model, sample: SceneSample, cfg: TrainConfig,
                      view_indices, seed: int) -> np.ndarray:
    """Unit-norm scene embedding using only the given view subset.

    The resampling rng is keyed by the subset itself, so equal subsets give
    bitwise-equal embeddings (identical A/B subsets retrieve perfectly)."""
    subset_tag = sum(1 << int(i) for i in view_indices)
    rng = _rng(seed, _K_SHIFT, sample.scene_id, subset_tag)
    subset = [sample.view_set().views[i] for i in view_indices]
    views = ViewSet(tuple(subset))
    cloud, _ = fuse_random_views(views, rng, FusionPolicy(fixed_k=len(subset)))
    patches = _tokenize(cloud, cfg, rng)
    with ad.no_grad():
        emb = model.scene_embedding(patches.patches, patches.centers)
    return emb.data.astype(np.float64)


def view_shift_eval(samples: list[SceneSample], model: Model, cfg: TrainConfig,
                    gallery_size: int = 16, seed: int = 0,
                    subset_a=None, subset_b=None) -> dict:
    """Disjoint-view scene retrieval: embed each scene from view subset A
    and retrieve it from the gallery of subset-B embeddings (top-1)."""
    if len(samples) < gallery_size:
        raise ConfigError(f"need {gallery_size} scenes for the gallery, got {len(samples)}")
    scenes = samples[:gallery_size]
    v = scenes[0].n_views
    if v < 2:
        raise ConfigError("view-shift evaluation needs at least two views per scene")
    if subset_a is None or subset_b is None:
        half = (v + 1) // 2
        subset_a = list(range(half))
        subset_b = list(range(half, v))
    a = np.stack([embed_scene_views(model, s, cfg, subset_a, seed) for s in scenes])
    b = np.stack([embed_scene_views(model, s, cfg, subset_b, seed) for s in scenes])
    sims = a @ b.T
    hits = np.argmax(sims, axis=1) == np.arange(gallery_size)
    return {
        "gallery_size": gallery_size,
        "subset_a": list(map(int, subset_a)),
        "subset_b": list(map(int, subset_b)),
        "top1_accuracy": float(hits.mean()),
    }


def eval_masked_chamfer(samples: list[SceneSample], model: Model, cfg: TrainConfig,
                        seed: int = 0) -> float:
    """Mean masked-patch reconstruction error over the given scenes under a
    fixed evaluation seed (full fusion, seeded mask)."""
    values = []
    for sample in samples:
        rng = _rng(seed, _K_EVAL, sample.scene_id)
        views = sample.view_set()
        cloud, _ = fuse_random_views(views, rng, FusionPolicy(fixed_k=len(views)))
        patches = _tokenize(cloud, cfg, rng)
        mask = sample_mask(cfg.patch.n, cfg.patch.mask_ratio_range, rng)
        visible, ground_truth = split(patches, mask)
        with ad.no_grad():
            tokens, pos = model.embed_tokens(visible.patches, visible.centers)
            feats = model.encode(tokens, pos)
            predicted = model.decode_masked(feats, mask, patches.centers)
            values.append(float(chamfer_l2(predicted, ground_truth.patches).data))
    return float(np.mean(values))


def retrieval_eval(samples: list[SceneSample], model: Model, cfg: TrainConfig,
                   batch_size: int = 16, seed: int = 0, rounds: int = 5,
                   draws: int = 4) -> float:
    """In-batch point-to-image retrieval over held-out scenes.

    Each scene's point embedding is the renormalized mean over ``draws``
    seeded resampling draws of the fully fused cloud (averaging out
    downsampling/FPS noise); the image side is one seeded rendered view's
    teacher embedding.  Accuracy is averaged over ``rounds`` seeded
    partitions into batches to tame partition variance.
    """
    if len(samples) < batch_size:
        raise ConfigError(f"need at least {batch_size} scenes, got {len(samples)}")
    embs = []
    teachers = []
    for sample in samples:
        acc = np.zeros(cfg.model.teacher_dim)
        for draw in range(draws):
            rng = _rng(seed, _K_RETRIEVAL, 1, sample.scene_id, draw)
            views = sample.view_set()
            cloud, _ = fuse_random_views(views, rng, FusionPolicy(fixed_k=len(views)))
            patches = _tokenize(cloud, cfg, rng)
            with ad.no_grad():
                acc = acc + model.scene_embedding(patches.patches,
                                                  patches.centers).data.astype(np.float64)
        embs.append(acc / np.linalg.norm(acc))
        pick = int(_rng(seed, _K_RETRIEVAL, 1, sample.scene_id).integers(sample.n_views))
        teachers.append(sample.teacher_image[pick])
    embs = np.stack(embs)
    teachers = np.stack(teachers)
    accs = []
    for round_id in range(rounds):
        order = _rng(seed, _K_RETRIEVAL, 2, round_id).permutation(len(samples))
        for start in range(0, len(samples) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            accs.append(retrieval_top1(embs[idx], teachers[idx]))
    return float(np.mean(accs))


def export_features(samples: list[SceneSample], model: Model, cfg: TrainConfig,
                    out_dir, seed: int = 0) -> list[Path]:
    """Write per-scene features: raw float32 blobs plus a JSON sidecar
    describing shapes and offsets."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sample in samples:
        _, patches = scene_features(model, sample, cfg, _K_EVAL, seed)
        with ad.no_grad():
            feats = model.encode_patches(patches.patches, patches.centers)
            pooled = model.pool(feats)
            emb = model.project(pooled)
        blobs = [("pooled", np.asarray(pooled.data, dtype="<f4")),
                 ("patch_features", np.asarray(feats.data, dtype="<f4")),
                 ("embedding", np.asarray(emb.data, dtype="<f4"))]
        sidecar = {}
        offset = 0
        payload = b""
        for name, arr in blobs:
            arr = np.ascontiguousarray(arr)
            sidecar[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset}
            payload += arr.tobytes()
            offset += arr.nbytes
        base = out / f"scene_{sample.scene_id:06d}"
        base.with_suffix(".bin").write_bytes(payload)
        base.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        written.append(base.with_suffix(".bin"))
    return written
