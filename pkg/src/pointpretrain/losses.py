"""Reconstruction and cross-modal alignment losses.

The reconstruction term is a squared-distance (l2) Chamfer distance
between predicted and ground-truth masked patches.  Alignment of point
embeddings with precomputed image/text teacher embeddings uses a
temperature-scaled contrastive score; the default "exclusive" mode drops
the positive pair from the denominator (so the score is unbounded above
as alignment sharpens), while "inclusive" is the conventional InfoNCE
denominator that keeps it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNIT_NORM_TOL = 1e-6
_NEG_FILL = -1e30


class LossInputError(ValueError):
    """Loss inputs violate a precondition (shape, norm, batch size)."""


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined objective: alpha * reconstruction +
    beta * point-image alignment + gamma * point-text alignment."""

    alpha: float = 1.5
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise LossInputError(f"loss weight {name}={v} must be finite and >= 0")


@dataclass(frozen=True)
class LossReport:
    """Per-step scalars plus in-batch alignment diagnostics."""

    recon: float
    con_image: float
    con_text: float
    total: float
    tau: float
    retrieval_top1: float | None = None
    mean_positive_sim: float | None = None

    def as_dict(self) -> dict:
        return {
            "recon": self.recon,
            "con_image": self.con_image,
            "con_text": self.con_text,
            "total": self.total,
            "tau": self.tau,
            "retrieval_top1": self.retrieval_top1,
            "mean_positive_sim": self.mean_positive_sim,
        }


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def chamfer_l2(pred, target) -> Tensor:
    """Symmetric squared-distance Chamfer between per-patch point sets.

    Inputs are (M, p, 3) and (M, q, 3); for each patch the mean squared
    distance of every point to its nearest neighbor in the other set is
    taken in both directions, then averaged over patches.  Gradient flows
    only to each argmin pair (lowest index on ties).
    """
    a = _as_tensor(pred)
    b = _as_tensor(target)
    if a.ndim != 3 or b.ndim != 3 or a.shape[2] != 3 or b.shape[2] != 3:
        raise LossInputError(f"expected (M, p, 3) point sets, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise LossInputError(f"patch counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0 or a.shape[1] == 0 or b.shape[1] == 0:
        raise LossInputError("chamfer distance of an empty point set is undefined")
    m, p, _ = a.shape
    q = b.shape[1]
    diff = ad.sub(ad.reshape(a, (m, p, 1, 3)), ad.reshape(b, (m, 1, q, 3)))
    d2 = ad.reduce_sum(ad.mul(diff, diff), axis=3)
    fwd = ad.reduce_mean(ad.reduce_min(d2, axis=2))
    bwd = ad.reduce_min(d2, axis=1)
    return ad.add(fwd, ad.reduce_mean(bwd))


def _check_unit_rows(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    worst = np.abs(norms - 1.0).max() if norms.size else 0.0
    if worst > UNIT_NORM_TOL:
        raise LossInputError(f"{name} rows must be unit-norm (worst deviation {worst:.3e})")


def similarity_scores(u, v, tau, mode: str = "exclusive") -> Tensor:
    """Per-row alignment score of u[i] against the batch of v rows.

    score_i = u_i . v_i / tau  -  logsumexp_j(u_i . v_j / tau), where the
    sum runs over j != i in "exclusive" mode and over all j in "inclusive"
    mode.  Rows must be unit-norm; tau may be a learnable scalar Tensor.
    """
    u = _as_tensor(u)
    v = _as_tensor(v)
    if u.shape != v.shape or u.ndim != 2:
        raise LossInputError(f"embedding batches must share shape (B, d), got {u.shape} and {v.shape}")
    if mode not in ("exclusive", "inclusive"):
        raise LossInputError(f"unknown similarity mode {mode!r}")
    b = u.shape[0]
    if mode == "exclusive" and b < 2:
        raise LossInputError("exclusive mode needs a batch of at least 2 (empty denominator)")
    _check_unit_rows(u.data, "u")
    _check_unit_rows(v.data, "v")

    tau_t = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=u.dtype))
    logits = ad.div(ad.matmul(u, ad.transpose(v)), tau_t)
    diag = ad.take(ad.reshape(logits, (b * b,)), np.arange(b) * (b + 1))
    if mode == "exclusive":
        mask = np.zeros((b, b), dtype=logits.dtype)
        np.fill_diagonal(mask, _NEG_FILL)
        logits = ad.add(logits, mask)
    return ad.sub(diag, ad.logsumexp(logits, axis=1))


def contrastive_alignment(point_emb, teacher_emb, tau, mode: str = "exclusive",
                          reduction: str = "mean") -> Tensor:
    """Symmetric contrastive loss between point and teacher embeddings.

    Matching row indices are the positive pairs.  The reduction over the
    batch defaults to the mean so the magnitude is batch-size independent;
    "sum" reduces literally.
    """
    point_emb = _as_tensor(point_emb)
    teacher_emb = _as_tensor(teacher_emb)
    if point_emb.shape != teacher_emb.shape:
        raise LossInputError(
            f"point embeddings {point_emb.shape} do not match teacher {teacher_emb.shape}"
        )
    if reduction not in ("mean", "sum"):
        raise LossInputError(f"unknown reduction {reduction!r}")
    red = ad.reduce_mean if reduction == "mean" else ad.reduce_sum
    fwd = red(similarity_scores(point_emb, teacher_emb, tau, mode))
    bwd = red(similarity_scores(teacher_emb, point_emb, tau, mode))
    return ad.mul(ad.add(fwd, bwd), -0.5)


def total_loss(recon, con_image, con_text, weights: LossWeights) -> Tensor:
    """Weighted sum of the three objective components."""
    terms = []
    for w, term in ((weights.alpha, recon), (weights.beta, con_image), (weights.gamma, con_text)):
        terms.append(ad.mul(_as_scalar(term), w))
    return ad.add(ad.add(terms[0], terms[1]), terms[2])


def _as_scalar(x) -> Tensor:
    t = _as_tensor(x)
    if t.size != 1:
        raise LossInputError(f"loss component must be scalar, got shape {t.shape}")
    return t


def retrieval_top1(point_emb: np.ndarray, teacher_emb: np.ndarray) -> float:
    """Fraction of rows whose most similar teacher row is their own index."""
    p = np.asarray(point_emb, dtype=np.float64)
    t = np.asarray(teacher_emb, dtype=np.float64)
    sims = p @ t.T
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(p.shape[0])))


def mean_positive_similarity(point_emb: np.ndarray, teacher_emb: np.ndarray) -> float:
    p = np.asarray(point_emb, dtype=np.float64)
    t = np.asarray(teacher_emb, dtype=np.float64)
    return float(np.mean(np.sum(p * t, axis=1)))
