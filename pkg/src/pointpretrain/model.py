"""Patch-token transformer with a masked-patch decoder and a projection
head onto the teacher embedding space.

The encoder runs twice per training sample with shared weights: once over
visible tokens for the reconstruction branch, once over all tokens for
the alignment branch.  The decoder sees visible features plus a shared
learnable mask token, re-injecting the full set of positional embeddings
in front of every block, and a linear head maps each masked slot back to
its k_nn center-relative points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .patching import MaskSpec


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    encoder_depth: int = 3
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    teacher_dim: int = 32
    n_patches: int = 32
    k_nn: int = 16
    pooling: str = "max_mean"   # or "mean"
    # 0 keeps the plain linear projection onto the teacher space; a positive
    # value inserts one hidden layer of that width
    projection_hidden: int = 0
    # desk-scale scenes measure centimeters; these bring raw coordinates to
    # O(1) so first-layer activations are not vanishingly small
    patch_coord_scale: float = 20.0
    center_coord_scale: float = 3.0

    def __post_init__(self):
        for name in ("embed_dim", "num_heads", "teacher_dim", "n_patches", "k_nn"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            raise ModelConfigError("block depths cannot be negative")
        if self.embed_dim % self.num_heads != 0:
            raise ModelConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.pooling not in ("max_mean", "mean"):
            raise ModelConfigError(f"unknown pooling mode {self.pooling!r}")


def _init_params(cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    d = cfg.embed_dim
    hidden = int(round(cfg.mlp_ratio * d))
    p: dict[str, Tensor] = {}

    def normal(name, shape, scale=0.02):
        p[name] = ad.parameter(rng.normal(0.0, scale, size=shape), dtype=dtype)

    def xavier(name, shape):
        # fan-aware scale for layers outside the pre-norm residual stream
        normal(name, shape, scale=np.sqrt(2.0 / (shape[0] + shape[1])))

    def zeros(name, shape):
        p[name] = ad.parameter(np.zeros(shape), dtype=dtype)

    def ones(name, shape):
        p[name] = ad.parameter(np.ones(shape), dtype=dtype)

    xavier("embed.w1", (3, d))
    zeros("embed.b1", (d,))
    xavier("embed.w2", (2 * d, d))
    zeros("embed.b2", (d,))
    xavier("pos.w1", (3, d))
    zeros("pos.b1", (d,))
    xavier("pos.w2", (d, d))
    zeros("pos.b2", (d,))

    def blocks(prefix, depth):
        for i in range(depth):
            base = f"{prefix}.{i}"
            ones(f"{base}.ln1.g", (d,))
            zeros(f"{base}.ln1.b", (d,))
            for nm in ("wq", "wk", "wv", "wo"):
                normal(f"{base}.attn.{nm}", (d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                zeros(f"{base}.attn.{nm}", (d,))
            ones(f"{base}.ln2.g", (d,))
            zeros(f"{base}.ln2.b", (d,))
            normal(f"{base}.mlp.w1", (d, hidden))
            zeros(f"{base}.mlp.b1", (hidden,))
            normal(f"{base}.mlp.w2", (hidden, d))
            zeros(f"{base}.mlp.b2", (d,))
        if depth > 0:
            ones(f"{prefix}.ln_f.g", (d,))
            zeros(f"{prefix}.ln_f.b", (d,))

    blocks("enc", cfg.encoder_depth)
    blocks("dec", cfg.decoder_depth)

    normal("mask_token", (d,))
    xavier("recon.w", (d, cfg.k_nn * 3))
    zeros("recon.b", (cfg.k_nn * 3,))
    if cfg.pooling == "max_mean":
        xavier("pool.w", (2 * d, d))
        zeros("pool.b", (d,))
    if cfg.projection_hidden > 0:
        xavier("proj.w1", (d, cfg.projection_hidden))
        zeros("proj.b1", (cfg.projection_hidden,))
        xavier("proj.w2", (cfg.projection_hidden, cfg.teacher_dim))
        zeros("proj.b2", (cfg.teacher_dim,))
    else:
        xavier("proj.w", (d, cfg.teacher_dim))
        zeros("proj.b", (cfg.teacher_dim,))
    p["log_tau"] = ad.parameter(np.log(0.07), dtype=dtype)
    return p


class Model:
    """Bundles a config with its parameter store; all methods are pure
    functions of the parameters and build autodiff graphs."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.dtype = params["embed.w1"].dtype

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(config, _init_params(config, rng, dtype))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _const(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def embed_tokens(self, patches: np.ndarray, centers: np.ndarray) -> tuple[Tensor, Tensor]:
        """Map center-relative patches to tokens and centers to positional
        embeddings.  Tokens are order-invariant within a patch (max-pool
        over points); position enters only through the center embedding.
        """
        patches = np.asarray(patches)
        centers = np.asarray(centers)
        k = self.config.k_nn
        if patches.ndim != 3 or patches.shape[1:] != (k, 3):
            raise ModelConfigError(
                f"patches must be (n, {k}, 3) for this config, got {patches.shape}"
            )
        if centers.shape != (patches.shape[0], 3):
            raise ModelConfigError(
                f"centers {centers.shape} do not match patches {patches.shape}"
            )
        p = self.params
        x = self._const(patches * self.config.patch_coord_scale)
        h = ad.gelu(ad.add(ad.matmul(x, p["embed.w1"]), p["embed.b1"]))       # (n, k, d)
        g = ad.reduce_max(h, axis=1, keepdims=True)                            # (n, 1, d)
        hg = ad.concat([h, ad.broadcast_to(g, h.shape)], axis=2)               # (n, k, 2d)
        h2 = ad.gelu(ad.add(ad.matmul(hg, p["embed.w2"]), p["embed.b2"]))      # (n, k, d)
        tokens = ad.reduce_max(h2, axis=1)                                     # (n, d)
        return tokens, self.pos_embed(centers)

    def pos_embed(self, centers: np.ndarray) -> Tensor:
        p = self.params
        c = self._const(np.asarray(centers) * self.config.center_coord_scale)
        h = ad.gelu(ad.add(ad.matmul(c, p["pos.w1"]), p["pos.b1"]))
        return ad.add(ad.matmul(h, p["pos.w2"]), p["pos.b2"])

    def _attention(self, x: Tensor, base: str) -> Tensor:
        p = self.params
        d = self.config.embed_dim
        heads = self.config.num_heads
        dh = d // heads
        s = x.shape[0]

        def proj(nm):
            y = ad.add(ad.matmul(x, p[f"{base}.attn.w{nm}"]), p[f"{base}.attn.b{nm}"])
            return ad.transpose(ad.reshape(y, (s, heads, dh)), (1, 0, 2))      # (H, s, dh)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.transpose(ad.matmul(attn, v), (1, 0, 2))                    # (s, H, dh)
        out = ad.reshape(mixed, (s, d))
        return ad.add(ad.matmul(out, p[f"{base}.attn.wo"]), p[f"{base}.attn.bo"])

    def _block(self, x: Tensor, base: str) -> Tensor:
        p = self.params
        h = ad.layer_norm(x, p[f"{base}.ln1.g"], p[f"{base}.ln1.b"])
        x = ad.add(x, self._attention(h, base))
        h = ad.layer_norm(x, p[f"{base}.ln2.g"], p[f"{base}.ln2.b"])
        mlp = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, p[f"{base}.mlp.w1"]),
                                              p[f"{base}.mlp.b1"])),
                               p[f"{base}.mlp.w2"]), p[f"{base}.mlp.b2"])
        return ad.add(x, mlp)

    def encode(self, tokens: Tensor, pos: Tensor) -> Tensor:
        """Pre-norm transformer over tokens + positional embeddings; output
        keeps the input token shape.  Depth 0 is the identity path."""
        if tokens.shape != pos.shape:
            raise ModelConfigError(f"tokens {tokens.shape} do not match pos {pos.shape}")
        x = ad.add(tokens, pos)
        depth = self.config.encoder_depth
        for i in range(depth):
            x = self._block(x, f"enc.{i}")
        if depth > 0:
            x = ad.layer_norm(x, self.params["enc.ln_f.g"], self.params["enc.ln_f.b"])
        return x

    def decode_masked(self, visible_features: Tensor, mask: MaskSpec,
                      centers_all: np.ndarray, visible_order=None) -> Tensor:
        """Reconstruct masked patches from visible features + mask tokens.

        ``visible_order`` gives the patch index of each visible-feature row
        (defaults to the mask's sorted visible indices); rows may arrive in
        any order since slots are reassembled by original patch index.
        Returns (n_masked, k_nn, 3) center-relative point predictions.
        """
        cfg = self.config
        p = self.params
        vis = np.asarray(mask.visible_indices if visible_order is None else visible_order,
                         dtype=np.int64)
        n = mask.n
        if visible_features.shape[0] != len(vis):
            raise ModelConfigError(
                f"{visible_features.shape[0]} visible features for {len(vis)} visible slots"
            )
        if sorted(vis.tolist()) != mask.visible_indices.tolist():
            raise ModelConfigError("visible_order must be a permutation of the visible indices")
        centers_all = np.asarray(centers_all)
        if centers_all.shape != (n, 3):
            raise ModelConfigError(f"need centers for all {n} patches, got {centers_all.shape}")

        n_masked = mask.n_masked
        mask_rows = ad.broadcast_to(ad.reshape(p["mask_token"], (1, cfg.embed_dim)),
                                    (n_masked, cfg.embed_dim))
        stacked = ad.concat([visible_features, mask_rows], axis=0)
        slot_of = np.empty(n, dtype=np.int64)
        slot_of[vis] = np.arange(len(vis))
        slot_of[mask.masked_indices] = len(vis) + np.arange(n_masked)
        x = ad.take(stacked, slot_of)

        pos = self.pos_embed(centers_all)
        depth = cfg.decoder_depth
        for i in range(depth):
            x = self._block(ad.add(x, pos), f"dec.{i}")
        if depth > 0:
            x = ad.layer_norm(x, p["dec.ln_f.g"], p["dec.ln_f.b"])
        masked_feats = ad.take(x, mask.masked_indices)
        flat = self._lin(masked_feats, "recon")
        return ad.reshape(flat, (n_masked, cfg.k_nn, 3))

    def pool(self, features: Tensor) -> Tensor:
        """Order-invariant global feature of shape (embed_dim,)."""
        if self.config.pooling == "mean":
            return ad.reduce_mean(features, axis=0)
        mx = ad.reduce_max(features, axis=0)
        mn = ad.reduce_mean(features, axis=0)
        both = ad.reshape(ad.concat([mx, mn], axis=0), (1, 2 * self.config.embed_dim))
        return ad.reshape(self._lin(both, "pool"), (self.config.embed_dim,))

    def project(self, pooled: Tensor) -> Tensor:
        """Unit-norm embedding in the teacher space."""
        row = ad.reshape(pooled, (1, self.config.embed_dim))
        if self.config.projection_hidden > 0:
            p = self.params
            hid = ad.gelu(ad.add(ad.matmul(row, p["proj.w1"]), p["proj.b1"]))
            out = ad.add(ad.matmul(hid, p["proj.w2"]), p["proj.b2"])
        else:
            out = self._lin(row, "proj")
        return ad.reshape(ad.l2_normalize(out, axis=-1), (self.config.teacher_dim,))

    def encode_patches(self, patches: np.ndarray, centers: np.ndarray) -> Tensor:
        tokens, pos = self.embed_tokens(patches, centers)
        return self.encode(tokens, pos)

    def scene_embedding(self, patches: np.ndarray, centers: np.ndarray) -> Tensor:
        return self.project(self.pool(self.encode_patches(patches, centers)))

    def tau(self) -> Tensor:
        return ad.exp(self.params["log_tau"])
