"""Columnar vision transformer that accepts any input size divisible by the
patch size.

The forward pass can take several resolution groups at once and packs all
token rows into one matrix so that every linear layer runs as a single gemm;
only the attention core is evaluated per group. Group results are identical
to running the groups one by one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ConfigError, DataError
from .optim import ParameterSet, trunc_normal
from .posembed import PositionalEmbedding, lpe_apply
from .tensor import Tensor


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 4
    pe: str = "glpe"
    pe_ref_grid: Optional[tuple[int, int]] = None
    pe_grids: Optional[list[tuple[int, int]]] = None

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.embed_dim % 4 != 0:
            raise ConfigError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        if self.patch_size < 1 or self.depth < 1 or self.n_classes < 1:
            raise ConfigError("patch_size, depth and n_classes must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "n_heads": self.n_heads,
            "mlp_ratio": self.mlp_ratio,
            "n_classes": self.n_classes,
            "pe": self.pe,
            "pe_ref_grid": list(self.pe_ref_grid) if self.pe_ref_grid else None,
            "pe_grids": [list(g) for g in self.pe_grids] if self.pe_grids else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            patch_size=int(d["patch_size"]),
            embed_dim=int(d["embed_dim"]),
            depth=int(d["depth"]),
            n_heads=int(d["n_heads"]),
            mlp_ratio=float(d["mlp_ratio"]),
            n_classes=int(d["n_classes"]),
            pe=d.get("pe", "glpe"),
            pe_ref_grid=tuple(d["pe_ref_grid"]) if d.get("pe_ref_grid") else None,
            pe_grids=[tuple(g) for g in d["pe_grids"]] if d.get("pe_grids") else None,
        )


@dataclass
class TokenSequence:
    """Class token plus image tokens, with the grid they came from."""

    tokens: Tensor  # [B, n_h*n_w + 1, D]
    grid: tuple[int, int]

    def __post_init__(self):
        n_h, n_w = self.grid
        if self.tokens.shape[1] != n_h * n_w + 1:
            raise ConfigError(
                f"token count {self.tokens.shape[1]} does not match grid "
                f"{n_h}x{n_w} plus class token"
            )


class _Block:
    """Parameter bundle for one attention + MLP block."""

    def __init__(self):
        self.ln1_g = self.ln1_b = None
        self.qkv_w = self.qkv_b = None
        self.proj_w = self.proj_b = None
        self.lpe_kernel = None
        self.ln2_g = self.ln2_b = None
        self.fc1_w = self.fc1_b = None
        self.fc2_w = self.fc2_b = None


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def patchify(images: np.ndarray, patch: int) -> tuple[np.ndarray, tuple[int, int]]:
    """[B, 3, H, W] -> ([B, N, 3*patch*patch], (n_h, n_w)); errors when H or W
    is not divisible by the patch size."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise DataError(
            f"input {h}x{w} not divisible by patch size {patch}; "
            f"both sides must be multiples of {patch}"
        )
    n_h, n_w = h // patch, w // patch
    x = images.reshape(b, c, n_h, patch, n_w, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, n_h * n_w, c * patch * patch)
    return np.ascontiguousarray(x), (n_h, n_w)


class VisionTransformer:
    """DeiT-style pre-norm ViT with pluggable positional embeddings."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        d = cfg.embed_dim
        std = 0.02

        self.pe = PositionalEmbedding(
            cfg.pe,
            d,
            reference_grid=cfg.pe_ref_grid,
            grids=cfg.pe_grids,
            rng=rng,
            dtype=dtype,
        )
        for name, p in sorted(self.pe.params.items()):
            self.params.add(f"pe.{name}", p)

        def param(name, data):
            return self.params.add(name, Tensor(data, requires_grad=True))

        self.cls_token = param("cls", trunc_normal((1, 1, d), std, rng, dtype))
        in_dim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_w = param("patch.w", trunc_normal((in_dim, d), std, rng, dtype))
        self.patch_b = param("patch.b", np.zeros(d, dtype=dtype))

        hidden = int(round(cfg.mlp_ratio * d))
        self.blocks: list[_Block] = []
        for i in range(cfg.depth):
            blk = _Block()
            pre = f"blocks.{i}"
            blk.ln1_g = param(f"{pre}.ln1.g", np.ones(d, dtype=dtype))
            blk.ln1_b = param(f"{pre}.ln1.b", np.zeros(d, dtype=dtype))
            blk.qkv_w = param(f"{pre}.qkv.w", trunc_normal((d, 3 * d), std, rng, dtype))
            blk.qkv_b = param(f"{pre}.qkv.b", np.zeros(3 * d, dtype=dtype))
            blk.proj_w = param(f"{pre}.proj.w", trunc_normal((d, d), std, rng, dtype))
            blk.proj_b = param(f"{pre}.proj.b", np.zeros(d, dtype=dtype))
            if self.pe.lpe_enabled:
                blk.lpe_kernel = param(
                    f"{pre}.lpe_kernel",
                    rng.normal(0.0, std, size=(d, 3, 3)).astype(dtype),
                )
            blk.ln2_g = param(f"{pre}.ln2.g", np.ones(d, dtype=dtype))
            blk.ln2_b = param(f"{pre}.ln2.b", np.zeros(d, dtype=dtype))
            blk.fc1_w = param(f"{pre}.fc1.w", trunc_normal((d, hidden), std, rng, dtype))
            blk.fc1_b = param(f"{pre}.fc1.b", np.zeros(hidden, dtype=dtype))
            blk.fc2_w = param(f"{pre}.fc2.w", trunc_normal((hidden, d), std, rng, dtype))
            blk.fc2_b = param(f"{pre}.fc2.b", np.zeros(d, dtype=dtype))
            self.blocks.append(blk)

        self.ln_f_g = param("final_ln.g", np.ones(d, dtype=dtype))
        self.ln_f_b = param("final_ln.b", np.zeros(d, dtype=dtype))
        self.head_w = param("head.w", trunc_normal((d, cfg.n_classes), std, rng, dtype))
        self.head_b = param("head.b", np.zeros(cfg.n_classes, dtype=dtype))

    # embedding -------------------------------------------------------------

    def _embed_group(self, images: np.ndarray) -> tuple[Tensor, tuple[int, int]]:
        cfg = self.cfg
        patches, grid = patchify(np.asarray(images, dtype=self.dtype), cfg.patch_size)
        b, n, _ = patches.shape
        tok = _linear(Tensor(patches.reshape(b * n, -1)), self.patch_w, self.patch_b)
        tok = tok.reshape(b, n, cfg.embed_dim)
        cls = T.broadcast_to(self.cls_token, (b, 1, cfg.embed_dim))
        tok = T.concat([cls, tok], axis=1)
        if self.pe.additive != "none":
            tok = T.add(tok, self.pe.produce(grid))
        return tok, grid

    def patch_embed(self, images: np.ndarray) -> TokenSequence:
        """Patchify + project + class token + positional embedding."""
        tok, grid = self._embed_group(images)
        return TokenSequence(tok, grid)

    # blocks ------------------------------------------------------------------

    def _attention(self, packed: Tensor, metas: list[dict], blk: _Block) -> Tensor:
        cfg = self.cfg
        d, h, dh = cfg.embed_dim, cfg.n_heads, cfg.head_dim
        xn = T.layernorm(packed, blk.ln1_g, blk.ln1_b)
        qkv = _linear(xn, blk.qkv_w, blk.qkv_b)  # [R, 3D]
        inv_sqrt_d = 1.0 / math.sqrt(d)
        outs = []
        for meta in metas:
            b, n1, grid = meta["b"], meta["n1"], meta["grid"]
            sl = qkv[meta["off"] : meta["off"] + b * n1]
            sl = sl.reshape(b, n1, 3, h, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = sl[0], sl[1], sl[2]  # [b, h, n1, dh]
            scores = T.matmul(q * inv_sqrt_d, k.transpose(0, 1, 3, 2))
            attn = T.softmax(scores, axis=-1)
            z = T.matmul(attn, v)  # [b, h, n1, dh]
            if blk.lpe_kernel is not None:
                n_h, n_w = grid
                v_sp = (
                    v[:, :, 1:, :]
                    .transpose(0, 1, 3, 2)
                    .reshape(b, h, dh, n_h, n_w)
                )
                pe = lpe_apply(v_sp, blk.lpe_kernel)
                pe = pe.reshape(b, h, dh, n1 - 1).transpose(0, 1, 3, 2)
                z = T.concat(
                    [z[:, :, :1, :], T.add(z[:, :, 1:, :], pe)], axis=2
                )
            z = z.transpose(0, 2, 1, 3).reshape(b * n1, d)
            outs.append(z)
        merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
        return T.add(packed, _linear(merged, blk.proj_w, blk.proj_b))

    def _mlp(self, packed: Tensor, blk: _Block) -> Tensor:
        xn = T.layernorm(packed, blk.ln2_g, blk.ln2_b)
        hidden = T.gelu(_linear(xn, blk.fc1_w, blk.fc1_b))
        return T.add(packed, _linear(hidden, blk.fc2_w, blk.fc2_b))

    # forward -----------------------------------------------------------------

    def forward_groups(
        self, group_images: Sequence[np.ndarray]
    ) -> tuple[list[Tensor], list[Tensor]]:
        """Forward every resolution group through the shared parameters.

        Returns per-group ``(logits [B, n_classes], class feature [B, D])``,
        the class feature being the final-layernorm output the head reads.
        """
        rows, metas, off = [], [], 0
        for images in group_images:
            tok, grid = self._embed_group(images)
            b, n1, d = tok.shape
            rows.append(tok.reshape(b * n1, d))
            metas.append({"off": off, "b": b, "n1": n1, "grid": grid})
            off += b * n1
        packed = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)

        for blk in self.blocks:
            packed = self._attention(packed, metas, blk)
            packed = self._mlp(packed, blk)
        packed = T.layernorm(packed, self.ln_f_g, self.ln_f_b)

        cls_feats = [
            packed[m["off"] : m["off"] + m["b"] * m["n1"] : m["n1"]] for m in metas
        ]
        cls_all = cls_feats[0] if len(cls_feats) == 1 else T.concat(cls_feats, axis=0)
        logits_all = _linear(cls_all, self.head_w, self.head_b)
        logits, start = [], 0
        for m in metas:
            logits.append(logits_all[start : start + m["b"]])
            start += m["b"]
        return logits, cls_feats

    def forward(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """Single-resolution forward: (logits, class feature)."""
        logits, cls_feats = self.forward_groups([images])
        return logits[0], cls_feats[0]

    # persistence ---------------------------------------------------------------

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        """Replace all parameters from a name->array map, validating the sets
        and shapes match exactly."""
        own = dict(self.params.items())
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise CompatibilityError(
                f"parameter sets differ; missing from checkpoint: {missing}, "
                f"unexpected in checkpoint: {extra}"
            )
        for name, p in own.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CompatibilityError(
                    f"tensor '{name}' has shape {list(arr.shape)}, "
                    f"model expects {list(p.shape)}"
                )
            p.data = np.asarray(arr, dtype=self.dtype).copy()
