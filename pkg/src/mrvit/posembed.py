"""Positional-embedding strategies for variable-resolution transformers.

Five flavors:

* learned absolute table, bicubic-resized to the query grid ("ape");
* learned absolute tables, one per training grid, failing on unseen grids
  ("ape_multi");
* normalized 2-d sine-cosine, generated on the fly for any grid ("sincos");
* the sine-cosine grid refined by a learned depthwise conv, residual form
  ("gpe");
* a per-head depthwise conv over the spatially reshaped attention values,
  added inside attention blocks ("lpe"); "glpe" is gpe + lpe.

Every additive embedding is produced as ``(N_H*N_W + 1, D)`` rows with the
class-token row first; conv-based kinds give the class token an exactly zero
row.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ResolutionError, ShapeError
from .ioutil import atomic_write_bytes, atomic_write_text
from .tensor import Tensor

KINDS = ("ape", "ape_multi", "sincos", "gpe", "lpe", "glpe", "none")

# additive part / lpe flag per config name
_ADDITIVE = {
    "ape": "learned",
    "ape_multi": "learned_multi",
    "sincos": "sincos",
    "gpe": "gpe",
    "lpe": "none",
    "glpe": "gpe",
    "none": "none",
}
_LPE = {"lpe": True, "glpe": True}


@dataclass(frozen=True)
class SinCosConfig:
    """Parameters of the normalized sine-cosine mapping."""

    embed_dim: int
    temperature: float = 10000.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.embed_dim % 4 != 0:
            raise ConfigError(
                f"sine-cosine embedding needs embed_dim % 4 == 0, got {self.embed_dim}"
            )


_sincos_cache: dict[tuple, np.ndarray] = {}


def sincos_grid(n_h: int, n_w: int, cfg: SinCosConfig, dtype=np.float32) -> np.ndarray:
    """Sine-cosine grid of shape [D, n_h, n_w].

    Channels below D/2 encode the row coordinate, the rest the column
    coordinate. Positions are normalized by the grid extent (pos / (N + eps)),
    so aligned fractional positions agree across resolutions. Even channels
    take sin, odd channels cos, with frequency 1 / T^(2*floor(d/2)*2/D).
    """
    if n_h < 1 or n_w < 1:
        raise ConfigError(f"grid must be at least 1x1, got {n_h}x{n_w}")
    key = (n_h, n_w, cfg.embed_dim, cfg.temperature, cfg.epsilon, np.dtype(dtype).str)
    cached = _sincos_cache.get(key)
    if cached is not None:
        return cached
    d = cfg.embed_dim
    ch = np.arange(d)
    inv_freq = cfg.temperature ** (-(4.0 * (ch // 2)) / d)  # [D]
    pos_m = np.arange(n_h) / (n_h + cfg.epsilon)  # [n_h]
    pos_n = np.arange(n_w) / (n_w + cfg.epsilon)  # [n_w]

    grid = np.empty((d, n_h, n_w), dtype=np.float64)
    half = d // 2
    row_phase = inv_freq[:half, None] * pos_m[None, :]  # [D/2, n_h]
    col_phase = inv_freq[half:, None] * pos_n[None, :]  # [D/2, n_w]
    even_row = (ch[:half] % 2 == 0)[:, None]
    even_col = (ch[half:] % 2 == 0)[:, None]
    row_vals = np.where(even_row, np.sin(row_phase), np.cos(row_phase))
    col_vals = np.where(even_col, np.sin(col_phase), np.cos(col_phase))
    grid[:half] = row_vals[:, :, None]
    grid[half:] = col_vals[:, None, :]
    grid = grid.astype(dtype)
    grid.flags.writeable = False
    _sincos_cache[key] = grid
    return grid


def _grid_to_rows(grid: Tensor) -> Tensor:
    """[D, n_h, n_w] -> [n_h*n_w, D], row-major token order."""
    d, n_h, n_w = grid.shape
    return grid.reshape(d, n_h * n_w).transpose(1, 0)


def _zero_cls_row(d: int, dtype) -> Tensor:
    return Tensor(np.zeros((1, d), dtype=dtype))


def gpe_forward(grid: Tensor, kernel: Tensor) -> Tensor:
    """Conv-conditioned global embedding: grid + DWConv(grid), flattened with
    an all-zero class-token row prepended.

    Residual form, so a zero kernel reproduces the plain sine-cosine rows.
    """
    refined = T.add(grid, T.depthwise_conv2d(grid, kernel))
    rows = _grid_to_rows(refined)
    return T.concat([_zero_cls_row(grid.shape[0], grid.dtype), rows], axis=0)


def sincos_rows(n_h: int, n_w: int, cfg: SinCosConfig, dtype=np.float32) -> Tensor:
    """Plain sine-cosine embedding rows with the zero class-token row."""
    grid = sincos_grid(n_h, n_w, cfg, dtype=dtype)
    rows = grid.reshape(cfg.embed_dim, n_h * n_w).T
    out = np.concatenate([np.zeros((1, cfg.embed_dim), dtype=dtype), rows], axis=0)
    return Tensor(out)


def learned_ape_produce(table: Tensor, n_h: int, n_w: int, cls_row: Tensor) -> Tensor:
    """Bicubic-resize a learned [D, refH, refW] table to the query grid and
    prepend the learned class-token row."""
    d, ref_h, ref_w = table.shape
    if (ref_h, ref_w) == (n_h, n_w):
        resized = table
    else:
        resized = T.bicubic_resize(table, n_h, n_w)
    return T.concat([cls_row, _grid_to_rows(resized)], axis=0)


def lpe_apply(v: Tensor, kernels: Tensor) -> Tensor:
    """Local positional embedding: per-head depthwise conv over the spatial
    value tensor ``[..., heads, D', n_h, n_w]`` with kernels
    ``[heads*D', 3, 3]``. Returns the same shape; the caller adds it to the
    attention output (class token excluded beforehand)."""
    if v.ndim < 4:
        raise ShapeError(f"lpe_apply expects [..., heads, D', H, W], got {list(v.shape)}")
    *lead, heads, dh, n_h, n_w = v.shape
    if kernels.shape[0] != heads * dh:
        raise ShapeError(
            f"kernel channels {kernels.shape[0]} != heads*head_dim {heads * dh}"
        )
    flat = v.reshape(*lead, heads * dh, n_h, n_w)
    out = T.depthwise_conv2d(flat, kernels)
    return out.reshape(*lead, heads, dh, n_h, n_w)


class PositionalEmbedding:
    """One positional-embedding strategy plus its learned state.

    ``produce(grid)`` returns the additive embedding rows for any grid, on the
    tape when learned parameters are involved. The "lpe" part only carries a
    flag here; its per-block kernels live with the attention blocks.
    """

    def __init__(
        self,
        kind: str,
        embed_dim: int,
        reference_grid: tuple[int, int] | None = None,
        grids: list[tuple[int, int]] | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if kind not in KINDS:
            raise ConfigError(f"unknown positional embedding kind '{kind}'")
        self.kind = kind
        self.additive = _ADDITIVE[kind]
        self.lpe_enabled = _LPE.get(kind, False)
        self.dim = embed_dim
        self.dtype = np.dtype(dtype)
        self.cfg = SinCosConfig(embed_dim)
        self.reference_grid = tuple(reference_grid) if reference_grid else None
        self.grids = [tuple(g) for g in grids] if grids else None
        self.params: dict[str, Tensor] = {}

        if self.additive == "gpe":
            self.params["gpe_kernel"] = Tensor(
                np.zeros((embed_dim, 3, 3), dtype=dtype), requires_grad=True
            )
        elif self.additive == "learned":
            if self.reference_grid is None:
                raise ConfigError("learned APE needs a reference grid")
            rh, rw = self.reference_grid
            self.params["ape_table"] = Tensor(
                rng.normal(0.0, 0.02, size=(embed_dim, rh, rw)).astype(dtype),
                requires_grad=True,
            )
            self.params["ape_cls"] = Tensor(
                rng.normal(0.0, 0.02, size=(1, embed_dim)).astype(dtype),
                requires_grad=True,
            )
        elif self.additive == "learned_multi":
            if not self.grids:
                raise ConfigError("per-resolution APE needs the list of training grids")
            for nh, nw in self.grids:
                self.params[f"ape_table_{nh}x{nw}"] = Tensor(
                    rng.normal(0.0, 0.02, size=(embed_dim, nh, nw)).astype(dtype),
                    requires_grad=True,
                )
            self.params["ape_cls"] = Tensor(
                rng.normal(0.0, 0.02, size=(1, embed_dim)).astype(dtype),
                requires_grad=True,
            )

    def produce(self, grid: tuple[int, int]) -> Tensor:
        """Embedding rows [n_h*n_w + 1, D] for the given token grid."""
        n_h, n_w = grid
        if self.additive == "none":
            return Tensor(np.zeros((n_h * n_w + 1, self.dim), dtype=self.dtype))
        if self.additive == "sincos":
            return sincos_rows(n_h, n_w, self.cfg, dtype=self.dtype)
        if self.additive == "gpe":
            base = Tensor(sincos_grid(n_h, n_w, self.cfg, dtype=self.dtype))
            return gpe_forward(base, self.params["gpe_kernel"])
        if self.additive == "learned":
            return learned_ape_produce(
                self.params["ape_table"], n_h, n_w, self.params["ape_cls"]
            )
        # learned_multi
        key = f"ape_table_{n_h}x{n_w}"
        if key not in self.params:
            raise ResolutionError(
                f"no positional table for grid {n_h}x{n_w}; "
                f"available: {sorted(k for k in self.params if k.startswith('ape_table'))}"
            )
        table = self.params[key]
        return T.concat([self.params["ape_cls"], _grid_to_rows(table)], axis=0)


def pe_token_mean_map(pe: PositionalEmbedding, grid: tuple[int, int]) -> np.ndarray:
    """Channel-mean of the image-token embedding, as a 2-d [n_h, n_w] map."""
    rows = pe.produce(grid).data[1:]
    return rows.mean(axis=1).reshape(grid)


def _pgm_bytes(map2d: np.ndarray) -> bytes:
    """8-bit binary PGM with per-map min-max normalization."""
    lo, hi = float(map2d.min()), float(map2d.max())
    if hi > lo:
        scaled = (map2d - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(map2d)
    pixels = np.round(scaled).astype(np.uint8)
    h, w = map2d.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def emit_pe_heatmap(
    pe: PositionalEmbedding,
    resolutions: list[int],
    patch_size: int,
    out_dir: str,
) -> list[str]:
    """Write one PGM + raw-value CSV pair per resolution; returns the paths."""
    if not resolutions:
        raise ConfigError("emit_pe_heatmap needs at least one resolution")
    written = []
    for res in sorted(resolutions):
        if res % patch_size != 0:
            raise ConfigError(
                f"resolution {res} is not divisible by patch size {patch_size}"
            )
        grid = (res // patch_size, res // patch_size)
        map2d = pe_token_mean_map(pe, grid)
        pgm_path = os.path.join(out_dir, f"pe_{res}.pgm")
        csv_path = os.path.join(out_dir, f"pe_{res}.csv")
        atomic_write_bytes(pgm_path, _pgm_bytes(map2d))
        buf = io.StringIO()
        writer = csv.writer(buf)
        for row in map2d:
            writer.writerow([f"{v:.9g}" for v in row])
        atomic_write_text(csv_path, buf.getvalue())
        written += [pgm_path, csv_path]
    return written
