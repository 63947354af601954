"""Synthetic dataset generation and binary containers.

Dataset file ("RSDS"): magic, u32 version=1, u32 n_samples, u32 n_classes,
u32 H, u32 W, then per sample a u32 label followed by H*W*3 bytes of RGB
pixels stored planar [3, H, W] in row-major order. All integers little-endian.

Checkpoint file ("RSFM"): magic, u32 version=1, u32 config_json_len + JSON
bytes, u32 n_tensors, then per tensor u16 name_len + UTF-8 name, u8 rank,
u32 dims..., float32 data. Tensor names appear in sorted order. Round-trips
are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .ioutil import atomic_write_bytes

DATASET_MAGIC = b"RSDS"
CHECKPOINT_MAGIC = b"RSFM"

_SHAPES = ("circle", "square", "triangle", "ring")


@dataclass
class Dataset:
    images: np.ndarray  # u8, [N, 3, H, W]
    labels: np.ndarray  # i64, [N]
    n_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise DataError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.images)


def _shape_mask(kind: str, size: int, cx: float, cy: float, radius: float,
                inner_ratio: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius
    if kind == "ring":
        d2 = dx * dx + dy * dy
        inner = radius * inner_ratio
        return (d2 <= radius * radius) & (d2 >= inner * inner)
    if kind == "triangle":
        # upright equilateral triangle with circumradius `radius`
        top = (cx, cy - radius)
        left = (cx - radius * np.sqrt(3) / 2, cy + radius / 2)
        right = (cx + radius * np.sqrt(3) / 2, cy + radius / 2)
        mask = np.ones((size, size), dtype=bool)
        verts = (top, left, right)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            # inside = same side as the third vertex
            x2, y2 = verts[(i + 2) % 3]
            cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
            ref = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            mask &= cross * ref >= 0
        return mask
    raise ConfigError(f"unknown shape kind '{kind}'")


def gen_synthetic(
    n_per_class: int,
    base_size: int = 96,
    n_classes: int = 4,
    seed: int = 0,
) -> Dataset:
    """Scale-bearing shape classification set: one filled circle, square,
    triangle or ring per image, with randomized size (20-60% of the image),
    position, color, and noisy background."""
    if base_size < 32:
        raise ConfigError(f"base_size must be >= 32, got {base_size}")
    if not 2 <= n_classes <= len(_SHAPES):
        raise ConfigError(f"n_classes must be in [2, {len(_SHAPES)}], got {n_classes}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5D5)))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labels = labels[rng.permutation(len(labels))].astype(np.int64)

    images = np.empty((len(labels), 3, base_size, base_size), dtype=np.uint8)
    for i, label in enumerate(labels):
        bg = rng.integers(40, 216, size=3)
        noise = rng.integers(-30, 31, size=(3, base_size, base_size))
        img = np.clip(bg[:, None, None] + noise, 0, 255).astype(np.float64)

        while True:
            color = rng.integers(0, 256, size=3)
            if np.abs(color - bg).sum() >= 160:
                break
        frac = rng.uniform(0.20, 0.60)
        radius = frac * base_size / 2.0
        margin = radius + 2.0
        cx = rng.uniform(margin, base_size - margin)
        cy = rng.uniform(margin, base_size - margin)
        inner_ratio = rng.uniform(0.50, 0.70)
        mask = _shape_mask(_SHAPES[label], base_size, cx, cy, radius, inner_ratio)
        img[:, mask] = color[:, None]
        images[i] = img.astype(np.uint8)
    return Dataset(images, labels, n_classes, name=f"synthetic{n_classes}")


# dataset container ------------------------------------------------------------


def save_dataset(ds: Dataset, path: str) -> None:
    n, _, h, w = ds.images.shape if len(ds) else (0, 3, 0, 0)
    if len(ds):
        h, w = ds.images.shape[2], ds.images.shape[3]
    parts = [
        DATASET_MAGIC,
        struct.pack("<IIIII", 1, len(ds), ds.n_classes, h, w),
    ]
    for img, label in zip(ds.images, ds.labels):
        parts.append(struct.pack("<I", int(label)))
        parts.append(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_dataset(path: str, name: str = "") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    version = r.u32("version")
    if version != 1:
        raise FormatError(f"unsupported dataset version {version}", 4)
    n = r.u32("n_samples")
    n_classes = r.u32("n_classes")
    h = r.u32("height")
    w = r.u32("width")
    images = np.empty((n, 3, h, w), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    pixel_bytes = 3 * h * w
    for i in range(n):
        labels[i] = r.u32(f"label of sample {i}")
        raw = r.take(pixel_bytes, f"pixels of sample {i}")
        images[i] = np.frombuffer(raw, dtype=np.uint8).reshape(3, h, w)
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last sample", r.pos)
    if n and labels.max() >= n_classes:
        raise FormatError("label exceeds declared n_classes", 12)
    return Dataset(images, labels, n_classes, name=name)


# checkpoint container ------------------------------------------------------------


def save_checkpoint(tensors: dict[str, np.ndarray], config: dict, path: str) -> None:
    """Write named float32 tensors (in sorted name order) plus a JSON config
    echo."""
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", 1, len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version = r.u32("version")
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg_len = r.u32("config length")
    try:
        config = json.loads(r.take(cfg_len, "config json").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid config json: {exc}", 12) from exc
    n_tensors = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    prev_name = None
    for i in range(n_tensors):
        name_len = r.u16(f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        if prev_name is not None and name <= prev_name:
            raise FormatError(f"tensor names not sorted at '{name}'", r.pos)
        prev_name = name
        rank = r.u8(f"rank of tensor {i}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of tensor {i}"))
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * count, f"data of tensor '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return tensors, config
