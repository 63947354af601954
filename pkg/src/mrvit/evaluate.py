"""Evaluation pipeline: resize/center-crop preprocessing, resolution sweeps,
and the ablation driver.

Learned-APE checkpoints are swept by bicubic interpolation of the table;
sine-cosine/GPE/LPE checkpoints regenerate embeddings for each resolution.
Per-resolution APE checkpoints yield an "n/a" row at unseen resolutions
instead of crashing.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, load_checkpoint, load_dataset
from .errors import ConfigError, ResolutionError
from .ioutil import atomic_write_text
from .model import ModelConfig, VisionTransformer
from .tensor import Tensor
from .train import (
    EVAL_BATCH,
    RunConfig,
    TrainResult,
    accuracy_on,
    normalize_pixels,
    train_run,
)

PE_VARIANTS = ("ape", "ape_multi", "sincos", "gpe", "lpe", "glpe")
KD_VARIANTS = ("logit_kl", "cls_l2", "cls_smooth_l1", "none")
STRATEGY_VARIANTS = ("mr_joint", "mr_joint_nokd", "mr_iter", "mr_epoch")
ABLATION_AXES = ("pe", "kd", "strategy")


def resize_short_side(image01: np.ndarray, target: int) -> np.ndarray:
    """Bicubic-resize so the shorter spatial side equals ``target``."""
    _, h, w = image01.shape
    if h <= w:
        new_h, new_w = target, int(round(w * target / h))
    else:
        new_h, new_w = int(round(h * target / w)), target
    if (new_h, new_w) == (h, w):
        return image01
    return T.bicubic_resize(Tensor(image01), new_h, new_w).data


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    top = (h - size) // 2
    left = (w - size) // 2
    return image[:, top : top + size, left : left + size]


def preprocess_eval(image_u8: np.ndarray, test_res: int, crop_rate: float = 0.875) -> np.ndarray:
    """Resize the shorter side to round(test_res / crop_rate), center-crop a
    test_res square, normalize. Returns float32 [3, test_res, test_res]."""
    if not 0 < crop_rate <= 1:
        raise ConfigError(f"crop_rate must be in (0, 1], got {crop_rate}")
    scaled = resize_short_side(image_u8.astype(np.float32) / 255.0,
                               int(round(test_res / crop_rate)))
    return normalize_pixels(center_crop(scaled, test_res))


def model_from_checkpoint(path: str) -> tuple[VisionTransformer, dict]:
    """Rebuild a model from a checkpoint's config echo and load its tensors."""
    tensors, config = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    model = VisionTransformer(
        cfg, rng=np.random.default_rng(np.random.SeedSequence((config.get("seed", 0), 0)))
    )
    model.load_params(tensors)
    return model, config


@dataclass
class SweepRow:
    resolution: int
    top1: float | None  # percent; None marks "n/a" (unseen per-resolution grid)
    n_eval: int


@dataclass
class SweepReport:
    rows: list[SweepRow]
    checkpoint_id: str
    pe_kind: str
    crop_rate: float

    def to_csv(self) -> str:
        lines = [
            f"# checkpoint: {self.checkpoint_id}",
            f"# pe: {self.pe_kind}",
            f"# crop_rate: {self.crop_rate:.9g}",
            "resolution,top1,n_eval",
        ]
        for row in self.rows:
            top1 = "n/a" if row.top1 is None else f"{row.top1:.9g}"
            lines.append(f"{row.resolution},{top1},{row.n_eval}")
        return "\n".join(lines) + "\n"


def _file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()[:12]


def eval_sweep(
    ckpt_path: str,
    dataset: Dataset | str,
    resolutions: list[int],
    crop_rate: float = 0.875,
    out_csv: str | None = None,
) -> SweepReport:
    """Top-1 accuracy of one checkpoint across test resolutions (ascending)."""
    if isinstance(dataset, str):
        dataset = load_dataset(dataset)
    model, config = model_from_checkpoint(ckpt_path)
    patch = model.cfg.patch_size
    rows = []
    for res in sorted(set(int(r) for r in resolutions)):
        if res % patch:
            raise ConfigError(
                f"test resolution {res} is not divisible by patch size {patch}"
            )
        try:
            # probe embedding availability before the costly preprocessing
            model.pe.produce((res // patch, res // patch))
            prepped = np.stack(
                [preprocess_eval(img, res, crop_rate) for img in dataset.images]
            )
            correct, n = accuracy_on(model, prepped, dataset.labels)
            rows.append(SweepRow(res, 100.0 * correct / n, n))
        except ResolutionError:
            rows.append(SweepRow(res, None, len(dataset)))
    report = SweepReport(rows, _file_digest(ckpt_path), model.cfg.pe, crop_rate)
    if out_csv:
        atomic_write_text(out_csv, report.to_csv())
    return report


# ablations ---------------------------------------------------------------------


def ablation_configs(axis: str, base: RunConfig) -> dict[str, RunConfig]:
    """Derived run configs for one ablation axis, same seed and schedule."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}, got '{axis}'")
    variants: dict[str, RunConfig] = {}

    def derive(name: str) -> RunConfig:
        cfg = copy.deepcopy(base)
        cfg.output_dir = os.path.join(base.output_dir, name)
        return cfg

    if axis == "pe":
        for pe in PE_VARIANTS:
            cfg = derive(pe)
            cfg.model.pe = pe
            cfg.model.pe_ref_grid = None
            cfg.model.pe_grids = None
            cfg.__post_init__()  # refill APE grids for the new kind
            variants[pe] = cfg
    elif axis == "kd":
        for name in KD_VARIANTS:
            cfg = derive(name)
            if name == "logit_kl":
                cfg.kd.enabled = True
                cfg.kd.target = "logits"
                cfg.kd.loss = "kl"
                cfg.kd.whiten = False
            elif name == "cls_l2":
                cfg.kd.enabled = True
                cfg.kd.target = "cls"
                cfg.kd.loss = "l2"
            elif name == "cls_smooth_l1":
                cfg.kd.enabled = True
                cfg.kd.target = "cls"
                cfg.kd.loss = "smooth_l1"
            else:
                cfg.kd.enabled = False
            cfg.kd.__post_init__()
            variants[name] = cfg
    else:  # strategy
        for strat in STRATEGY_VARIANTS:
            cfg = derive(strat)
            cfg.strategy = strat
            variants[strat] = cfg
    return variants


def run_ablation(
    axis: str,
    base: RunConfig,
    train_ds: Dataset,
    eval_ds: Dataset | None,
    out_dir: str,
    log=None,
) -> str:
    """Train one run per variant, sweep each, and write a combined CSV
    (variant x resolution rows). Returns the combined CSV path."""
    base = copy.deepcopy(base)
    base.output_dir = out_dir
    sweep_res = base.eval_resolutions or sorted(base.resolutions)
    combined = ["variant,resolution,top1,n_eval"]
    for name, cfg in ablation_configs(axis, base).items():
        if log is not None:
            log(f"[ablate:{axis}] training variant '{name}'")
        result: TrainResult = train_run(cfg, train_ds, eval_ds, log=log)
        report = eval_sweep(
            result.checkpoint_path,
            eval_ds if eval_ds is not None else train_ds,
            sweep_res,
            crop_rate=base.crop_rate,
            out_csv=os.path.join(cfg.output_dir, "sweep.csv"),
        )
        for row in report.rows:
            top1 = "n/a" if row.top1 is None else f"{row.top1:.9g}"
            combined.append(f"{name},{row.resolution},{top1},{row.n_eval}")
    combined_path = os.path.join(out_dir, "combined.csv")
    atomic_write_text(combined_path, "\n".join(combined) + "\n")
    return combined_path
