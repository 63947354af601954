"""Multi-resolution training: replicated batches, the scale-consistency
distillation chain, and the iteration/epoch/joint strategies.

One mini-batch replicates every base sample at r square resolutions (strictly
descending); all replicas share labels and parameters. The joint loss is

    total = (sum_i CE_i + sum_i KD(cls_{i+1} <- stopgrad(cls_i))) / r

with the distillation teacher always the adjacent higher resolution. Crop
augmentation uses an independent RNG stream per (seed, epoch, sample,
replica), so results do not depend on iteration order.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, save_checkpoint
from .errors import ConfigError, DataError, UsageError
from .ioutil import atomic_write_text
from .model import ModelConfig, VisionTransformer
from .optim import ParameterSet, adamw_step, cosine_lr
from .tensor import Tape, Tensor

STRATEGIES = ("mr_joint", "mr_joint_nokd", "mr_iter", "mr_epoch", "single_res")
KD_TARGETS = ("cls", "logits")
KD_LOSSES = ("smooth_l1", "l2", "kl")

EVAL_BATCH = 64  # one canonical eval batch size keeps accuracies bit-stable

# rng stream tags, mixed into SeedSequence entropy
_STREAM_MODEL = 0
_STREAM_ORDER = 1
_STREAM_CROP = 2


@dataclass
class KDConfig:
    enabled: bool = True
    target: str = "cls"
    loss: str = "smooth_l1"
    whiten: bool = True
    beta: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.target not in KD_TARGETS:
            raise ConfigError(f"kd target must be one of {KD_TARGETS}, got '{self.target}'")
        if self.loss not in KD_LOSSES:
            raise ConfigError(f"kd loss must be one of {KD_LOSSES}, got '{self.loss}'")
        if self.target == "logits" and self.loss != "kl":
            raise ConfigError("the logits distillation target requires the kl loss")
        if self.beta <= 0 or self.temperature <= 0:
            raise ConfigError("kd beta and temperature must be positive")

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "target": self.target,
            "loss": self.loss,
            "whiten": self.whiten,
            "beta": self.beta,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KDConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass
class AugmentConfig:
    scale_min: float = 0.08
    scale_max: float = 1.0
    hflip: bool = True

    def to_dict(self) -> dict:
        return {"scale_min": self.scale_min, "scale_max": self.scale_max, "hflip": self.hflip}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass
class RunConfig:
    model: ModelConfig
    resolutions: list[int]
    strategy: str = "mr_joint"
    kd: KDConfig = field(default_factory=KDConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    epochs: int = 30
    warmup_epochs: int = 3
    min_lr: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    dataset: str = ""
    eval_dataset: Optional[str] = None
    output_dir: str = "runs/out"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_resolutions: Optional[list[int]] = None
    crop_rate: float = 0.875

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got '{self.strategy}'")
        if not self.resolutions:
            raise ConfigError("at least one training resolution is required")
        res = sorted(set(int(r) for r in self.resolutions), reverse=True)
        if len(res) != len(self.resolutions):
            raise ConfigError(f"duplicate training resolutions in {self.resolutions}")
        self.resolutions = res  # normalized to strictly descending
        t = self.model.patch_size
        for r in res:
            if r % t:
                raise ConfigError(f"resolution {r} not divisible by patch size {t}")
        if self.strategy.startswith("mr_") and len(res) < 2:
            raise ConfigError(f"{self.strategy} needs at least 2 resolutions")
        if self.strategy == "single_res" and len(res) != 1:
            raise ConfigError("single_res takes exactly one resolution")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0 < self.crop_rate <= 1:
            raise ConfigError(f"crop_rate must be in (0, 1], got {self.crop_rate}")
        # fill APE grids from the training resolutions when not given
        grids = [(r // t, r // t) for r in res]
        if self.model.pe == "ape" and self.model.pe_ref_grid is None:
            self.model.pe_ref_grid = grids[0]
        if self.model.pe == "ape_multi" and self.model.pe_grids is None:
            self.model.pe_grids = grids

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "resolutions": list(self.resolutions),
            "strategy": self.strategy,
            "kd": self.kd.to_dict(),
            "optimizer": {
                "lr": self.lr,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "eps": self.eps,
                "weight_decay": self.weight_decay,
            },
            "schedule": {
                "epochs": self.epochs,
                "warmup_epochs": self.warmup_epochs,
                "min_lr": self.min_lr,
            },
            "batch_size": self.batch_size,
            "seed": self.seed,
            "dataset": self.dataset,
            "eval_dataset": self.eval_dataset,
            "output_dir": self.output_dir,
            "augment": self.augment.to_dict(),
            "eval": {
                "resolutions": self.eval_resolutions,
                "crop_rate": self.crop_rate,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            opt = d.get("optimizer", {})
            sched = d.get("schedule", {})
            ev = d.get("eval", {})
            return cls(
                model=ModelConfig.from_dict(d["model"]),
                resolutions=list(d["resolutions"]),
                strategy=d.get("strategy", "mr_joint"),
                kd=KDConfig.from_dict(d.get("kd", {})),
                lr=float(opt.get("lr", 1e-3)),
                beta1=float(opt.get("beta1", 0.9)),
                beta2=float(opt.get("beta2", 0.999)),
                eps=float(opt.get("eps", 1e-8)),
                weight_decay=float(opt.get("weight_decay", 0.05)),
                epochs=int(sched.get("epochs", 30)),
                warmup_epochs=int(sched.get("warmup_epochs", 3)),
                min_lr=float(sched.get("min_lr", 1e-5)),
                batch_size=int(d.get("batch_size", 64)),
                seed=int(d.get("seed", 0)),
                dataset=d.get("dataset", ""),
                eval_dataset=d.get("eval_dataset"),
                output_dir=d.get("output_dir", "runs/out"),
                augment=AugmentConfig.from_dict(d.get("augment", {})),
                eval_resolutions=ev.get("resolutions"),
                crop_rate=float(ev.get("crop_rate", 0.875)),
            )
        except KeyError as exc:
            raise ConfigError(f"run config is missing required key {exc}") from exc

    @classmethod
    def from_json_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


# augmentation -----------------------------------------------------------------


def sample_crop_params(
    h: int,
    w: int,
    scale_range: tuple[float, float],
    ratio_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[int, int, int, int]:
    """Sample a (top, left, height, width) crop rectangle: uniform area
    fraction, log-uniform aspect, center fallback after 10 failed draws."""
    area = h * w
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: largest center crop within the aspect limits
    in_ratio = w / h
    if in_ratio < ratio_range[0]:
        cw = w
        ch = int(round(cw / ratio_range[0]))
    elif in_ratio > ratio_range[1]:
        ch = h
        cw = int(round(ch * ratio_range[1]))
    else:
        cw, ch = w, h
    top = (h - ch) // 2
    left = (w - cw) // 2
    return top, left, ch, cw


def random_resized_crop(
    image: np.ndarray,
    out_size: int,
    scale_range: tuple[float, float],
    rng: np.random.Generator,
    ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
) -> np.ndarray:
    """Crop a random area/aspect rectangle and bicubic-resize it to
    ``[3, out_size, out_size]`` floats in roughly [0, 1]."""
    if out_size < 1:
        raise ConfigError(f"crop output size must be >= 1, got {out_size}")
    _, h, w = image.shape
    top, left, ch, cw = sample_crop_params(h, w, scale_range, ratio_range, rng)
    crop = image[:, top : top + ch, left : left + cw].astype(np.float32) / 255.0
    if (ch, cw) == (out_size, out_size):
        return crop
    return T.bicubic_resize(Tensor(crop), out_size, out_size).data


def normalize_pixels(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to [-1, 1]."""
    return (x - 0.5) / 0.5


def replica_rng(seed: int, epoch: int, sample_index: int, replica_index: int) -> np.random.Generator:
    """Independent augmentation stream per (seed, epoch, sample, replica)."""
    ss = np.random.SeedSequence(
        (int(seed), _STREAM_CROP, int(epoch), int(sample_index), int(replica_index))
    )
    return np.random.default_rng(ss)


@dataclass
class ResolutionGroup:
    images: np.ndarray  # [B, 3, res, res] float32, normalized
    labels: np.ndarray  # [B] int64
    resolution: int


@dataclass
class MultiResBatch:
    groups: list[ResolutionGroup]

    def __post_init__(self):
        res = [g.resolution for g in self.groups]
        if any(a <= b for a, b in zip(res, res[1:])):
            raise ConfigError(f"group resolutions must be strictly descending, got {res}")
        first = self.groups[0].labels
        for g in self.groups[1:]:
            if not np.array_equal(g.labels, first):
                raise DataError("all resolution groups must share identical labels")

    @property
    def resolutions(self) -> list[int]:
        return [g.resolution for g in self.groups]


def build_multires_batch(
    images: np.ndarray,
    labels: np.ndarray,
    sample_indices: Sequence[int],
    resolutions: Sequence[int],
    seed: int,
    epoch: int = 0,
    augment: AugmentConfig | None = None,
    replica_offset: int = 0,
) -> MultiResBatch:
    """Replicate each base sample once per resolution, with its own
    augmentation stream per replica. ``replica_offset`` selects which stream
    the first group uses (the iter/epoch strategies train single groups but
    keep the stream of the resolution's rank)."""
    if len(images) == 0:
        raise DataError("cannot build a batch from zero samples")
    if len(resolutions) == 0:
        raise ConfigError("at least one resolution is required")
    res = [int(r) for r in resolutions]
    if any(a <= b for a, b in zip(res, res[1:])):
        raise ConfigError(f"resolutions must be strictly descending, got {res}")
    aug = augment or AugmentConfig()
    scale_range = (aug.scale_min, aug.scale_max)
    groups = []
    for gi, r in enumerate(res):
        out = np.empty((len(images), 3, r, r), dtype=np.float32)
        for bi, (img, sidx) in enumerate(zip(images, sample_indices)):
            rng = replica_rng(seed, epoch, sidx, replica_offset + gi)
            crop = random_resized_crop(img, r, scale_range, rng)
            if aug.hflip and rng.random() < 0.5:
                crop = crop[:, :, ::-1]
            out[bi] = normalize_pixels(crop)
        groups.append(ResolutionGroup(out, np.asarray(labels, dtype=np.int64), r))
    return MultiResBatch(groups)


# losses -------------------------------------------------------------------------


def whiten(v: Tensor) -> Tensor:
    """Per-sample standardization of the feature vector (mean 0, std 1)."""
    return T.layernorm(v)


@dataclass
class LossBreakdown:
    ce_terms: list
    kd_terms: list
    total: object  # scalar Tensor during the step, float after .detached()

    def detached(self) -> "LossBreakdown":
        return LossBreakdown(
            [t.item() for t in self.ce_terms],
            [t.item() for t in self.kd_terms],
            self.total.item(),
        )


def scale_consistency_loss(feats: Sequence[Tensor], kd: KDConfig) -> list[Tensor]:
    """Adjacent-pair distillation terms, higher resolution teaching the next
    lower one. Teachers are detached; with r < 2 there is nothing to distill."""
    terms = []
    for i in range(len(feats) - 1):
        teacher = feats[i].detach()
        student = feats[i + 1]
        if kd.target == "cls" and kd.whiten:
            teacher = whiten(teacher)
            student = whiten(student)
        if kd.loss == "smooth_l1":
            term = T.smooth_l1(student, teacher, beta=kd.beta)
        elif kd.loss == "l2":
            diff = T.sub(student, teacher)
            term = T.mul(diff, diff).mean()
        else:  # kl
            term = T.kl_div(student, teacher, temperature=kd.temperature)
        terms.append(term)
    return terms


def total_loss(
    logits: Sequence[Tensor],
    cls_feats: Sequence[Tensor],
    labels: np.ndarray,
    kd: KDConfig,
) -> LossBreakdown:
    """(sum of per-resolution CE + sum of adjacent KD terms) / r."""
    if len(logits) != len(cls_feats):
        raise UsageError(
            f"{len(logits)} logit groups vs {len(cls_feats)} feature groups"
        )
    r = len(logits)
    ce_terms = [T.cross_entropy(lg, labels) for lg in logits]
    kd_terms: list[Tensor] = []
    if kd.enabled and r >= 2:
        source = logits if kd.target == "logits" else cls_feats
        kd_terms = scale_consistency_loss(source, kd)
    total = ce_terms[0]
    for t in ce_terms[1:]:
        total = T.add(total, t)
    for t in kd_terms:
        total = T.add(total, t)
    total = total * (1.0 / r)
    return LossBreakdown(ce_terms, kd_terms, total)


def train_step(
    model: VisionTransformer,
    batch: MultiResBatch,
    kd: KDConfig,
    lr: float,
    cfg: RunConfig,
) -> LossBreakdown:
    """One optimizer step over a (possibly multi-resolution) batch."""
    with Tape() as tape:
        logits, cls_feats = model.forward_groups([g.images for g in batch.groups])
        breakdown = total_loss(logits, cls_feats, batch.groups[0].labels, kd)
        tape.backward(breakdown.total)
    result = breakdown.detached()
    adamw_step(
        model.params,
        lr=lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    model.params.zero_grad()
    return result


# evaluation helper used by the loop (full sweep logic lives in evaluate.py) ----


def accuracy_on(
    model: VisionTransformer,
    prepped: np.ndarray,
    labels: np.ndarray,
) -> tuple[int, int]:
    """Exact top-1 correct count over pre-processed eval images."""
    correct = 0
    for start in range(0, len(prepped), EVAL_BATCH):
        chunk = prepped[start : start + EVAL_BATCH]
        logits, _ = model.forward(chunk)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == labels[start : start + EVAL_BATCH]).sum())
    return correct, len(prepped)


@dataclass
class TrainResult:
    model: VisionTransformer
    checkpoint_path: str
    metrics_path: str
    final_accuracy: dict[int, float]  # percent, by eval resolution


def _disabled_kd() -> KDConfig:
    return KDConfig(enabled=False)


def train_run(
    cfg: RunConfig,
    train_ds: Dataset,
    eval_ds: Optional[Dataset] = None,
    init_params: Optional[dict[str, np.ndarray]] = None,
    log=None,
) -> TrainResult:
    """Train per the configured strategy; writes metrics.csv and a checkpoint
    under cfg.output_dir."""
    from .evaluate import preprocess_eval  # local import to avoid a cycle

    res_desc = cfg.resolutions
    r = len(res_desc)
    model = VisionTransformer(
        cfg.model, rng=np.random.default_rng(np.random.SeedSequence((cfg.seed, _STREAM_MODEL)))
    )
    if init_params is not None:
        model.load_params(init_params)

    kd = cfg.kd if cfg.strategy == "mr_joint" else _disabled_kd()
    n = len(train_ds)
    if n == 0:
        raise DataError("training dataset is empty")
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    eval_source = eval_ds if eval_ds is not None else train_ds
    eval_cache = {
        res: np.stack(
            [preprocess_eval(img, res, cfg.crop_rate) for img in eval_source.images]
        )
        for res in res_desc
    }

    os.makedirs(cfg.output_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.output_dir, "metrics.csv")
    header = ["epoch", "step", "lr", "loss_total"]
    header += [f"loss_ce_{i + 1}" for i in range(r)]
    if cfg.strategy == "mr_joint" and cfg.kd.enabled and r >= 2:
        header += [f"loss_kd_{i + 1}" for i in range(r - 1)]
    header += [f"acc@{res}" for res in res_desc]
    lines = [",".join(header)]

    global_step = 0
    final_acc: dict[int, float] = {}
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _STREAM_ORDER, epoch))
        )
        order = order_rng.permutation(n)
        sum_total = 0.0
        sum_ce = np.zeros(r)
        ce_counts = np.zeros(r, dtype=np.int64)
        sum_kd = np.zeros(max(r - 1, 0))
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images = train_ds.images[idx]
            labels = train_ds.labels[idx]
            lr = cosine_lr(
                min(global_step + 1, total_steps),
                total_steps,
                cfg.lr,
                warmup_steps=warmup_steps,
                min_lr=cfg.min_lr,
            )
            if cfg.strategy in ("mr_joint", "mr_joint_nokd"):
                batch_res = res_desc
                offset = 0
            elif cfg.strategy == "mr_iter":
                pick = global_step % r
                batch_res = [res_desc[pick]]
                offset = pick
            elif cfg.strategy == "mr_epoch":
                pick = epoch % r
                batch_res = [res_desc[pick]]
                offset = pick
            else:  # single_res
                batch_res = res_desc
                offset = 0
            batch = build_multires_batch(
                images,
                labels,
                idx,
                batch_res,
                seed=cfg.seed,
                epoch=epoch,
                augment=cfg.augment,
                replica_offset=offset,
            )
            bd = train_step(model, batch, kd, lr, cfg)
            sum_total += bd.total
            for gi, res in enumerate(batch_res):
                ri = res_desc.index(res)
                sum_ce[ri] += bd.ce_terms[gi]
                ce_counts[ri] += 1
            for i, v in enumerate(bd.kd_terms):
                sum_kd[i] += v
            n_steps += 1
            global_step += 1

        row = [str(epoch), str(global_step), f"{lr:.9g}", f"{sum_total / n_steps:.9g}"]
        for i in range(r):
            row.append(f"{sum_ce[i] / ce_counts[i]:.9g}" if ce_counts[i] else "")
        if cfg.strategy == "mr_joint" and cfg.kd.enabled and r >= 2:
            row += [f"{sum_kd[i] / n_steps:.9g}" for i in range(r - 1)]
        for res in res_desc:
            correct, total = accuracy_on(model, eval_cache[res], eval_source.labels)
            acc = 100.0 * correct / total
            final_acc[res] = acc
            row.append(f"{acc:.9g}")
        lines.append(",".join(row))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {sum_total / n_steps:.4f} " +
                " ".join(f"acc@{res}={final_acc[res]:.2f}" for res in res_desc))

    atomic_write_text(metrics_path, "\n".join(lines) + "\n")
    ckpt_path = os.path.join(cfg.output_dir, "checkpoint.rsfm")
    save_checkpoint(
        model.params.state_dict(),
        {"model": cfg.model.to_dict(), "run": cfg.to_dict(), "seed": cfg.seed},
        ckpt_path,
    )
    return TrainResult(model, ckpt_path, metrics_path, final_acc)
