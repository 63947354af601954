"""Command-line surface.

Subcommands: gen-data, train, eval-sweep, emit-pe, ablate.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .data import gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DataError, ResolutionError
from .evaluate import eval_sweep, model_from_checkpoint, run_ablation
from .posembed import emit_pe_heatmap
from .train import RunConfig, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_IO = 4


def _res_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad resolution list '{text}'") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty resolution list")
    return values


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrvit",
        description="Multi-resolution vision transformer: training, "
        "resolution sweeps, and ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True, help="output dataset path (.rsds)")
    p.add_argument("--n", type=int, required=True, help="images per class")
    p.add_argument("--size", type=int, default=96, help="base image side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, help="run config JSON path")
    p.add_argument("--resume", help="checkpoint to initialize parameters from")

    p = sub.add_parser("eval-sweep", help="accuracy of a checkpoint across resolutions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--res", type=_res_list, required=True, help="e.g. 32,48,64,96")
    p.add_argument("--crop-rate", type=float, default=0.875)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("emit-pe", help="write positional-embedding heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--res", type=_res_list, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", help="train and sweep one ablation axis")
    p.add_argument("--axis", choices=("pe", "kd", "strategy"), required=True)
    p.add_argument("--config", required=True, help="base run config JSON path")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.n, base_size=args.size, n_classes=args.classes, seed=args.seed)
    save_dataset(ds, args.out)
    _log(f"wrote {len(ds)} samples ({args.classes} classes, {args.size}px) to {args.out}")
    return EXIT_OK


def _load_run_inputs(cfg: RunConfig):
    train_ds = load_dataset(cfg.dataset)
    eval_ds = load_dataset(cfg.eval_dataset) if cfg.eval_dataset else None
    return train_ds, eval_ds


def _cmd_train(args) -> int:
    cfg = RunConfig.from_json_file(args.config)
    train_ds, eval_ds = _load_run_inputs(cfg)
    init_params = None
    if args.resume:
        from .data import load_checkpoint
        from .model import ModelConfig

        tensors, echo = load_checkpoint(args.resume)
        resumed_cfg = ModelConfig.from_dict(echo["model"])
        if resumed_cfg.to_dict() != cfg.model.to_dict():
            from .errors import CompatibilityError

            raise CompatibilityError(
                f"checkpoint model config {resumed_cfg.to_dict()} does not match "
                f"run config {cfg.model.to_dict()}"
            )
        init_params = tensors
    result = train_run(cfg, train_ds, eval_ds, init_params=init_params, log=_log)
    _log(f"checkpoint: {result.checkpoint_path}")
    _log(f"metrics:    {result.metrics_path}")
    return EXIT_OK


def _cmd_eval_sweep(args) -> int:
    report = eval_sweep(
        args.ckpt, args.data, args.res, crop_rate=args.crop_rate, out_csv=args.out
    )
    for row in report.rows:
        top1 = "n/a" if row.top1 is None else f"{row.top1:.2f}"
        _log(f"res {row.resolution}: top1 {top1} ({row.n_eval} samples)")
    _log(f"wrote {args.out}")
    return EXIT_OK


def _cmd_emit_pe(args) -> int:
    model, _ = model_from_checkpoint(args.ckpt)
    paths = emit_pe_heatmap(model.pe, args.res, model.cfg.patch_size, args.out)
    _log(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = RunConfig.from_json_file(args.config)
    train_ds, eval_ds = _load_run_inputs(cfg)
    combined = run_ablation(args.axis, cfg, train_ds, eval_ds, args.out, log=_log)
    _log(f"combined results: {combined}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval-sweep": _cmd_eval_sweep,
    "emit-pe": _cmd_emit_pe,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (DataError, ResolutionError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
