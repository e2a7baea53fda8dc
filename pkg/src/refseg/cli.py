"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, probe.  Exit codes: 0 on
success, 2 on configuration/usage errors, 3 on numerical aborts (a loss
went non-finite).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig
from .data import export_dataset, generate_dataset, load_dataset
from .experiments import (
    ablation_table,
    make_splits,
    run_ablation,
    run_eval,
    run_probe,
    run_train,
)
from .model import load_checkpoint


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file (overrides applied on top)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--val-count", type=int, dest="val_count")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--grounding", choices=["on", "off"])
    p.add_argument("--mask-rate", type=float, dest="mask_rate")
    p.add_argument("--mask-input", choices=["center", "average", "none"], dest="mask_input")
    p.add_argument("--predictor-depth", type=int, dest="predictor_depth")
    p.add_argument("--cam", choices=["on", "off"])
    p.add_argument("--cam-scales", dest="cam_scales", help="comma list, e.g. 1,2,3,6")
    p.add_argument("--cal", choices=["off", "p2p", "p2t", "both"])
    p.add_argument("--cal-form", choices=["log", "literal"], dest="cal_form")
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument(
        "--loss-weights", dest="loss_weights", help="comma list: bce,dice,cal,grounding"
    )
    p.add_argument("--out", dest="out_dir")


def _config_from_args(args) -> ExperimentConfig:
    cfg = (
        ExperimentConfig.from_json(args.config.read_text())
        if args.config
        else ExperimentConfig()
    )
    overrides = {}
    for name in (
        "seed", "epochs", "batch_size", "lr", "train_count", "val_count",
        "image_size", "mask_rate", "mask_input", "predictor_depth", "cal",
        "cal_form", "tau1", "tau2", "out_dir",
    ):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "grounding", None) is not None:
        overrides["grounding"] = args.grounding == "on"
    if getattr(args, "cam", None) is not None:
        overrides["cam"] = args.cam == "on"
    if getattr(args, "cam_scales", None):
        overrides["cam_scales"] = tuple(int(x) for x in args.cam_scales.split(","))
    if getattr(args, "loss_weights", None):
        overrides["loss_weights"] = tuple(float(x) for x in args.loss_weights.split(","))
    return cfg.with_overrides(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refseg")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate and export a synthetic dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--grid", type=int, default=3)
    gen.add_argument("--image-size", type=int, default=64, dest="image_size")
    gen.add_argument("--out", type=Path, required=True)

    train = sub.add_parser("train", help="train a model and write a run directory")
    _add_train_flags(train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, help="exported dataset directory")
    ev.add_argument(
        "--split", choices=["train", "val"], default="val",
        help="regenerate this split from the checkpoint's stored config",
    )
    ev.add_argument("--triptychs", type=int, default=0)
    ev.add_argument("--out", type=Path)

    ab = sub.add_parser("ablate", help="run the component x seed ablation matrix")
    _add_train_flags(ab)
    ab.add_argument("--seeds", default="0,1,2", help="comma list of seeds")

    pr = sub.add_parser("probe", help="linear-probe alignment of a checkpoint")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--data", type=Path)
    pr.add_argument("--split", choices=["train", "val"], default="val")
    pr.add_argument("--probe-seed", type=int, default=0, dest="probe_seed")
    return parser


def _eval_samples(args, meta):
    if args.data:
        return load_dataset(args.data)
    exp = meta.get("experiment")
    if exp is None:
        raise ValueError("checkpoint lacks a stored config; pass --data")
    cfg = ExperimentConfig.from_dict(exp)
    train, val = make_splits(cfg)
    return train if args.split == "train" else val


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            samples = generate_dataset(args.seed, args.count, args.grid, args.image_size)
            export_dataset(samples, args.out)
            print(f"wrote {len(samples)} samples to {args.out}")
        elif args.command == "train":
            cfg = _config_from_args(args)
            out = run_train(cfg, echo=print)
            print(f"run directory: {out}")
        elif args.command == "eval":
            model, meta = load_checkpoint(args.checkpoint)
            samples = _eval_samples(args, meta)
            report = run_eval(args.checkpoint, samples, args.out, args.triptychs)
            print(report.as_table())
        elif args.command == "ablate":
            cfg = _config_from_args(args)
            seeds = tuple(int(s) for s in args.seeds.split(","))
            summary = run_ablation(cfg, seeds, out_dir=cfg.out_dir, echo=print)
            print(ablation_table(summary))
        elif args.command == "probe":
            model, meta = load_checkpoint(args.checkpoint)
            samples = _eval_samples(args, meta)
            result = run_probe(model, samples, seed=args.probe_seed)
            print(
                json.dumps(
                    {
                        "matching_sim": result.matching_sim,
                        "nonmatching_sim": result.nonmatching_sim,
                        "gap": result.gap,
                    }
                )
            )
    except (ValueError, KeyError, FileNotFoundError, TypeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except FloatingPointError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
