"""Experiment orchestration: training runs, evaluation, ablations, probes.

A run directory is self-describing: `config.json` plus the seed pin down
`metrics.jsonl` byte for byte.  All randomness is drawn from named streams
(see seeds.py), and ablation cells hash their own master seeds so no two
cells share a stream.
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .data import Sample, generate_dataset
from .grounding import mask_tokens
from .metrics import MetricsReport, ProbeResult, alignment_probe, compute_metrics
from .model import RefSegNet, collate, load_checkpoint, save_checkpoint, train_step
from .seeds import numpy_rng, stream_seed

ABLATION_VARIANTS = ("baseline", "+grounding", "+cam", "+cal", "full")


def make_splits(cfg: ExperimentConfig) -> tuple[list[Sample], list[Sample]]:
    train = generate_dataset(
        cfg.seed, cfg.train_count, cfg.grid, cfg.image_size, stream="dataset.train"
    )
    val = generate_dataset(
        cfg.seed, cfg.val_count, cfg.grid, cfg.image_size, stream="dataset.val"
    )
    return train, val


def evaluate_model(model: RefSegNet, samples: list[Sample], batch_size: int = 64) -> MetricsReport:
    preds = []
    for lo in range(0, len(samples), batch_size):
        images, tokens, _ = collate(samples[lo : lo + batch_size])
        preds.extend(model.predict_masks(images, tokens))
    return compute_metrics(preds, [s.mask for s in samples])


def train_model(
    cfg: ExperimentConfig,
    train: list[Sample],
    val: list[Sample] | None = None,
    log=None,
) -> tuple[RefSegNet, list[dict]]:
    """Train a model per config; returns (model, per-epoch history)."""
    model = RefSegNet(cfg.model_config(), seed=cfg.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = numpy_rng(cfg.seed, f"shuffle.e{epoch}").permutation(len(train))
        sums: dict[str, float] = {}
        for lo in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[lo : lo + cfg.batch_size]]
            images, tokens, masks = collate(batch)
            masked = None
            if cfg.grounding:
                masked = [
                    mask_tokens(
                        s.tokens,
                        cfg.mask_rate,
                        numpy_rng(cfg.seed, f"mask.e{epoch}.s{s.id}"),
                        s.centroid,
                    )
                    for s in batch
                ]
            for group in optimizer.param_groups:  # cosine decay
                group["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
            bundle = train_step(
                model, optimizer, images, tokens, masks, masked, grad_clip=cfg.grad_clip
            )
            step += 1
            for key, value in bundle.to_dict().items():
                if key != "weights":
                    sums[key] = sums.get(key, 0.0) + value
        record = {
            "epoch": epoch,
            "losses": {k: v / steps_per_epoch for k, v in sums.items()},
        }
        if val is not None:
            record["val"] = evaluate_model(model, val).to_dict()
        history.append(record)
        if log:
            log(record)
    return model, history


def _code_revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5,
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    return f"refseg-{__version__}"


def run_train(cfg: ExperimentConfig, echo=None) -> Path:
    """Full training run with on-disk artifacts; returns the run directory."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    if config_path.exists() and config_path.read_text() != cfg.to_json():
        raise ValueError(
            f"run directory {out} already holds a different config; refusing to resume"
        )
    config_path.write_text(cfg.to_json())

    torch.set_num_threads(1)  # single-core contract; also fixes reduction order
    train, val = make_splits(cfg)
    lines = []

    def log(record):
        lines.append(json.dumps(record, sort_keys=True))
        if echo:
            echo(lines[-1])

    model, history = train_model(cfg, train, val, log=log)
    if cfg.epochs == 0:  # evaluation-only report of the initialized model
        log({"epoch": -1, "losses": {}, "val": evaluate_model(model, val).to_dict()})

    (out / "metrics.jsonl").write_text("\n".join(lines) + "\n")
    save_checkpoint(model, out / "checkpoint.npz", seed=cfg.seed,
                    extra={"experiment": json.loads(cfg.to_json())})
    (out / "model_card.json").write_text(
        json.dumps(
            {
                "config": json.loads(cfg.to_json()),
                "seed": cfg.seed,
                "revision": _code_revision(),
            },
            indent=2,
            sort_keys=True,
        )
    )
    _plot_losses(history, out / "loss_curve.png")
    return out


def _plot_losses(history: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h["epoch"] for h in history]
    for key in ("bce", "dice", "cal", "grounding", "total"):
        values = [h["losses"].get(key) for h in history if h["losses"]]
        if values and values[0] is not None:
            ax.plot(epochs[: len(values)], values, label=key)
    if any("val" in h for h in history):
        ax.plot(
            epochs,
            [h["val"]["miou"] for h in history if "val" in h],
            "k--",
            label="val mIoU",
        )
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# evaluation


def run_eval(
    checkpoint_path, samples: list[Sample], out_dir=None, triptychs: int = 0
) -> MetricsReport:
    model, _ = load_checkpoint(checkpoint_path)
    report = evaluate_model(model, samples)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(report.to_json())
        (out / "eval.txt").write_text(report.as_table() + "\n")
        if triptychs:
            _dump_triptychs(model, samples[:triptychs], out)
    return report


def _dump_triptychs(model: RefSegNet, samples: list[Sample], out: Path) -> None:
    from PIL import Image

    for s in samples:
        images, tokens, _ = collate([s])
        pred = model.predict_masks(images, tokens)[0]
        panels = [
            (s.image * 255).astype(np.uint8),
            np.repeat((s.mask * 255)[:, :, None], 3, axis=2),
            np.repeat((pred * 255)[:, :, None], 3, axis=2),
        ]
        strip = np.concatenate(panels, axis=1)
        Image.fromarray(strip).save(out / f"triptych_{s.id:05d}.png")


# ---------------------------------------------------------------------------
# alignment probe


def run_probe(model: RefSegNet, samples: list[Sample], seed: int = 0) -> ProbeResult:
    lang, image = [], []
    for lo in range(0, len(samples), 64):
        images, tokens, _ = collate(samples[lo : lo + 64])
        l, i = model.pooled_features(images, tokens)
        lang.append(l)
        image.append(i)
    return alignment_probe(np.concatenate(lang), np.concatenate(image), seed=seed)


# ---------------------------------------------------------------------------
# ablation matrix


def variant_config(base: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "baseline":
        return replace(base, grounding=False, cam=False, cal="off")
    if variant == "+grounding":
        return replace(base, grounding=True, cam=False, cal="off")
    if variant == "+cam":
        return replace(base, grounding=False, cam=True, cal="off")
    if variant == "+cal":
        return replace(base, grounding=False, cam=False, cal=base.cal if base.cal != "off" else "both")
    if variant == "full":
        return replace(base, grounding=True, cam=True, cal=base.cal if base.cal != "off" else "both")
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablation(
    base: ExperimentConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    out_dir=None,
    variants: tuple[str, ...] = ABLATION_VARIANTS,
    echo=None,
) -> dict:
    """Train the variant x seed matrix; returns the comparison summary."""
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds per cell")
    torch.set_num_threads(1)
    cells = []
    for variant in variants:
        for s in seeds:
            # each cell gets its own hashed master seed: no stream sharing
            cell_seed = stream_seed(base.seed, f"ablate.{variant}.{s}") % (2**31)
            cfg = variant_config(base, variant).with_overrides(seed=cell_seed)
            train, val = make_splits(cfg)
            model, _ = train_model(cfg, train, val=None)
            report = evaluate_model(model, val)
            probe = run_probe(model, val, seed=cell_seed)
            cells.append(
                {
                    "variant": variant,
                    "seed": s,
                    "miou": report.miou,
                    "oiou": report.oiou,
                    "probe_gap": probe.gap,
                }
            )
            if echo:
                echo(json.dumps(cells[-1], sort_keys=True))

    summary = {"variants": [], "cells": cells}
    for variant in variants:
        rows = [c for c in cells if c["variant"] == variant]
        summary["variants"].append(
            {
                "variant": variant,
                "miou_mean": float(np.mean([r["miou"] for r in rows])),
                "miou_std": float(np.std([r["miou"] for r in rows])),
                "oiou_mean": float(np.mean([r["oiou"] for r in rows])),
                "oiou_std": float(np.std([r["oiou"] for r in rows])),
                "probe_gap_mean": float(np.mean([r["probe_gap"] for r in rows])),
            }
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (out / "ablation.txt").write_text(ablation_table(summary) + "\n")
        _plot_ablation(summary, out / "ablation.png")
    return summary


def ablation_table(summary: dict) -> str:
    head = f"{'variant':<12}{'mIoU':>16}{'oIoU':>16}{'probe gap':>12}"
    rows = [head, "-" * len(head)]
    for v in summary["variants"]:
        rows.append(
            f"{v['variant']:<12}"
            f"{v['miou_mean']:>9.4f} ±{v['miou_std']:.4f}"
            f"{v['oiou_mean']:>9.4f} ±{v['oiou_std']:.4f}"
            f"{v['probe_gap_mean']:>12.4f}"
        )
    return "\n".join(rows)


def _plot_ablation(summary: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [v["variant"] for v in summary["variants"]]
    means = [v["miou_mean"] for v in summary["variants"]]
    stds = [v["miou_std"] for v in summary["variants"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, means, yerr=stds, color="#4878a8", capsize=4)
    ax.set_ylabel("val mIoU")
    lo = max(0.0, min(means) - 3 * max(max(stds), 1e-3))
    ax.set_ylim(lo, min(1.0, max(means) + 3 * max(max(stds), 1e-3)))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
