"""Segmentation metrics and the cross-modal alignment probe.

compute_metrics reports the dataset-pooled IoU (intersections and unions
summed over samples before dividing), the mean of per-sample IoUs, and
precision at the 0.5/0.7/0.9 thresholds.

alignment_probe measures how aligned frozen language and image features
are: a single linear layer is trained with a symmetric contrastive loss
to map pooled language vectors into image space, and the mean cosine
similarity of matching vs non-matching pairs on a held-out split is
reported.  A large gap means the expression feature already knows which
image it belongs to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .seeds import torch_generator

PRECISION_THRESHOLDS = (0.5, 0.7, 0.9)


@dataclass
class ProbeResult:
    matching_sim: float
    nonmatching_sim: float
    gap: float


@dataclass
class MetricsReport:
    oiou: float
    miou: float
    precision: dict[float, float]
    per_sample_ious: list[float] = field(default_factory=list)
    probe: ProbeResult | None = None

    def to_dict(self) -> dict:
        d = {
            "oiou": self.oiou,
            "miou": self.miou,
            **{f"p@{t}": self.precision[t] for t in PRECISION_THRESHOLDS},
        }
        if self.probe is not None:
            d["probe"] = {
                "matching_sim": self.probe.matching_sim,
                "nonmatching_sim": self.probe.nonmatching_sim,
                "gap": self.probe.gap,
            }
        return d

    def to_json(self) -> str:
        return json.dumps({**self.to_dict(), "per_sample_ious": self.per_sample_ious})

    def as_table(self) -> str:
        rows = [f"{'metric':<12}{'value':>10}"]
        for key, val in self.to_dict().items():
            if isinstance(val, dict):
                rows.extend(f"{'probe.' + k:<12}{v:>10.4f}" for k, v in val.items())
            else:
                rows.append(f"{key:<12}{val:>10.4f}")
        return "\n".join(rows)


def iou(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    """(intersection, union) pixel counts of two binary masks."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int((pred & gt).sum()), int((pred | gt).sum())


def compute_metrics(preds: list[np.ndarray], gts: list[np.ndarray]) -> MetricsReport:
    if len(preds) == 0:
        raise ValueError("compute_metrics needs at least one sample")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    inters, unions, ious = 0, 0, []
    for pred, gt in zip(preds, gts):
        i, u = iou(pred, gt)
        inters += i
        unions += u
        ious.append(i / u if u else 1.0)
    return MetricsReport(
        oiou=inters / unions if unions else 1.0,
        miou=float(np.mean(ious)),
        precision={t: float(np.mean([v > t for v in ious])) for t in PRECISION_THRESHOLDS},
        per_sample_ious=ious,
    )


# ---------------------------------------------------------------------------
# linear probe


def probe_similarities(
    weight: torch.Tensor, lang: torch.Tensor, image: torch.Tensor
) -> tuple[float, float]:
    """Mean cosine similarity of matching and non-matching pairs under a
    fixed linear map (rows of `lang` are projected by weight @ l)."""
    proj = F.normalize(lang @ weight.T, dim=-1)
    img = F.normalize(image, dim=-1)
    sims = proj @ img.T
    n = sims.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    return float(sims.diagonal().mean()), float(sims[~eye].mean())


def alignment_probe(
    lang_feats: np.ndarray,
    image_feats: np.ndarray,
    heldout_fraction: float = 0.25,
    seed: int = 0,
    steps: int = 200,
    lr: float = 1e-2,
    temperature: float = 0.1,
) -> ProbeResult:
    """Train the linear probe on one split, report similarities on the other.

    Backbone features are given as fixed arrays (everything upstream is
    frozen); only the projection matrix is learned, with a symmetric
    in-batch contrastive loss over matching pairs.
    """
    lang = torch.as_tensor(np.asarray(lang_feats), dtype=torch.float32)
    image = torch.as_tensor(np.asarray(image_feats), dtype=torch.float32)
    n = lang.shape[0]
    if n < 64:
        raise ValueError(f"alignment probe needs >= 64 samples, got {n}")
    if float(lang.var(dim=0).max()) == 0.0 or float(image.var(dim=0).max()) == 0.0:
        raise ValueError("degenerate features: no variation across samples")

    n_held = max(1, int(round(n * heldout_fraction)))
    train_l, train_i = lang[: n - n_held], image[: n - n_held]
    held_l, held_i = lang[n - n_held :], image[n - n_held :]

    gen = torch_generator(seed, "probe")
    weight = torch.empty(image.shape[1], lang.shape[1])
    torch.nn.init.uniform_(
        weight, -1 / lang.shape[1] ** 0.5, 1 / lang.shape[1] ** 0.5, generator=gen
    )
    weight.requires_grad_(True)
    opt = torch.optim.Adam([weight], lr=lr)
    labels = torch.arange(train_l.shape[0])
    for _ in range(steps):
        opt.zero_grad()
        proj = F.normalize(train_l @ weight.T, dim=-1)
        img = F.normalize(train_i, dim=-1)
        logits = proj @ img.T / temperature
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        loss.backward()
        opt.step()

    with torch.no_grad():
        match, nonmatch = probe_similarities(weight, held_l, held_i)
    return ProbeResult(matching_sim=match, nonmatching_sim=nonmatch, gap=match - nonmatch)
