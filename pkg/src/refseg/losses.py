"""Segmentation and alignment losses.

Contains the two standard mask losses (binary cross entropy from logits,
soft Dice), the contrastive alignment pair, and the weighted total.  The
alignment losses operate on a PixelPartition: the decoder feature map
split into foreground ("positive") and background ("negative") pixel rows,
all L2-normalized before any dot product.

Two contrastive terms:

* pixel-to-pixel: every positive pixel is contrasted against the pooled
  positive anchor (renormalized mean of the positive rows) with the
  individual negative pixels as distractors, and symmetrically for the
  negatives.
* pixel-to-text: every positive pixel is contrasted against the pooled,
  linearly projected and renormalized expression feature, again with the
  negative pixels as distractors.

The canonical form takes -log of each softmax ratio (the usual InfoNCE
shape).  `form="literal"` instead averages the raw ratios and negates,
which is kept as an ablation switch; its value lies in [-1, 0] rather
than [0, inf).  Whenever a direction has no distractors or no anchors the
affected term is defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isfinite

import torch
import torch.nn.functional as F

from .validation import check_positive, check_same_shape

DEFAULT_WEIGHTS = (2.0, 2.0, 0.5, 1.0)  # (bce, dice, cal, grounding)
_FORMS = ("log", "literal")


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross entropy, computed stably from logits."""
    check_same_shape(logits, target, ("logits", "target"))
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice: 1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps), per sample."""
    check_same_shape(probs, target, ("probs", "target"))
    target = target.to(probs.dtype)
    p = probs.flatten(-2)
    g = target.flatten(-2)
    dice = 1 - (2 * (p * g).sum(-1) + eps) / (p.sum(-1) + g.sum(-1) + eps)
    return dice.mean()


@dataclass
class PixelPartition:
    """Foreground/background pixel feature rows, L2-normalized."""

    positives: torch.Tensor  # |P| x C
    negatives: torch.Tensor  # |N| x C

    @classmethod
    def from_feature_map(cls, feature_map: torch.Tensor, mask: torch.Tensor) -> "PixelPartition":
        """Split a C x H x W map by a binary H x W mask and normalize rows."""
        c, h, w = feature_map.shape
        check_same_shape(mask, feature_map[0], ("mask", "feature map plane"))
        rows = feature_map.reshape(c, h * w).T
        fg = mask.reshape(h * w).bool()
        return cls(
            positives=F.normalize(rows[fg], dim=-1, eps=1e-12),
            negatives=F.normalize(rows[~fg], dim=-1, eps=1e-12),
        )


def _renormalized_mean(rows: torch.Tensor) -> torch.Tensor:
    return F.normalize(rows.mean(dim=0), dim=-1, eps=1e-12)


def _contrast_term(
    anchors_dot: torch.Tensor, distractor_dots: torch.Tensor, tau: float, form: str
) -> torch.Tensor:
    """Mean contrastive term for rows with anchor/distractor similarities.

    anchors_dot: (R,) similarity of each row to its anchor.
    distractor_dots: (R, S) similarities of each row to the S distractors.
    """
    logits = torch.cat([anchors_dot[:, None], distractor_dots], dim=1) / tau
    if form == "log":
        return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()
    ratio = torch.exp(logits[:, 0] - torch.logsumexp(logits, dim=1))
    return -ratio.mean()


def cal_p2p(partition: PixelPartition, tau1: float = 0.1, form: str = "log") -> torch.Tensor:
    """Pixel-to-pixel alignment: cluster foreground and background apart."""
    check_positive(tau1, "tau1")
    if form not in _FORMS:
        raise ValueError(f"form must be one of {_FORMS}, got {form!r}")
    pos, neg = partition.positives, partition.negatives
    zero = pos.new_zeros(()) if pos.numel() else neg.new_zeros(())
    if len(pos) == 0 or len(neg) == 0:
        return zero
    pos_term = _contrast_term(pos @ _renormalized_mean(pos), pos @ neg.T, tau1, form)
    neg_term = _contrast_term(neg @ _renormalized_mean(neg), neg @ pos.T, tau1, form)
    return pos_term + neg_term


def cal_p2t(
    partition: PixelPartition,
    text_rows: torch.Tensor,  # M x D
    tau2: float = 0.1,
    proj: torch.nn.Module | None = None,
    form: str = "log",
) -> torch.Tensor:
    """Pixel-to-text alignment: pull foreground pixels toward the pooled,
    projected expression feature; negatives stay the background pixels."""
    check_positive(tau2, "tau2")
    if form not in _FORMS:
        raise ValueError(f"form must be one of {_FORMS}, got {form!r}")
    if text_rows.ndim != 2 or text_rows.shape[0] == 0:
        raise ValueError("text_rows must be a nonempty M x D matrix")
    pos, neg = partition.positives, partition.negatives
    if len(pos) == 0 or len(neg) == 0:
        return pos.new_zeros(()) if pos.numel() else text_rows.new_zeros(())
    pooled = text_rows.mean(dim=0)
    if proj is not None:
        pooled = proj(pooled)
    anchor = F.normalize(pooled, dim=-1, eps=1e-12)
    return _contrast_term(pos @ anchor, pos @ neg.T, tau2, form)


@dataclass
class LossBundle:
    """The four loss components, their weights, and the exact weighted sum."""

    bce: float | torch.Tensor
    dice: float | torch.Tensor
    cal: float | torch.Tensor
    grounding: float | torch.Tensor
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    total: float | torch.Tensor = 0.0

    def as_floats(self) -> "LossBundle":
        conv = lambda v: float(v.detach() if isinstance(v, torch.Tensor) else v)
        return total_loss(
            conv(self.bce), conv(self.dice), conv(self.cal), conv(self.grounding), self.weights
        )

    def to_dict(self) -> dict:
        b = self.as_floats()
        return {
            "bce": b.bce,
            "dice": b.dice,
            "cal": b.cal,
            "grounding": b.grounding,
            "total": b.total,
            "weights": list(b.weights),
        }


def total_loss(
    bce, dice, cal, grounding, weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
) -> LossBundle:
    """Weighted combination; raises on any non-finite component by name."""
    components = {"bce": bce, "dice": dice, "cal": cal, "grounding": grounding}
    for name, value in components.items():
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not isfinite(v):
            raise FloatingPointError(f"loss component {name!r} is not finite: {v}")
    total = (
        weights[0] * bce + weights[1] * dice + weights[2] * cal + weights[3] * grounding
    )
    return LossBundle(bce, dice, cal, grounding, tuple(weights), total)
