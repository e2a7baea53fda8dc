"""Grounded masked-token prediction.

The auxiliary task: hide some expression tokens, then ask a transformer to
recover them from (a) the remaining text, (b) the final-stage image
features, and (c) an embedding of the target mask -- by default its center
coordinate, pushed through a 2-layer MLP.  Getting the word right requires
knowing which object the expression talks about, which is the point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import TransformerBlock
from .validation import check_unit_interval_point
from .vocab import CLS, MASK, PAD


@dataclass
class MaskedBatch:
    """One masking outcome: the corrupted sequence plus recovery targets."""

    tokens: np.ndarray  # masked sequence, same length as the original
    positions: np.ndarray  # indices that were masked, ascending
    targets: np.ndarray  # original ids at those indices
    centroid: tuple[float, float]


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 8
    heads: int = 4
    vocab_size: int = 20

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("predictor depth must be >= 1")


def maskable_positions(tokens: np.ndarray) -> np.ndarray:
    return np.nonzero((tokens != PAD) & (tokens != CLS))[0]


def mask_tokens(
    tokens: np.ndarray,
    p: float,
    rng: np.random.Generator,
    centroid: tuple[float, float] = (0.5, 0.5),
) -> MaskedBatch:
    """Mask each non-special token independently with probability p.

    At least one position is always masked: if the independent draws all
    come up empty, one maskable position is picked uniformly.
    """
    if not 0 < p <= 1:
        raise ValueError(f"masking probability must be in (0, 1], got {p}")
    tokens = np.asarray(tokens)
    candidates = maskable_positions(tokens)
    if candidates.size == 0:
        raise ValueError("sequence has no maskable tokens")
    chosen = candidates[rng.random(candidates.size) < p]
    if chosen.size == 0:
        chosen = candidates[[rng.integers(candidates.size)]]
    masked = tokens.copy()
    masked[chosen] = MASK
    return MaskedBatch(
        tokens=masked,
        positions=chosen.astype(np.int64),
        targets=tokens[chosen].astype(np.int64),
        centroid=centroid,
    )


class MaskCentroidEncoder(nn.Module):
    """2-layer MLP from a normalized (cx, cy) pair to a width-D embedding."""

    def __init__(self, width: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or width
        self.fc1 = nn.Linear(2, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, centroid: torch.Tensor) -> torch.Tensor:
        if not ((centroid >= 0) & (centroid <= 1)).all():
            raise ValueError(f"centroid outside [0,1]^2: {centroid.tolist()}")
        return self.fc2(F.gelu(self.fc1(centroid)))


class MaskedTokenPredictor(nn.Module):
    """Transformer over [language tokens ; image tokens ; mask embedding].

    The final-stage image map is flattened to one token per spatial
    position and linearly projected into the predictor width (language
    width by default; set project="text_to_image" to project the language
    tokens into the image width instead).  Logits are read out at language
    slots only.
    """

    def __init__(
        self,
        lang_dim: int,
        image_dim: int,
        cfg: PredictorConfig,
        project: str = "image_to_text",
    ):
        super().__init__()
        if project not in ("image_to_text", "text_to_image"):
            raise ValueError(f"unknown projection direction {project!r}")
        self.cfg = cfg
        self.project = project
        self.width = lang_dim if project == "image_to_text" else image_dim
        self.lang_proj = (
            nn.Identity() if project == "image_to_text" else nn.Linear(lang_dim, image_dim)
        )
        self.image_proj = (
            nn.Linear(image_dim, lang_dim) if project == "image_to_text" else nn.Identity()
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(self.width, cfg.heads) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(self.width)
        self.head = nn.Linear(self.width, cfg.vocab_size)

    def forward(
        self,
        lang_feats: torch.Tensor,  # B x L x D
        image_map: torch.Tensor,  # B x C x H x W
        mask_emb: torch.Tensor | None,  # B x width or None
        pad_mask: torch.Tensor | None = None,  # B x L, True at PAD slots
    ) -> torch.Tensor:
        """Vocabulary logits at every language slot: B x L x V."""
        b, length, _ = lang_feats.shape
        img_tokens = self.image_proj(image_map.flatten(-2).transpose(-1, -2))
        seq = [self.lang_proj(lang_feats), img_tokens]
        if mask_emb is not None:
            seq.append(mask_emb[:, None, :])
        x = torch.cat(seq, dim=1)
        if pad_mask is not None:
            extra = x.shape[1] - length
            key_mask = torch.cat(
                [pad_mask, torch.zeros(b, extra, dtype=torch.bool, device=x.device)], dim=1
            )
        else:
            key_mask = None
        for block in self.blocks:
            x = block(x, key_mask)
        return self.head(self.norm(x[:, :length]))


def predict_masked(
    predictor: MaskedTokenPredictor,
    lang_feats: torch.Tensor,  # L x D
    image_map: torch.Tensor,  # C x H x W
    mask_emb: torch.Tensor | None,  # width vector or None
    positions,
    pad_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-sample readout: logits at the masked positions, |pos| x V."""
    length = lang_feats.shape[0]
    positions = torch.as_tensor(positions, dtype=torch.long)
    if positions.numel() and positions.max() >= length:
        raise IndexError(f"masked position {int(positions.max())} >= sequence length {length}")
    logits = predictor(
        lang_feats[None],
        image_map[None],
        None if mask_emb is None else mask_emb[None],
        None if pad_mask is None else pad_mask[None],
    )[0]
    return logits[positions]


def grounding_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the masked positions."""
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    if targets.numel() == 0:
        raise ValueError("grounding loss needs at least one masked position")
    if logits.shape[0] != targets.shape[0]:
        raise ValueError(
            f"logit rows ({logits.shape[0]}) != target count ({targets.shape[0]})"
        )
    return F.cross_entropy(logits, targets)
