"""Full segmentation model and its training step.

Assembly: the two 4-stage encoders run in lockstep; when fusion is
enabled, a cross-modal block exchanges information after every stage.  An
FPN-style pixel decoder (lateral 1x1 projections, top-down summation, two
conv blocks) merges the image pyramid into one mask feature at 1/4
resolution, from which a 1-channel head plus 4x upsample produces the
mask logits.  During training a second, masked pass through the language
encoder feeds the grounded masked-token predictor.

Anything optional (fusion, grounding head, alignment-loss projection) is
only constructed when enabled, and parameter init is name-keyed, so a
model with a component switched off is bit-identical to a baseline that
never had it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import json
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Sample
from .encoders import ConvBlock, EncoderConfig, ImageEncoder, TextEncoder
from .fusion import CamConfig, CrossModalFusion
from .grounding import (
    MaskCentroidEncoder,
    MaskedBatch,
    MaskedTokenPredictor,
    PredictorConfig,
    grounding_loss,
)
from .init import initialize_parameters
from .losses import (
    DEFAULT_WEIGHTS,
    LossBundle,
    PixelPartition,
    bce_loss,
    cal_p2p,
    cal_p2t,
    dice_loss,
    total_loss,
)
from .vocab import CLS, PAD

CHECKPOINT_VERSION = 1

MASK_INPUTS = ("center", "average", "none")
CAL_MODES = ("off", "p2p", "p2t", "both")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cam_enabled: bool = True
    cam_scales: tuple[int, ...] = (1, 2, 3, 6)
    cam_heads: int = 4
    grounding_enabled: bool = True
    mask_rate: float = 0.15
    mask_input: str = "center"
    predictor_depth: int = 8
    predictor_heads: int = 4
    predictor_project: str = "image_to_text"
    decoder_dim: int = 32
    decoder_scale: int = 4
    cal_mode: str = "both"
    cal_form: str = "log"
    tau1: float = 0.1
    tau2: float = 0.1
    loss_weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS

    def __post_init__(self):
        object.__setattr__(self, "cam_scales", tuple(self.cam_scales))
        object.__setattr__(self, "loss_weights", tuple(self.loss_weights))
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by 32 (patch embed + 3 halvings)")
        if self.mask_input not in MASK_INPUTS:
            raise ValueError(f"mask_input must be one of {MASK_INPUTS}")
        if self.cal_mode not in CAL_MODES:
            raise ValueError(f"cal_mode must be one of {CAL_MODES}")
        if self.decoder_scale not in (4, 8, 16, 32):
            raise ValueError("decoder_scale must be one of 4, 8, 16, 32")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**{**d.get("encoder", {})})
        return ModelConfig(**d)

    def stage_sizes(self) -> list[int]:
        s = self.image_size // self.encoder.patch_size
        return [s, s // 2, s // 4, s // 8]


@dataclass
class ModelOutput:
    mask_logits: torch.Tensor  # B x H x W
    decoder_feature: torch.Tensor  # B x C_L x H_L x W_L
    stage_pairs: list[tuple[torch.Tensor, torch.Tensor]]
    text_final: torch.Tensor  # B x L x D (unmasked pass)
    grounding_logits: torch.Tensor | None = None  # B x L x V at language slots


class WordAttention(nn.Module):
    """One-directional pixel-to-word attention (the baseline fusion).

    Every decoder pixel queries the expression tokens; this is the minimal
    always-on path that lets the mask depend on the text even when the
    per-stage bidirectional fusion is switched off.
    """

    def __init__(self, pixel_dim: int, text_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.head_dim = pixel_dim // heads
        self.query = nn.Conv2d(pixel_dim, pixel_dim, 1)
        self.key = nn.Linear(text_dim, pixel_dim)
        self.value = nn.Linear(text_dim, pixel_dim)
        self.out = nn.Conv2d(pixel_dim, pixel_dim, 1)

    def forward(self, pixels: torch.Tensor, text: torch.Tensor, pad_mask: torch.Tensor | None):
        b, c, h, w = pixels.shape
        q = self.query(pixels).reshape(b, self.heads, self.head_dim, h * w).transpose(-1, -2)
        k = self.key(text).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.value(text).reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / self.head_dim**0.5  # B x h x HW x L
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        fused = (att.softmax(dim=-1) @ v).transpose(-1, -2).reshape(b, c, h, w)
        return pixels + self.out(fused)


class PixelDecoder(nn.Module):
    """Top-down FPN merge plus word attention into a single mask feature.

    target_level is the shallowest stage taking part; its resolution is
    the resolution of the returned mask feature.
    """

    def __init__(
        self,
        stage_dims: Sequence[int],
        text_dim: int,
        out_dim: int,
        target_level: int = 0,
        upsample: int = 4,
    ):
        super().__init__()
        self.target_level = target_level
        self.upsample = upsample
        self.laterals = nn.ModuleList(
            nn.Conv2d(d, out_dim, 1) for d in stage_dims[target_level:]
        )
        self.word_attn = WordAttention(out_dim, text_dim)
        self.blocks = nn.ModuleList([ConvBlock(out_dim), ConvBlock(out_dim)])
        # learned upsampling head: one logit per full-res pixel via pixel
        # shuffle (a fixed interpolation cannot carve exact raster edges)
        self.head = nn.Conv2d(out_dim, upsample * upsample, 1)

    def forward(
        self,
        feats: list[torch.Tensor],
        text: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        used = list(reversed(feats[self.target_level :]))  # deepest first
        lats = list(reversed(self.laterals))
        x = lats[0](used[0])
        for feat, lateral in zip(used[1:], lats[1:]):
            x = F.interpolate(x, size=feat.shape[-2:], mode="bilinear", align_corners=False)
            x = x + lateral(feat)
        x = self.word_attn(x, text, pad_mask)
        for block in self.blocks:
            x = block(x)
        return x, F.pixel_shuffle(self.head(x), self.upsample)


class RegionAverageEncoder(nn.Module):
    """Mask-input variant: 2-layer MLP over the average final-stage image
    feature inside the ground-truth mask region.

    The final stage is far coarser than the mask, so the region weight of
    each feature cell is its mask coverage fraction (area downsampling); a
    hard nearest resample at e.g. 2x2 would usually miss the mask entirely.
    """

    def __init__(self, image_dim: int, width: int):
        super().__init__()
        self.fc1 = nn.Linear(image_dim, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, image_map: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        region = F.adaptive_avg_pool2d(
            masks.to(image_map.dtype)[:, None], image_map.shape[-2:]
        )[:, 0]
        empty = region.sum(dim=(-2, -1)) == 0
        if empty.any():  # degenerate: fall back to a global average
            region = torch.where(empty[:, None, None], torch.ones_like(region), region)
        num = (image_map * region[:, None]).sum(dim=(-2, -1))
        avg = num / region.sum(dim=(-2, -1))[:, None]
        return self.fc2(F.gelu(self.fc1(avg)))


def downsample_mask(masks: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour downsample of binary masks by an integer factor."""
    h, w = masks.shape[-2:]
    th, tw = size
    if h % th or w % tw:
        raise ValueError(f"mask size {h}x{w} not an integer multiple of {th}x{tw}")
    return masks[..., :: h // th, :: w // tw]


class RefSegNet(nn.Module):
    """Referring segmentation model with optional fusion and grounding."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.text_encoder = TextEncoder(enc)
        self.image_encoder = ImageEncoder(enc)

        if cfg.cam_enabled:
            cam_cfg = CamConfig(scales=cfg.cam_scales, heads=cfg.cam_heads)
            self.cam = nn.ModuleDict(
                {
                    f"stage{i + 1}": CrossModalFusion(
                        enc.lang_width,
                        enc.image_dims[i],
                        cam_cfg.scales_for(s, s),
                        cfg.cam_heads,
                    )
                    for i, s in enumerate(cfg.stage_sizes())
                }
            )
        else:
            self.cam = None

        target_level = {4: 0, 8: 1, 16: 2, 32: 3}[cfg.decoder_scale]
        self.decoder = PixelDecoder(
            enc.image_dims,
            enc.lang_width,
            cfg.decoder_dim,
            target_level,
            upsample=cfg.decoder_scale,
        )

        if cfg.grounding_enabled:
            pred_cfg = PredictorConfig(
                depth=cfg.predictor_depth, heads=cfg.predictor_heads, vocab_size=enc.vocab_size
            )
            self.predictor = MaskedTokenPredictor(
                enc.lang_width, enc.image_dims[-1], pred_cfg, cfg.predictor_project
            )
            if cfg.mask_input == "center":
                self.mask_encoder = MaskCentroidEncoder(self.predictor.width)
            elif cfg.mask_input == "average":
                self.mask_encoder = RegionAverageEncoder(
                    enc.image_dims[-1], self.predictor.width
                )
            else:
                self.mask_encoder = None
        else:
            self.predictor = None
            self.mask_encoder = None

        if cfg.cal_mode in ("p2t", "both"):
            self.cal_text_proj = nn.Linear(enc.lang_width, cfg.decoder_dim)
        else:
            self.cal_text_proj = None

        initialize_parameters(self, seed)

    # -- encoding ----------------------------------------------------------

    def encode(self, images: torch.Tensor, tokens: torch.Tensor):
        """Run both encoders stage by stage, fusing after each stage."""
        pad_mask = tokens == PAD
        text = self.text_encoder.embed(tokens)
        image = self.image_encoder.embed(images)
        pairs = []
        for i in range(4):
            text = self.text_encoder.stages[i](text, pad_mask)
            image = self.image_encoder.stages[i](image)
            if self.cam is not None:
                text, image = self.cam[f"stage{i + 1}"](text, image)
            pairs.append((text, image))
        return text, image, pairs, pad_mask

    def encode_text_plain(self, tokens: torch.Tensor) -> torch.Tensor:
        """Language-only pass (no fusion) used for the masked sequence."""
        pad_mask = tokens == PAD
        return self.text_encoder(tokens, pad_mask)

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        images: torch.Tensor,  # B x 3 x H x W
        tokens: torch.Tensor,  # B x L
        masked_tokens: torch.Tensor | None = None,
        centroids: torch.Tensor | None = None,  # B x 2
        gt_masks: torch.Tensor | None = None,  # B x H x W (average mask input)
    ) -> ModelOutput:
        text, image, pairs, pad_mask = self.encode(images, tokens)
        image_feats = [p for _, p in pairs]
        full_feature, logits_full = self.decoder(image_feats, text, pad_mask)
        logits = logits_full[:, 0]

        grounding_logits = None
        if masked_tokens is not None:
            if self.predictor is None:
                raise ValueError("masked tokens supplied but grounding is disabled")
            masked_text = self.encode_text_plain(masked_tokens)
            if self.cfg.mask_input == "center":
                mask_emb = self.mask_encoder(centroids.to(masked_text.dtype))
            elif self.cfg.mask_input == "average":
                mask_emb = self.mask_encoder(image, gt_masks)
            else:
                mask_emb = None
            grounding_logits = self.predictor(
                masked_text, image, mask_emb, masked_tokens == PAD
            )

        return ModelOutput(
            mask_logits=logits,
            decoder_feature=full_feature,
            stage_pairs=pairs,
            text_final=text,
            grounding_logits=grounding_logits,
        )

    # -- prediction --------------------------------------------------------

    @torch.no_grad()
    def predict_masks(self, images: torch.Tensor, tokens: torch.Tensor) -> np.ndarray:
        self.eval()
        out = self(images, tokens)
        return (out.mask_logits > 0).cpu().numpy().astype(np.uint8)

    def pooled_features(self, images, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample pooled (language, image) features for the probe."""
        with torch.no_grad():
            text, image, _, pad_mask = self.encode(images, tokens)
        keep = (~pad_mask).to(text.dtype)[..., None]
        lang = (text * keep).sum(1) / keep.sum(1)
        img = image.mean(dim=(-2, -1))
        return lang.cpu().numpy(), img.cpu().numpy()


# ---------------------------------------------------------------------------
# losses on a batch


def batch_grounding_loss(
    logits: torch.Tensor, masked: list[MaskedBatch]
) -> torch.Tensor:
    """Cross entropy pooled over all masked positions in the batch."""
    rows = torch.cat([logits[b, torch.as_tensor(m.positions)] for b, m in enumerate(masked)])
    targets = torch.cat([torch.as_tensor(m.targets) for m in masked])
    return grounding_loss(rows, targets)


def batch_cal_loss(
    model: RefSegNet, out: ModelOutput, tokens: torch.Tensor, gt_masks: torch.Tensor
) -> torch.Tensor:
    """Mean alignment loss over the batch, respecting the cal_mode flag."""
    cfg = model.cfg
    if cfg.cal_mode == "off":
        return out.decoder_feature.new_zeros(())
    small = downsample_mask(gt_masks, out.decoder_feature.shape[-2:])
    terms = []
    for b in range(out.decoder_feature.shape[0]):
        part = PixelPartition.from_feature_map(out.decoder_feature[b], small[b])
        value = out.decoder_feature.new_zeros(())
        if cfg.cal_mode in ("p2p", "both"):
            value = value + cal_p2p(part, cfg.tau1, cfg.cal_form)
        if cfg.cal_mode in ("p2t", "both"):
            rows = _word_rows(out.text_final[b], tokens[b])
            value = value + cal_p2t(part, rows, cfg.tau2, model.cal_text_proj, cfg.cal_form)
        terms.append(value)
    return torch.stack(terms).mean()


def _word_rows(text_feats: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    keep = (tokens != PAD) & (tokens != CLS)
    return text_feats[keep]


def train_step(
    model: RefSegNet,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    tokens: torch.Tensor,
    gt_masks: torch.Tensor,
    masked: list[MaskedBatch] | None,
    grad_clip: float = 1.0,
) -> LossBundle:
    """One optimization step; returns the detached loss bundle.

    grad_clip bounds the global gradient norm: the sharp contrastive term
    can otherwise produce isolated spikes that undo converged masks.
    """
    model.train()
    cfg = model.cfg
    masked_tokens = centroids = None
    if cfg.grounding_enabled and masked is not None:
        masked_tokens = torch.stack([torch.as_tensor(m.tokens) for m in masked])
        centroids = torch.tensor([m.centroid for m in masked], dtype=images.dtype)
    out = model(images, tokens, masked_tokens, centroids, gt_masks)

    gt = gt_masks.to(images.dtype)
    bce = bce_loss(out.mask_logits, gt)
    dice = dice_loss(torch.sigmoid(out.mask_logits), gt)
    cal = batch_cal_loss(model, out, tokens, gt_masks)
    if out.grounding_logits is not None:
        ground = batch_grounding_loss(out.grounding_logits, masked)
    else:
        ground = out.mask_logits.new_zeros(())

    bundle = total_loss(bce, dice, cal, ground, cfg.loss_weights)
    optimizer.zero_grad()
    bundle.total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return bundle.as_floats()


# ---------------------------------------------------------------------------
# batching helpers


def collate(samples: list[Sample], dtype=torch.float32):
    images = torch.as_tensor(
        np.stack([s.image for s in samples]), dtype=dtype
    ).permute(0, 3, 1, 2)
    tokens = torch.as_tensor(np.stack([s.tokens for s in samples]))
    masks = torch.as_tensor(np.stack([s.mask for s in samples]).astype(np.int64))
    return images, tokens, masks


# ---------------------------------------------------------------------------
# checkpoint format: one .npz with parameter arrays under their state-dict
# names plus a __meta__ JSON blob {version, seed, model config}


def save_checkpoint(model: RefSegNet, path, seed: int = 0, extra: dict | None = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "config": model.cfg.to_dict(),
        **(extra or {}),
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[RefSegNet, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('version')!r} "
                f"(supported: {CHECKPOINT_VERSION})"
            )
        cfg = ModelConfig.from_dict(meta["config"])
        model = RefSegNet(cfg, seed=meta.get("seed", 0))
        state = {k: torch.as_tensor(data[k]) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    return model, meta
