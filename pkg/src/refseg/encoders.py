"""Tiny four-stage language and image encoders.

Both encoders mirror the stage topology of the usual pretrained backbones
(a patch embed followed by four stages that halve the spatial size, and a
four-way split of transformer layers on the language side) without any of
their weight baggage.  The model assembly calls the stages one at a time
and may interleave a fusion block after each one, so the per-stage modules
are exposed directly instead of being hidden behind a single forward.

There is no dropout anywhere: evaluation is exactly deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .vocab import MAX_LEN


@dataclass(frozen=True)
class EncoderConfig:
    image_dims: tuple[int, ...] = (32, 64, 128, 256)
    lang_width: int = 64
    lang_layers_per_stage: int = 1
    heads: int = 4
    patch_size: int = 4
    blocks_per_stage: int = 1
    vocab_size: int = 20
    max_len: int = MAX_LEN

    def __post_init__(self):
        object.__setattr__(self, "image_dims", tuple(self.image_dims))
        if len(self.image_dims) != 4:
            raise ValueError("exactly 4 image stages are required")
        if self.lang_width % self.heads != 0:
            raise ValueError("lang_width must be divisible by heads")

    @property
    def stages(self) -> int:
        return 4


class SelfAttention(nn.Module):
    """Multi-head self-attention with optional key padding mask."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            att = att.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block; zeroing proj/fc2 weights makes it the identity."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask)
        return x + self.mlp(self.norm2(x))


class TextStage(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(layers))

    def forward(self, x, key_padding_mask=None):
        for block in self.blocks:
            x = block(x, key_padding_mask)
        return x


class TextEncoder(nn.Module):
    """Word + position embeddings followed by 4 equal transformer stages."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.lang_width)
        self.position_embedding = nn.Parameter(torch.zeros(cfg.max_len, cfg.lang_width))
        self.stages = nn.ModuleList(
            TextStage(cfg.lang_width, cfg.heads, cfg.lang_layers_per_stage)
            for _ in range(cfg.stages)
        )

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] > self.cfg.max_len:
            raise ValueError(
                f"sequence length {tokens.shape[-1]} exceeds positional table "
                f"({self.cfg.max_len})"
            )
        emb = self.token_embedding(tokens)
        return emb + self.position_embedding[: tokens.shape[-1]].to(emb.dtype)

    def forward(self, tokens, key_padding_mask=None):
        x = self.embed(tokens)
        for stage in self.stages:
            x = stage(x, key_padding_mask)
        return x


class ConvBlock(nn.Module):
    """Residual 3x3 conv block; zeroing conv2 makes it the identity."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm = nn.GroupNorm(math.gcd(8, dim), dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.norm(self.conv1(x))))


class ImageStage(nn.Module):
    """Optional 2x strided downsample (stages 2-4) plus conv blocks."""

    def __init__(self, in_dim: int, out_dim: int, blocks: int, downsample: bool):
        super().__init__()
        self.downsample = nn.Conv2d(in_dim, out_dim, 2, stride=2) if downsample else None
        if not downsample and in_dim != out_dim:
            raise ValueError("stage 1 cannot change channel count")
        self.blocks = nn.ModuleList(ConvBlock(out_dim) for _ in range(blocks))

    def forward(self, x):
        if self.downsample is not None:
            if x.shape[-1] % 2 or x.shape[-2] % 2:
                raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by 2")
            x = self.downsample(x)
        for block in self.blocks:
            x = block(x)
        return x


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.image_dims
        self.patch_embed = nn.Conv2d(3, dims[0], cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.ModuleList(
            ImageStage(
                dims[max(i - 1, 0)], dims[i], cfg.blocks_per_stage, downsample=i > 0
            )
            for i in range(cfg.stages)
        )

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] % self.cfg.patch_size or image.shape[-2] % self.cfg.patch_size:
            raise ValueError(
                f"image size {tuple(image.shape[-2:])} not divisible by patch size "
                f"{self.cfg.patch_size}"
            )
        return self.patch_embed(image)

    def forward(self, image):
        x = self.embed(image)
        for stage in self.stages:
            x = stage(x)
        return x
