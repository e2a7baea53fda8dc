"""Bidirectional language-image fusion with pyramid-pooled context.

One fusion block sits after every encoder stage.  The image map is
average-pooled to a small pyramid of k x k grids (bins partition the map;
uneven sizes use floor boundaries, so every input pixel lands in exactly
one bin), each pooled map runs through a 3-layer channel MLP, then text
and pooled image exchange information through a shared-similarity
bidirectional cross attention.  The per-scale outputs are concatenated
(image branches first upsampled back to the stage resolution), reduced by
a 2-layer MLP whose final layer starts at zero, squashed by tanh and added
residually -- so a freshly built block is exactly the identity and the
fused signal can never exceed +/-1 per element.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["CamConfig", "pyramid_pool", "BidirectionalCrossAttention", "CrossModalFusion"]


@dataclass(frozen=True)
class CamConfig:
    scales: tuple[int, ...] = (1, 2, 3, 6)
    heads: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.scales:
            raise ValueError("at least one pyramid scale is required")
        if any(s <= 0 for s in self.scales) or any(
            a >= b for a, b in zip(self.scales, self.scales[1:])
        ):
            raise ValueError(f"scales must be strictly increasing positives, got {self.scales}")

    def scales_for(self, height: int, width: int) -> tuple[int, ...]:
        """Scales applicable at a given stage resolution (k <= min(H, W))."""
        fit = tuple(s for s in self.scales if s <= min(height, width))
        if not fit:
            raise ValueError(f"no configured scale fits a {height}x{width} map")
        return fit


def pyramid_pool(feature_map: torch.Tensor, k: int) -> torch.Tensor:
    """Average-pool ... x C x H x W down to ... x C x k x k partition bins.

    Bin (a, b) covers rows [floor(aH/k), floor((a+1)H/k)) and the analogous
    columns, so the bins tile the map without overlap for any H, W >= k.
    """
    h, w = feature_map.shape[-2:]
    if k > min(h, w):
        raise ValueError(f"pool scale {k} exceeds map size {h}x{w}")
    rows = [a * h // k for a in range(k + 1)]
    cols = [b * w // k for b in range(k + 1)]
    grid = [
        torch.stack(
            [
                feature_map[..., rows[a] : rows[a + 1], cols[b] : cols[b + 1]].mean(dim=(-2, -1))
                for b in range(k)
            ],
            dim=-1,
        )
        for a in range(k)
    ]
    return torch.stack(grid, dim=-2)


class ChannelMlp(nn.Module):
    """Position-wise MLP over the channel axis of a C x k x k map."""

    def __init__(self, dim: int, depth: int):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # ... x C x k x k -> ... x k x k x C
        x = x.movedim(-3, -1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = F.gelu(x)
        return x.movedim(-1, -3)


class BidirectionalCrossAttention(nn.Module):
    """Text and image attend to each other through one similarity matrix.

    Queries/keys of both modalities are projected to a shared multi-head
    space; the L x n similarity matrix A is row-softmaxed for the text
    output (text attends over image positions) and column-softmaxed for
    the image output (image attends over text), each applied to the other
    modality's value projection and mapped back to the native width.
    """

    def __init__(self, text_dim: int, image_dim: int, heads: int):
        super().__init__()
        if text_dim % heads:
            raise ValueError("text_dim must be divisible by heads")
        self.heads = heads
        self.head_dim = text_dim // heads
        self.text_proj = nn.Linear(text_dim, text_dim)
        self.image_proj = nn.Linear(image_dim, text_dim)
        self.text_value = nn.Linear(text_dim, text_dim)
        self.image_value = nn.Linear(image_dim, text_dim)
        self.text_out = nn.Linear(text_dim, text_dim)
        self.image_out = nn.Linear(text_dim, image_dim)

    def forward(self, text: torch.Tensor, image_map: torch.Tensor):
        single = text.dim() == 2
        if single:
            text, image_map = text[None], image_map[None]
        if text.shape[1] == 0:
            raise ValueError("cross attention needs at least one text token")
        b, length, _ = text.shape
        c, k1, k2 = image_map.shape[-3:]
        img = image_map.flatten(-2).transpose(-1, -2)  # B x n x C

        def split(x):  # B x N x E -> B x h x N x d
            return x.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)

        tq = split(self.text_proj(text))
        ik = split(self.image_proj(img))
        sim = tq @ ik.transpose(-2, -1) / self.head_dim**0.5  # B x h x L x n

        text_att = sim.softmax(dim=-1)  # text attends over image positions
        image_att = sim.softmax(dim=-2)  # image attends over text tokens
        tv = split(self.text_value(text))
        iv = split(self.image_value(img))

        text_fused = (text_att @ iv).transpose(1, 2).reshape(b, length, -1)
        image_fused = (image_att.transpose(-2, -1) @ tv).transpose(1, 2).reshape(b, k1 * k2, -1)

        text_out = self.text_out(text_fused)
        image_out = self.image_out(image_fused).transpose(-1, -2).reshape(b, c, k1, k2)
        if single:
            return text_out[0], image_out[0]
        return text_out, image_out


class GatedReduce(nn.Module):
    """2-layer channel MLP with a zero-initialized last layer, then tanh."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)
        self.fc2.zero_init = True
        with torch.no_grad():
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()

    def forward(self, x):
        return torch.tanh(self.fc2(F.gelu(self.fc1(x))))


class CrossModalFusion(nn.Module):
    """One fusion block: pyramid pooling, per-scale cross attention,
    concatenation, gated reduction, residual add.  Output shapes always
    equal input shapes, and at init the block is the identity."""

    def __init__(self, text_dim: int, image_dim: int, scales: tuple[int, ...], heads: int = 4):
        super().__init__()
        cfg = CamConfig(scales=tuple(scales), heads=heads)
        self.scales = cfg.scales
        self.pool_mlps = nn.ModuleList(ChannelMlp(image_dim, 3) for _ in self.scales)
        self.cross = nn.ModuleList(
            BidirectionalCrossAttention(text_dim, image_dim, heads) for _ in self.scales
        )
        self.text_reduce = GatedReduce(len(self.scales) * text_dim, text_dim)
        self.image_reduce = GatedReduce(len(self.scales) * image_dim, image_dim)

    def forward(self, text: torch.Tensor, image_map: torch.Tensor):
        single = text.dim() == 2
        if single:
            text, image_map = text[None], image_map[None]
        h, w = image_map.shape[-2:]
        if self.scales[-1] > min(h, w):
            raise ValueError(f"scale {self.scales[-1]} exceeds stage map size {h}x{w}")

        text_branches, image_branches = [], []
        for scale, mlp, cross in zip(self.scales, self.pool_mlps, self.cross):
            pooled = mlp(pyramid_pool(image_map, scale))
            t_fused, i_fused = cross(text, pooled)
            text_branches.append(t_fused)
            image_branches.append(
                F.interpolate(i_fused, size=(h, w), mode="bilinear", align_corners=False)
            )

        text_delta = self.text_reduce(torch.cat(text_branches, dim=-1))
        image_cat = torch.cat(image_branches, dim=-3).movedim(-3, -1)
        image_delta = self.image_reduce(image_cat).movedim(-1, -3)
        text_out = text + text_delta
        image_out = image_map + image_delta
        if single:
            return text_out[0], image_out[0]
        return text_out, image_out
