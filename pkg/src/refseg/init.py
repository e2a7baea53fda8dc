"""Deterministic, name-keyed parameter initialization.

Every parameter tensor is filled from its own random stream derived from
``(master_seed, qualified parameter name)``.  Because no global generator
advances, adding or removing optional submodules (fusion blocks, the
grounding head) cannot shift the init of anything else -- a model with a
feature disabled has bit-identical shared weights to the full model.

Modules can opt into zero initialization (gates, readout heads that must
start as no-ops) by setting ``zero_init = True`` on themselves.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .seeds import stream_seed


def _fill(param: torch.Tensor, seed: int, kind: str) -> None:
    gen = torch.Generator()
    gen.manual_seed(seed)
    with torch.no_grad():
        if kind == "zero":
            param.zero_()
        elif kind == "one":
            param.fill_(1.0)
        elif kind == "embedding":
            param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * 0.02)
        elif kind == "fan_in":
            fan_in = math.prod(param.shape[1:])
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            uni = torch.rand(param.shape, generator=gen, dtype=param.dtype)
            param.copy_((uni * 2 - 1) * bound)
        else:
            raise ValueError(kind)


def _kind_for(module: nn.Module, param_name: str) -> str:
    if getattr(module, "zero_init", False):
        return "zero"
    if isinstance(module, nn.Embedding):
        return "embedding"
    if isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
        return "one" if param_name == "weight" else "zero"
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        return "fan_in" if param_name == "weight" else "zero"
    # bare nn.Parameter holders (e.g. position tables)
    return "embedding" if param_name.endswith("embedding") else "fan_in"


def initialize_parameters(root: nn.Module, master_seed: int, scope: str = "model") -> None:
    """Initialize all parameters of `root` from name-keyed streams."""
    owner: dict[str, tuple[nn.Module, str]] = {}
    for mod_name, module in root.named_modules():
        for param_name, _ in module.named_parameters(recurse=False):
            full = f"{mod_name}.{param_name}" if mod_name else param_name
            owner[full] = (module, param_name)
    for full_name, param in root.named_parameters():
        module, param_name = owner[full_name]
        kind = _kind_for(module, param_name)
        _fill(param, stream_seed(master_seed, f"init.{scope}.{full_name}"), kind)
