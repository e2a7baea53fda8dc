"""Shared input-validation helpers.

Small checks raising ValueError with a message that names the offending
argument, used across the data, loss, and model layers.
"""

from __future__ import annotations

import numpy as np
import torch


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def check_probability(value: float, name: str) -> float:
    if not 0 < value <= 1:
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return value


def check_same_shape(a, b, names=("a", "b")) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"shape mismatch: {names[0]} has {tuple(a.shape)}, "
            f"{names[1]} has {tuple(b.shape)}"
        )


def check_binary_mask(mask) -> None:
    vals = np.unique(np.asarray(mask))
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("mask must be binary (0/1 entries)")


def check_unit_interval_point(point, name: str) -> None:
    arr = np.asarray(point, dtype=float)
    if arr.shape != (2,) or not ((arr >= 0) & (arr <= 1)).all():
        raise ValueError(f"{name} must be two coordinates inside [0, 1]^2, got {point!r}")


def check_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return tensor
