"""Named, order-independent random streams.

Every source of randomness in the project (dataset synthesis, parameter
init, token masking, batch shuffling, probe training) draws from its own
stream, derived from ``(master_seed, stream_name)`` by hashing.  Streams
are therefore independent of call order and of which optional model parts
exist, which is what makes "flag off" runs bit-identical to baselines.

Stream names in use:

=====================  ====================================================
``dataset.train``      training-set scene synthesis
``dataset.val``        validation-set scene synthesis
``init.<param_name>``  one stream per model parameter tensor
``mask.e<E>.s<ID>``    token masking for sample ID in epoch E
``shuffle.e<E>``       batch order in epoch E
``probe``              linear-probe init and its pair shuffling
=====================  ====================================================
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

__all__ = ["stream_seed", "numpy_rng", "torch_generator"]


def stream_seed(master_seed: int, name: str) -> int:
    """Derive a 63-bit seed for the stream `name` under `master_seed`."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def numpy_rng(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, name))


def torch_generator(master_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(master_seed, name))
    return gen
