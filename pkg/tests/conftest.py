import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_rng():
    gen = torch.Generator()
    gen.manual_seed(99)
    return gen


def randn64(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)
