import numpy as np
import pytest
import torch

from ldmic.model import LDMIC, ModelConfig

torch.set_num_threads(1)


def tiny_model(variant="ldmic", M=8, N=4, seed=0):
    torch.manual_seed(seed)
    model = LDMIC(ModelConfig(M=M, N=N, variant=variant))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_views(rng, k=2, size=64):
    return [rng.random((size, size, 3)).astype(np.float32) for _ in range(k)]
