import pytest
import torch

from ssmrecall.ssm import ModelConfig, SelectiveSSM

TINY = ModelConfig(n_layers=2, d_model=16, d_inner=32, d_state=4, d_conv=4)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return SelectiveSSM(TINY, seed=3).eval()


@pytest.fixture
def tiny_model64():
    """Same weights in float64, for exact comparisons."""
    return SelectiveSSM(TINY, seed=3).double().eval()
