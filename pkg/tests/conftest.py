import numpy as np
import pytest
import torch

from ns3d.layers import set_precision


@pytest.fixture
def f64():
    """Run the test in double-precision verification mode."""
    set_precision("f64")
    yield
    set_precision("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
