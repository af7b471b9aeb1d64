import numpy as np
import pytest

from formation_lab.env import EnvConfig
from formation_lab.policy import PolicyArch


@pytest.fixture
def tiny_arch():
    """Small widths keep graph math checks fast; ratios match the full net."""
    return PolicyArch(n_max=3, message_dim=8, hidden_dim=8, heads=2)


@pytest.fixture
def full_arch():
    return PolicyArch()


@pytest.fixture
def env_config():
    return EnvConfig(n_active=5, obs_radius=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
