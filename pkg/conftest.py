"""
Shared pytest fixtures
"""
import os

import numpy as np
import pytest

from model import DataCenterConfig, PriceSchedule
from solver import ModeModel

ROOT = os.path.dirname(os.path.abspath(__file__))
CONFIG_DIR = os.path.join(ROOT, "configs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: benchmark-size tests (deselect with -m 'not slow')")


@pytest.fixture
def make_cfg():
    """Factory for small configurations with constant linear prices"""
    def make(servers, rates, mask=None, weights=None, energy=1.0, switch_on=1.0, switch_off=1.0,
             types=None, horizon=1, curves=None):
        servers = np.asarray(servers, dtype=int)
        B = servers.size
        mask = np.eye(B, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        J = mask.shape[1]
        weights = np.ones(J) if weights is None else weights

        def table(value):
            return np.tile(np.broadcast_to(np.asarray(value, dtype=float), (B,)), (horizon, 1))

        price = PriceSchedule(table(energy), table(switch_on), table(switch_off), curves)
        return DataCenterConfig(servers, np.arange(B) if types is None else types, rates, mask, weights, price)
    return make


@pytest.fixture
def make_model():
    """Factory for mode models from a nominal chain, its interval bounds and emissions"""
    def make(support, emission, nominal, lo=None, hi=None):
        return ModeModel.from_matrices(np.asarray(support, dtype=float), emission, nominal, lo, hi)
    return make


@pytest.fixture
def single_block(make_cfg, make_model):
    """One block of three servers; only x = 0 is capacity-infeasible"""
    cfg = make_cfg([3], [2.0], energy=1.0, switch_on=1.5, switch_off=0.5)
    nominal = np.array([[0.7, 0.3], [0.2, 0.8]])
    model = make_model([[0.5], [1.5]], [[0.8, 0.2], [0.1, 0.9]], nominal,
                       np.clip(nominal - 0.1, 0, 1), np.clip(nominal + 0.1, 0, 1))
    return cfg, model


@pytest.fixture
def two_blocks(make_cfg, make_model):
    """Two blocks, two classes, shared second class"""
    cfg = make_cfg([2, 2], [1.0, 1.5], mask=[[True, True], [False, True]], energy=[1.0, 1.2],
                   switch_on=[2.0, 1.0], switch_off=[0.5, 0.5])
    nominal = np.array([[0.6, 0.4], [0.3, 0.7]])
    model = make_model([[0.2, 0.3], [0.6, 0.9]], [[0.7, 0.3], [0.2, 0.8]], nominal,
                       np.clip(nominal - 0.05, 0, 1), np.clip(nominal + 0.05, 0, 1))
    return cfg, model


@pytest.fixture
def benchmark_config_path():
    return os.path.join(CONFIG_DIR, "datacenter_4block.toml")


@pytest.fixture
def synthetic_model_path():
    return os.path.join(CONFIG_DIR, "synthetic_modes.toml")
