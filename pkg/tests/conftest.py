import numpy as np
import pytest

from nsync.model import DenoiserConfig
from nsync.styleworld import WorldConfig
from nsync.trainer import PretrainConfig, pretrain_base

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def tiny_base(world):
    """Barely trained base model; cheap, for plumbing tests."""
    model, data, _ = pretrain_base(
        world, DenoiserConfig(d_hidden=32), PretrainConfig(steps=200, batch_size=32, n_per_style=40)
    )
    return model


@pytest.fixture(scope="session")
def small_base(world):
    """A few seconds of pretraining: good enough for distributional checks."""
    model, data, _ = pretrain_base(
        world, DenoiserConfig(d_hidden=128), PretrainConfig(steps=3000, batch_size=64, n_per_style=100)
    )
    return model, data


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")
