import numpy as np
import pytest

from tilemoe.core import ExpertWeights, MoEConfig, seeded_rng

ACCEPTANCE_LINES: list[str] = []


def make_problem(cfg: MoEConfig, seed: int):
    X = seeded_rng(seed, "test-inputs").generator(0).standard_normal((cfg.T, cfg.d))
    return X, ExpertWeights.random(cfg, seed)


@pytest.fixture
def tiny_cfg():
    return MoEConfig(T=8, d=4, n=2, E=4, K=2, M_tile=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
