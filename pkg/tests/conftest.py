import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from splitguard.split_runtime import CutPoint, FeatureDataset


def low_rank_features(n, d=64, rank=4, seed=0, noise=0.05):
    """Nonnegative features lying near a ``rank``-dimensional manifold (a stand-in for cut activations)."""
    basis = np.random.default_rng(1234).normal(size=(rank, d))
    z = np.random.default_rng(seed).normal(size=(n, rank))
    x = np.maximum(z @ basis, 0) + noise * np.random.default_rng(seed + 1).normal(size=(n, d))
    return FeatureDataset(CutPoint("deep", 8, (d,)), x, labels=np.zeros(n, dtype=int))


@pytest.fixture(scope="session")
def lr_train():
    return low_rank_features(600, seed=0)


@pytest.fixture(scope="session")
def lr_test():
    return low_rank_features(200, seed=50)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines
    verdicts = lines()
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
