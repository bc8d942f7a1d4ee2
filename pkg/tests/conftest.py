import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from feccm.harness import SyntheticConfig, generate_synthetic  # noqa: E402
from feccm.tasks import CATEGORICAL, REGRESSION, TaskSpec  # noqa: E402


@pytest.fixture
def two_specs():
    return (TaskSpec(1, "scene", CATEGORICAL, 2, n_classes=3), TaskSpec(2, "depth", REGRESSION, 3))


@pytest.fixture(scope="session")
def small_problem():
    """Three tasks (K=3, K=2, regression), disjoint labels, 80 training samples per task."""
    return generate_synthetic(SyntheticConfig(train_per_task=80, test_per_task=60, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
