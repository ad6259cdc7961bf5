import numpy as np
import pytest
import torch

from trangcn.config import TrainConfig
from trangcn.data import generate_synthetic
from trangcn.model import build_model
from trangcn.training import default_arch, train_stagewise


@pytest.fixture(scope="session")
def easy_data():
    return generate_synthetic(8, 16, (64, 32), 3, "easy")


@pytest.fixture(scope="session")
def easy_run(easy_data):
    """One default-schedule training run on the easy set, shared by the slow tests."""
    arch = default_arch(easy_data)
    params, tlog = train_stagewise(TrainConfig(seed=0), easy_data, arch)
    return arch, params, tlog, build_model(arch, params)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
