import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from curricubench.backbone import BackboneConfig
from curricubench.data import PhantomConfig, PhantomMode, gen_phantom

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    yield


@pytest.fixture
def small_config():
    return BackboneConfig(stage_widths=(4, 8), blocks_per_stage=1)


@pytest.fixture(scope="session")
def tiny_phantom():
    return gen_phantom(PhantomConfig(n_samples=40, side=32, mode=PhantomMode.SIGNAL_OUT_LUNG, seed=3))


def rng(seed=0):
    return np.random.default_rng(seed)
