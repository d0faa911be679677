import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from synclab.flowcore import VelocityField, frozen_copy  # noqa: E402
from synclab.toyworld import make_dataset  # noqa: E402


def small_model(seed=0, state_dim=8, cond_dim=2, hidden=12, time_dim=4, dtype=torch.float64):
    """A ~500-parameter velocity field for finite-difference checks."""
    torch.manual_seed(seed)
    return VelocityField(state_dim, cond_dim, hidden, time_dim, depth=2).to(dtype)


def perturbed_copy(model, scale=0.1, seed=1):
    other = frozen_copy(model)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in other.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return other


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    make_dataset(7, 64, path)
    return path


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, passed, detail, capsys=None):
    """Log one PASS/FAIL line for an acceptance criterion (echoed live and in the summary)."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
