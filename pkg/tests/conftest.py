import numpy as np
import pytest

from bam import config as C
from bam import harness


def central_diff(f, x, idx, h=1e-6):
    """Central finite difference of scalar ``f()`` w.r.t. ``x[idx]`` (modified in place and restored)."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return C.TrainConfig(
        train_sizes=("BIG-A:400", "SMALL-A:100", "MED-B:200", "REG-C:200"),
        dev_size=200,
        epochs=2.0,
        teacher_epochs=1.0,
        teacher_alphas=(1.0,),
        hidden=(16, 16),
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    return harness.load_datasets(tiny_config)


# acceptance verdicts, printed at the end of the session
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
