import numpy as np
import pytest

from beatsync.config import ExperimentConfig
from beatsync.core import FS_PER_S

ACCEPTANCE_LINES: list[str] = []


def periodic_tags(period: float, n: int, start: int = 0) -> np.ndarray:
    """Tags at ``start + j * period`` rounded half to even, computed exactly in integers."""
    num, den = float(period).as_integer_ratio()
    whole, part = divmod(num, den)
    if n * part >= 2**62:
        raise ValueError("period too finely resolved for exact int64 arithmetic")
    j = np.arange(n, dtype=np.int64)
    q, r = np.divmod(j * part, den)
    q += (2 * r > den) | ((2 * r == den) & (q % 2 == 1))
    return start + j * whole + q


@pytest.fixture
def base_config() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture
def tau_20mhz() -> float:
    return FS_PER_S / 20e6


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
