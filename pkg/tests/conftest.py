import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hdgcm.model import GrowthCurveDataset

settings.register_profile(
    "deterministic", derandomize=True, max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("deterministic")


def random_dataset(rng, N=6, R=4, T=3, p=1, q=1, scale=1.0):
    """Small dataset with distinct per-subject time values."""
    g = np.sort(rng.uniform(0.0, 1.0, size=(N, T)), axis=1)
    return GrowthCurveDataset(
        scale * rng.standard_normal((N, R, T)), g,
        rng.standard_normal((N, p)), rng.standard_normal((N, T, q)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
