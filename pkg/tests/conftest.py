import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def img8(rng):
    """Seeded interior 8x8 image (away from the clamp boundaries)."""
    return rng.uniform(0.1, 0.9, size=(3, 8, 8)).astype(np.float32)


@pytest.fixture
def img32():
    return np.random.default_rng(99).uniform(0.05, 0.95, size=(3, 32, 32)).astype(np.float32)


def rel_l2(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


ACCEPTANCE = []  # one PASS/FAIL line per acceptance criterion, filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
