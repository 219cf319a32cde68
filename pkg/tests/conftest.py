import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nanocool import presets

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, filled by tests/test_acceptance.py
CRITERIA = {}


def record(number: int, passed: bool, detail: str):
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def published_system():
    return presets.published_system(1.2)


@pytest.fixture(scope="session")
def undamped_system():
    return presets.published_system(1.2, gamma=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
