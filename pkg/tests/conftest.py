import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_ACCEPTANCE = {}


class AcceptanceLog:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def record(self, number, title, passed, detail=""):
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
