import numpy as np
import pytest

from lpvtune.controller import demo_structure
from lpvtune.frf import FrequencyGrid
from lpvtune.plant import demo_plant, sample_frf_set


@pytest.fixture(scope="session")
def lti_frfs():
    """Default 2x2 demo plant, one local FRF on 400 points."""
    grid = FrequencyGrid.logspace(1.0, 1e4, 400)
    return sample_frf_set(demo_plant(lpv=False), grid, np.zeros((1, 0)))


@pytest.fixture(scope="session")
def lpv_frfs():
    grid = FrequencyGrid.logspace(1.0, 1e4, 300)
    return sample_frf_set(demo_plant(lpv=True), grid, np.linspace(-1, 1, 5)[:, None])


@pytest.fixture
def demo_ctrl():
    return demo_structure(2)


_ACCEPTANCE: list = []


@pytest.fixture
def verdict_line():
    """Print one pass/fail line per acceptance criterion and keep it for the summary."""

    def emit(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
