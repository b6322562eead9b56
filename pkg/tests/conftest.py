import numpy as np
import pytest

from helpers import fill_buffer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pendulum_buffer():
    return fill_buffer()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
