import numpy as np
import pytest

from dkfac import _accel

BACKENDS = ["numpy", "numba"] if _accel.HAVE_NUMBA else ["numpy"]

# filled by tests/test_acceptance.py, printed in the terminal summary
ACCEPTANCE = {}


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def spd(rng, n, shift=0.1):
    x = rng.standard_normal((n, n + 2))
    return x @ x.T / (n + 2) + shift * np.eye(n)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
