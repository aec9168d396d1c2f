import time

import numpy as np
import pytest

from ndopt.data_io import SyntheticSpec, gen_longtail_gaussians

SESSION_BUDGET_S = 300.0
_start = {}
# (number, line) pairs filled by the acceptance suite, printed in the summary
ACCEPTANCE_LINES = []


def pytest_sessionstart(session):
    _start["t"] = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _start.get("t", time.perf_counter())
    _start["elapsed"] = elapsed
    if elapsed >= SESSION_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    elapsed = _start.get("elapsed", time.perf_counter() - _start.get("t", time.perf_counter()))
    terminalreporter.section("acceptance")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
    terminalreporter.write_line(
        f"[13] full suite wall time {elapsed:.1f}s (budget {SESSION_BUDGET_S:.0f}s): "
        f"{'PASS' if elapsed < SESSION_BUDGET_S else 'FAIL'}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_bundle():
    return gen_longtail_gaussians(SyntheticSpec(k=4, d=6, n1=200, rho_l=20, rho_u=20,
                                                m1=300, sep=3.0, seed=3, n_val=30, n_test=30))
