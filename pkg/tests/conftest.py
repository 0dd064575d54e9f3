"""Shared fixtures and the end-of-run acceptance summary."""

import numpy as np
import pytest

from tvdensity.model import LogSplineProblem
from tvdensity.solvers import kkt_residual

# populated by tests/test_acceptance.py; printed after the run so the
# one-line verdicts survive pytest's output capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance summary")
    for num in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[num])


@pytest.fixture
def rng():
    return np.random.default_rng(20240823)


def assert_kkt(problem: LogSplineProblem, fit, config, slack=10.0):
    """Subgradient optimality at the returned solution.

    The minimum-norm subgradient of the penalized objective must be below
    ``slack * kkt_tol * n`` (per-observation scale times the stopping
    tolerance, with headroom for the final accepted step).
    """
    _, grad = problem.value_and_grad(fit.beta)
    lam_vec = np.full(problem.num_cols, fit.penalty)
    if not config.penalize_parametric:
        lam_vec[: problem.spec.num_parametric] = 0.0
    res = kkt_residual(grad, fit.beta, lam_vec)
    bound = slack * config.kkt_tol * problem.n
    assert res < bound, f"kkt residual {res:.3e} above {bound:.3e}"
    return res
