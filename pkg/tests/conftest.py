import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_qp(rng, n=6, p=8, m=0, strict=True):
    """Random strictly convex QP with a strictly feasible point at the origin."""
    M = rng.normal(size=(n, n))
    Q = M @ M.T / n + (0.5 * np.eye(n) if strict else 0.0)
    c = rng.normal(size=n) * 3.0
    G = rng.normal(size=(p, n))
    h = rng.uniform(0.2, 1.0, size=p)
    A = rng.normal(size=(m, n)) if m else None
    b = A @ rng.normal(size=n) * 0.1 if m else None
    return Q, c, A, b, G, h


# one (criterion, passed, detail) entry per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def report_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
