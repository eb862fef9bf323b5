import numpy as np
import pytest

from pseudoglmm.moments import ClusterData

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_cluster(rng, n, p=3, cluster_id="c", binary_cols=(), beta=None, u=0.0):
    """Random cluster with standard normal predictors and a logistic response."""
    X = rng.normal(size=(n, p))
    for j in binary_cols:
        X[:, j] = (rng.random(n) < 0.4).astype(float)
        X[0, j], X[1, j] = 0.0, 1.0  # keep the column non-constant
    beta = np.zeros(p + 1) if beta is None else np.asarray(beta, dtype=float)
    eta = beta[0] + X @ beta[1:] + u
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    if n >= 2 and y.min() == y.max():
        y[0] = 1 - y[0]
    return ClusterData(cluster_id, y, X)
