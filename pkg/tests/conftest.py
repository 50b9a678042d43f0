import numpy as np
import pytest

from dc3.problems import QpFamily, generate_qp_family


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_qp():
    return generate_qp_family(0, 10, 5, 5, "quadratic")


@pytest.fixture(scope="session")
def small_sine():
    return generate_qp_family(0, 10, 5, 5, "sine")


def tiny_family(A, G, h_rhs, q=None, p=None, kind="quadratic", part=None, dep=None):
    """Hand-built QP family; by default the last ``n_eq`` columns are dependent."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n_eq, n = A.shape
    G = np.asarray(G, dtype=np.float64).reshape(-1, n)
    q = np.zeros(n) if q is None else q
    p = np.zeros(n) if p is None else p
    part = np.arange(n - n_eq) if part is None else part
    dep = np.arange(n - n_eq, n) if dep is None else dep
    return QpFamily(q, p, A, G, np.asarray(h_rhs, dtype=np.float64), np.linalg.pinv(A), part, dep, kind=kind)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (long-running)")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
