import numpy as np
import pytest

from churnlab.nn import MLPConfig, init_network


def central_diff(f, theta, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def small_net():
    return init_network(MLPConfig((3, 5, 4, 2), activation="tanh"), seed=7)


def linear_net(w, b=None):
    """Single-layer scalar linear model ``f(x) = w . x + b``."""
    w = np.asarray(w, dtype=np.float64)
    net = init_network(MLPConfig((w.size, 1)), seed=0)
    params = np.concatenate([w, [0.0 if b is None else b]])
    net.set_params(params)
    return net


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict: ``criterion(n, ok, detail)``."""
    def record(n, ok, detail=""):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
