import numpy as np
import pytest

ACCEPTANCE_LINES = []


def central_difference(f, x, h=1e-5):
    """Central finite differences of a scalar or vector valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        cols.append((np.asarray(f(x + e), dtype=float) - np.asarray(f(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-9):
    """``|a - n| <= rtol * (|n| + max|n|) + atol``: relative error with a floor at the gradient scale."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    np.testing.assert_array_less(np.abs(analytic - numeric), rtol * (np.abs(numeric) + scale) + atol)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
