import numpy as np
import pytest

from dadvi.model import QuadraticModel, bradley_terry_synthetic, instantiate_hierarchical, random_spd


def central_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def directional_hvp(grad, x, v, h=1e-5):
    return (grad(x + h * v) - grad(x - h * v)) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


def builtin_models():
    return {
        "quadratic": QuadraticModel(random_spd(6, 50.0, 1), np.arange(6.0) / 3),
        "quadratic-1d": QuadraticModel([[1.0]], [0.0]),
        "hierarchical": instantiate_hierarchical(8, 0),
        "bradley-terry": bradley_terry_synthetic(5, 10, 0),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(k, label, ok, detail, elapsed):
    """Store and print one acceptance line; the terminal summary repeats them."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {k} ({label}): {detail} [{elapsed:.1f}s]"
    ACCEPTANCE.setdefault(k, []).append((ok, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        for _, line in ACCEPTANCE[k]:
            terminalreporter.write_line(line)
