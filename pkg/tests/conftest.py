import numpy as np
import pytest


def fd_grad(f, theta, idx, h=1e-6):
    """Central differences of scalar ``f`` at ``theta`` for coordinates ``idx``."""
    out = []
    for i in idx:
        tp = theta.copy()
        tp[i] += h
        fp = f(tp)
        tp[i] -= 2 * h
        fm = f(tp)
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
