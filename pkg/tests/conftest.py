import numpy as np
import pytest


def central_diff(f, theta, h=1e-6, idx=None):
    """Finite-difference gradient of scalar ``f`` at ``theta`` (optionally only at ``idx``)."""
    theta = np.asarray(theta, dtype=np.float64)
    idx = range(theta.size) if idx is None else idx
    out = np.zeros(theta.size)
    for i in idx:
        e = np.zeros_like(theta)
        e.flat[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
