import numpy as np
import pytest


def central_diff(fn, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of an ndarray."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = fn(x)
        flat[k] = old - h
        down = fn(x)
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    """Norm-wise relative error, with a floor so all-zero gradients compare absolutely."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
