"""Shared oracles and fixtures."""

import numpy as np
import pytest


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function over every entry."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def fd_gradient_at(f, x: np.ndarray, indices, h: float = 1e-6) -> np.ndarray:
    """Central differences at selected flat indices only."""
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.abs(want).max(initial=0.0)), 1e-8)
    return float(np.abs(got - want).max(initial=0.0)) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(42)
