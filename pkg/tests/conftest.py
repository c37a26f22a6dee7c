"""Shared oracles and helpers.

The oracles here are deliberately naive re-implementations (triple loops,
straight-line gate equations, central finite differences) kept independent
of the library code paths they check.
"""

import numpy as np
import pytest

from sgrnn.numerics import SeededRng


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entry-by-entry triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_oracle(p, x, h, c):
    """Straight-line evaluation of the six LSTM equations from per-gate views."""
    i = sig(x @ p.W_i.T + h @ p.U_i.T + p.b_i)
    f = sig(x @ p.W_f.T + h @ p.U_f.T + p.b_f)
    o = sig(x @ p.W_o.T + h @ p.U_o.T + p.b_o)
    g = np.tanh(x @ p.W_c.T + h @ p.U_c.T + p.b_c)
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def gru_oracle(p, x, h):
    """Straight-line GRU: update gate z retains the previous state as z -> 1."""
    z = sig(x @ p.W_z.T + h @ p.U_z.T + p.b_z)
    r = sig(x @ p.W_r.T + h @ p.U_r.T + p.b_r)
    g = np.tanh(x @ p.W_c.T + (r * h) @ p.U_c.T + p.b_c)
    return z * h + (1.0 - z) * g


def vanilla_oracle(p, x, h):
    return np.tanh(x @ p.W.T + h @ p.U.T + p.b)


def finite_diff(loss_fn, theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss over a flat parameter vector."""
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += eps
        dn = theta.copy()
        dn[i] -= eps
        grad[i] = (loss_fn(up) - loss_fn(dn)) / (2.0 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return SeededRng(12345)
