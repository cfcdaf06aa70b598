"""Compiled inner loops for the memory-bound backward passes.

Only non-transcendental fusions live here; numpy's vectorized exp/erf beat
numba's scalar calls, so exp-heavy forwards stay in numpy.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def softmax_backward_2d(a: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    """out = a * (g - rowsum(a * g)), fused to one pass over each row."""
    rows, cols = a.shape
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += a[i, j] * g[i, j]
        for j in range(cols):
            out[i, j] = a[i, j] * (g[i, j] - dot)


@njit(cache=True, fastmath=True)
def layernorm_forward_2d(x, gamma, beta, eps, out, xhat, inv):
    """Row-wise normalization; writes out, xhat and 1/std for the backward."""
    rows, cols = x.shape
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            d = x[i, j] - mu
            var += d * d
        var /= cols
        iv = 1.0 / np.sqrt(var + eps)
        inv[i] = iv
        for j in range(cols):
            h = (x[i, j] - mu) * iv
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]


@njit(cache=True, fastmath=True)
def layernorm_backward_2d(g, xhat, inv, gamma, dx, dgamma, dbeta):
    """Accumulates dgamma/dbeta and writes dx in one fused pass."""
    rows, cols = g.shape
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            gi = g[i, j]
            h = xhat[i, j]
            dgamma[j] += gi * h
            dbeta[j] += gi
            dh = gi * gamma[j]
            m1 += dh
            m2 += dh * h
        m1 /= cols
        m2 /= cols
        iv = inv[i]
        for j in range(cols):
            dx[i, j] = iv * (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
