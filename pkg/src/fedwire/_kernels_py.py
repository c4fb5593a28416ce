"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Loops and accumulation order match the Cython source exactly so both backends
produce identical floats. Do not "simplify" these into numpy expressions.
"""
from __future__ import annotations

import math

import numpy as np


def poisson_binomial_pmf(probs):
    n = len(probs)
    pmf = [0.0] * (n + 1)
    pmf[0] = 1.0
    for k in range(n):
        p = float(probs[k])
        q = 1.0 - p
        j = k + 1
        while j > 0:
            pmf[j] = pmf[j] * q + pmf[j - 1] * p
            j -= 1
        pmf[0] = pmf[0] * q
    return np.array(pmf, dtype=np.float64)


def ridge_sgd(w, X, y, idx, etas, lam):
    wl = w.tolist()
    rows = X.tolist()
    ys = y.tolist()
    d = len(wl)
    b = idx.shape[1]
    bd = float(b)
    for e, batch in enumerate(idx.tolist()):
        eta = float(etas[e])
        g = [0.0] * d
        for j in batch:
            x = rows[j]
            r = -ys[j]
            for i in range(d):
                r = r + x[i] * wl[i]
            for i in range(d):
                g[i] = g[i] + r * x[i]
        for i in range(d):
            wl[i] = wl[i] - eta * (g[i] / bd + lam * wl[i])
    w[:] = wl


def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def logistic_sgd(w, X, y, idx, etas, lam):
    wl = w.tolist()
    rows = X.tolist()
    ys = y.tolist()
    d = len(wl)
    bd = float(idx.shape[1])
    for e, batch in enumerate(idx.tolist()):
        eta = float(etas[e])
        g = [0.0] * d
        for j in batch:
            x = rows[j]
            m = 0.0
            for i in range(d):
                m = m + x[i] * wl[i]
            m = m * ys[j]
            coef = -ys[j] * _sigmoid(-m)
            for i in range(d):
                g[i] = g[i] + coef * x[i]
        for i in range(d):
            wl[i] = wl[i] - eta * (g[i] / bd + lam * wl[i])
    w[:] = wl
