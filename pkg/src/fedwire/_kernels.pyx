# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.

Every loop here has a line-for-line twin in ``_kernels_py``. Floating-point
operations happen in the same order in both, and the extension is built with
``-ffp-contract=off``, so the two backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def poisson_binomial_pmf(const double[::1] probs):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t k, j
    cdef double p, q
    out = np.zeros(n + 1, dtype=np.float64)
    cdef double[::1] pmf = out
    pmf[0] = 1.0
    with nogil:
        for k in range(n):
            p = probs[k]
            q = 1.0 - p
            j = k + 1
            while j > 0:
                pmf[j] = pmf[j] * q + pmf[j - 1] * p
                j -= 1
            pmf[0] = pmf[0] * q
    return out


def ridge_sgd(double[::1] w, const double[:, ::1] X, const double[::1] y,
              const long long[:, ::1] idx, const double[::1] etas, double lam):
    """In-place minibatch SGD on the ridge loss; ``idx`` rows are per-step batches."""
    cdef Py_ssize_t steps = idx.shape[0], b = idx.shape[1], d = w.shape[0]
    cdef Py_ssize_t e, jj, i, j
    cdef double r, eta, bd = <double>b
    g_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] g = g_arr
    with nogil:
        for e in range(steps):
            eta = etas[e]
            for i in range(d):
                g[i] = 0.0
            for jj in range(b):
                j = idx[e, jj]
                r = -y[j]
                for i in range(d):
                    r = r + X[j, i] * w[i]
                for i in range(d):
                    g[i] = g[i] + r * X[j, i]
            for i in range(d):
                w[i] = w[i] - eta * (g[i] / bd + lam * w[i])


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def logistic_sgd(double[::1] w, const double[:, ::1] X, const double[::1] y,
                 const long long[:, ::1] idx, const double[::1] etas, double lam):
    """In-place minibatch SGD on l2-regularised logistic loss, labels in {-1, +1}."""
    cdef Py_ssize_t steps = idx.shape[0], b = idx.shape[1], d = w.shape[0]
    cdef Py_ssize_t e, jj, i, j
    cdef double m, coef, eta, bd = <double>b
    g_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] g = g_arr
    with nogil:
        for e in range(steps):
            eta = etas[e]
            for i in range(d):
                g[i] = 0.0
            for jj in range(b):
                j = idx[e, jj]
                m = 0.0
                for i in range(d):
                    m = m + X[j, i] * w[i]
                m = m * y[j]
                coef = -y[j] * _sigmoid(-m)
                for i in range(d):
                    g[i] = g[i] + coef * X[j, i]
            for i in range(d):
                w[i] = w[i] - eta * (g[i] / bd + lam * w[i])
