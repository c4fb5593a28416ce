"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``FEDWIRE_PURE_PYTHON=1``
to force the pure-Python twins. Both backends return identical floats.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("FEDWIRE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def poisson_binomial_pmf(probs) -> np.ndarray:
    return _impl.poisson_binomial_pmf(np.ascontiguousarray(probs, dtype=np.float64))


def _prep(w, X, y, idx, etas):
    w = np.array(w, dtype=np.float64)  # copy; kernels work in place
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    etas = np.ascontiguousarray(etas, dtype=np.float64)
    if idx.ndim != 2 or etas.shape[0] != idx.shape[0]:
        raise ValueError("need one learning rate per row of batch indices")
    return w, X, y, idx, etas


def ridge_sgd(w, X, y, idx, etas, lam: float) -> np.ndarray:
    w, X, y, idx, etas = _prep(w, X, y, idx, etas)
    if idx.shape[1]:
        _impl.ridge_sgd(w, X, y, idx, etas, float(lam))
    else:
        # no samples: only the regulariser acts
        for eta in etas:
            w = w - eta * (lam * w)
    return w


def logistic_sgd(w, X, y, idx, etas, lam: float) -> np.ndarray:
    w, X, y, idx, etas = _prep(w, X, y, idx, etas)
    if idx.shape[1]:
        _impl.logistic_sgd(w, X, y, idx, etas, float(lam))
    else:
        for eta in etas:
            w = w - eta * (lam * w)
    return w
