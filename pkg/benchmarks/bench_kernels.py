"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on identical inputs under both backends; the script checks
the outputs are bit-identical and prints the best-of-N wall time per call.
"""
import argparse
import timeit

import numpy as np

from fedwire import _kernels_py

try:
    from fedwire import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    probs = rng.random(2000)
    n, d, e, b = 400, 32, 20, 32
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    ylab = np.where(y >= 0, 1.0, -1.0)
    idx = rng.integers(0, n, size=(e, b)).astype(np.int64)
    etas = np.full(e, 0.01)
    w0 = rng.normal(size=d)
    return {
        "poisson_binomial_pmf (N=2000)": lambda m: np.asarray(m.poisson_binomial_pmf(probs)),
        "ridge_sgd (d=32, E=20, b=32)": lambda m: _sgd(m.ridge_sgd, w0, X, y, idx, etas),
        "logistic_sgd (d=32, E=20, b=32)": lambda m: _sgd(m.logistic_sgd, w0, X, ylab, idx, etas),
    }


def _sgd(fn, w0, X, y, idx, etas):
    w = w0.copy()
    fn(w, X, y, idx, etas, 0.1)
    return w


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python':>12s} {'cython':>12s} {'speedup':>8s}")
    for name, run in cases(rng).items():
        t_py = min(timeit.repeat(lambda: run(_kernels_py), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{name:34s} {t_py * 1e3:10.3f}ms {'-':>12s} {'-':>8s}")
            continue
        assert run(_kernels_py).tobytes() == run(_kernels).tobytes(), name
        number = 50
        t_c = min(timeit.repeat(lambda: run(_kernels), number=number, repeat=args.repeat)) / number
        print(f"{name:34s} {t_py * 1e3:10.3f}ms {t_c * 1e3:10.4f}ms {t_py / t_c:7.0f}x")


if __name__ == "__main__":
    main()
