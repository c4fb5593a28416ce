"""FedAvg mechanics on strongly convex objectives.

Model vectors are plain 1-D float64 numpy arrays. Two task families are
supported, both l2-regularised so every client objective is strongly convex:

* ``ridge-quadratic``: per-sample loss 0.5*(x.w - y)^2 + 0.5*lam*|w|^2
* ``l2-logistic``: per-sample loss log(1 + exp(-y x.w)) + 0.5*lam*|w|^2, y in {-1, +1}
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from . import kernels

TASK_KINDS = ("ridge-quadratic", "l2-logistic")
NOISE_MODES = ("none", "additive", "multiplicative")


class DimensionMismatchError(ValueError):
    pass


class NonFiniteModelError(FloatingPointError):
    pass


def as_model(w, dim: int | None = None) -> np.ndarray:
    """Validate and copy a model vector."""
    w = np.array(w, dtype=np.float64).reshape(-1)
    if dim is not None and w.shape[0] != dim:
        raise DimensionMismatchError(f"expected dimension {dim}, got {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise NonFiniteModelError("model has non-finite coordinates")
    return w


@dataclass
class ConvexTask:
    kind: str
    features: list[np.ndarray]
    targets: list[np.ndarray]
    lam: float
    weights: np.ndarray = None  # defaults to sample-count proportions

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unsupported task kind {self.kind!r}")
        if not self.lam > 0:
            raise ValueError("lam must be positive (strong convexity)")
        if len(self.features) != len(self.targets) or not self.features:
            raise ValueError("need matching, non-empty per-client features and targets")
        self.features = [np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64) for X in self.features]
        self.targets = [np.ascontiguousarray(y, dtype=np.float64).reshape(-1) for y in self.targets]
        dims = {X.shape[1] for X in self.features}
        if len(dims) != 1:
            raise DimensionMismatchError("clients disagree on feature dimension")
        for X, y in zip(self.features, self.targets):
            if X.shape[0] != y.shape[0]:
                raise DimensionMismatchError("feature/target row counts differ")
        if self.kind == "l2-logistic":
            for y in self.targets:
                if not np.all(np.isin(y, (-1.0, 1.0))):
                    raise ValueError("logistic labels must be -1 or +1")
        if self.weights is None:
            sizes = np.array(self.sizes, dtype=np.float64)
            total = sizes.sum()
            self.weights = sizes / total if total > 0 else np.full(len(sizes), 1.0 / len(sizes))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if (self.weights.shape != (self.n_clients,) or np.any(self.weights < 0)
                or abs(math.fsum(self.weights) - 1.0) > 1e-9):
            raise ValueError("client weights must be nonnegative and sum to 1")

    @property
    def n_clients(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [X.shape[0] for X in self.features]

    # -- per-client objective -------------------------------------------------
    def client_objective(self, k: int, w) -> float:
        w = as_model(w, self.dim)
        X, y = self.features[k], self.targets[k]
        reg = 0.5 * self.lam * float(w @ w)
        if X.shape[0] == 0:
            return reg
        z = X @ w
        if self.kind == "ridge-quadratic":
            return 0.5 * float(np.mean((z - y) ** 2)) + reg
        return float(np.mean(np.logaddexp(0.0, -y * z))) + reg

    def sample_gradients(self, k: int, w) -> np.ndarray:
        """Per-sample loss gradients (without the regulariser), one row per sample."""
        w = as_model(w, self.dim)
        X, y = self.features[k], self.targets[k]
        z = X @ w
        if self.kind == "ridge-quadratic":
            coef = z - y
        else:
            coef = -y * _sigmoid(-y * z)
        return coef[:, None] * X

    def client_gradient(self, k: int, w) -> np.ndarray:
        w = as_model(w, self.dim)
        g = self.lam * w
        if self.features[k].shape[0]:
            g = self.sample_gradients(k, w).mean(axis=0) + g
        return g

    def client_hessian(self, k: int, w=None) -> np.ndarray:
        X = self.features[k]
        d = self.dim
        s = max(X.shape[0], 1)
        if self.kind == "ridge-quadratic":
            H = X.T @ X / s
        else:
            w = np.zeros(d) if w is None else as_model(w, d)
            sig = _sigmoid(X @ w)
            H = (X * (sig * (1 - sig))[:, None]).T @ X / s
        return H + self.lam * np.eye(d)

    # -- global objective -----------------------------------------------------
    def objective(self, w) -> float:
        return math.fsum(p * self.client_objective(k, w) for k, p in enumerate(self.weights))

    def gradient(self, w) -> np.ndarray:
        return sum(p * self.client_gradient(k, w) for k, p in enumerate(self.weights))

    def client_minimizer(self, k: int) -> np.ndarray:
        return self._minimize([k], np.array([1.0]))

    def minimizer(self) -> np.ndarray:
        return self._minimize(range(self.n_clients), self.weights)

    def _minimize(self, clients, weights) -> np.ndarray:
        d = self.dim
        if self.kind == "ridge-quadratic":
            # normal equations of sum_k p_k F_k
            A = np.zeros((d, d))
            b = np.zeros(d)
            for k, p in zip(clients, weights):
                X, y = self.features[k], self.targets[k]
                s = X.shape[0]
                if s:
                    A += p * (X.T @ X) / s
                    b += p * (X.T @ y) / s
                A += p * self.lam * np.eye(d)
            return np.linalg.solve(A, b)
        clients = list(clients)

        def f(w):
            return math.fsum(p * self.client_objective(k, w) for k, p in zip(clients, weights))

        def g(w):
            return sum(p * self.client_gradient(k, w) for k, p in zip(clients, weights))

        res = optimize.minimize(f, np.zeros(d), jac=g, method="L-BFGS-B",
                                options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000})
        return res.x

    def accuracy(self, w) -> float:
        """Fraction of all samples classified correctly (logistic tasks only)."""
        if self.kind != "l2-logistic":
            raise ValueError("accuracy is only defined for l2-logistic tasks")
        w = as_model(w, self.dim)
        hits = sum(int(np.sum(np.sign(X @ w) == y)) for X, y in zip(self.features, self.targets))
        return hits / max(sum(self.sizes), 1)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def objective_value(task: ConvexTask, model) -> float:
    return task.objective(model)


def objective_grad(task: ConvexTask, model) -> np.ndarray:
    return task.gradient(model)


# -- data -----------------------------------------------------------------------
def partition_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; ties go to the lower client index."""
    ratios = [float(r) for r in ratios]
    if not ratios or any(not r > 0 for r in ratios):
        raise ValueError("ratios must be positive")
    if n == 0:
        raise ValueError("empty dataset")
    if len(ratios) > n:
        raise ValueError(f"more clients ({len(ratios)}) than samples ({n})")
    total = math.fsum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def partition_dataset(samples, ratios: Sequence[float], rng: np.random.Generator) -> list:
    """Shuffle ``samples`` (array rows or a sequence) and split by ``ratios``."""
    n = len(samples)
    sizes = partition_sizes(n, ratios)
    perm = rng.permutation(n)
    out, start = [], 0
    for s in sizes:
        take = perm[start:start + s]
        if isinstance(samples, np.ndarray):
            out.append(samples[take])
        else:
            out.append([samples[i] for i in take])
        start += s
    return out


def synthetic_task(kind: str, n_clients: int, dim: int, *, samples_per_client: int | None = None,
                   total_samples: int | None = None, ratios: Sequence[float] | None = None,
                   lam: float = 0.1, label_noise: float = 0.1, heterogeneity: float = 0.0,
                   feature_scale: float = 1.0, seed: int = 0) -> ConvexTask:
    """Generate a synthetic task.

    Features are iid Gaussian. Client ``k`` labels its data with its own
    ground-truth vector ``w_true + heterogeneity * u_k``, so heterogeneity > 0
    gives non-iid clients. With ``ratios`` a pooled sample set is shuffled and
    split by :func:`partition_dataset`; otherwise every client gets
    ``samples_per_client`` rows.
    """
    rng = np.random.default_rng(seed)
    w_true = rng.normal(0.0, 1.0, dim)
    shifts = rng.normal(0.0, 1.0, (n_clients, dim))
    if ratios is not None:
        if len(ratios) != n_clients:
            raise ValueError("one ratio per client required")
        n = total_samples if total_samples is not None else (samples_per_client or 0) * n_clients
        pool = rng.normal(0.0, feature_scale, (n, dim))
        parts = partition_dataset(pool, ratios, rng)
    else:
        if samples_per_client is None:
            raise ValueError("give samples_per_client or ratios")
        parts = [rng.normal(0.0, feature_scale, (samples_per_client, dim)) for _ in range(n_clients)]
    targets = []
    for k, X in enumerate(parts):
        wk = w_true + heterogeneity * shifts[k]
        z = X @ wk + label_noise * rng.normal(0.0, 1.0, X.shape[0])
        targets.append(z if kind == "ridge-quadratic" else np.where(z >= 0, 1.0, -1.0))
    return ConvexTask(kind, parts, targets, lam)


def save_dataset(task: ConvexTask, path: str | Path) -> None:
    """Columnar text: one row per sample, columns ``client, y, x0..x{d-1}``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "y"] + [f"x{i}" for i in range(task.dim)])
        for k, (X, y) in enumerate(zip(task.features, task.targets)):
            for row, target in zip(X, y):
                writer.writerow([k, repr(float(target))] + [repr(float(v)) for v in row])


def load_dataset(path: str | Path, kind: str, lam: float, n_clients: int | None = None) -> ConvexTask:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        rows: dict[int, list] = {}
        for line in reader:
            rows.setdefault(int(line[0]), []).append([float(v) for v in line[1:]])
    n = n_clients if n_clients is not None else (max(rows) + 1 if rows else 0)
    features, targets = [], []
    for k in range(n):
        data = np.array(rows.get(k, []), dtype=np.float64).reshape(-1, dim + 1)
        features.append(data[:, 1:])
        targets.append(data[:, 0])
    return ConvexTask(kind, features, targets, lam)


# -- training -------------------------------------------------------------------
def draw_batches(n_samples: int, e_steps: int, batch: int | None, rng: np.random.Generator) -> np.ndarray:
    """Row indices for each local step, shape (E, b).

    Mini-batches are uniform with replacement and drawn in one call; ``batch``
    None means the full local dataset at every step (no random numbers used).
    """
    if batch is None:
        return np.tile(np.arange(n_samples, dtype=np.int64), (e_steps, 1))
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if batch > n_samples:
        raise ValueError(f"batch {batch} exceeds client sample count {n_samples}")
    return rng.integers(0, n_samples, size=(e_steps, batch), dtype=np.int64)


def local_sgd(model, task: ConvexTask, client: int, e_steps: int, eta, batch: int | None,
              rng: np.random.Generator) -> np.ndarray:
    """Run ``e_steps`` mini-batch SGD steps on client ``client``'s objective.

    ``eta`` is either one rate for the whole round or a sequence with one rate
    per local step.
    """
    if e_steps < 1:
        raise ValueError("e_steps must be >= 1")
    w = as_model(model, task.dim)
    etas = np.broadcast_to(np.asarray(eta, dtype=np.float64), (e_steps,))
    if np.any(etas < 0) or not np.all(np.isfinite(etas)):
        raise ValueError("learning rates must be finite and nonnegative")
    idx = draw_batches(task.sizes[client], e_steps, batch, rng)
    kernel = kernels.ridge_sgd if task.kind == "ridge-quadratic" else kernels.logistic_sgd
    out = kernel(w, task.features[client], task.targets[client], idx, etas, task.lam)
    if not np.all(np.isfinite(out)):
        raise NonFiniteModelError(f"non-finite gradient on client {client}")
    return out


def _check_same_dim(models: Sequence[np.ndarray]) -> int:
    dims = {np.shape(m)[0] for m in models}
    if len(dims) != 1:
        raise DimensionMismatchError(f"models have different dimensions: {sorted(dims)}")
    return dims.pop()


def _combine(models: Sequence[np.ndarray], weights: Sequence[float], total: float) -> np.ndarray:
    # total*w_ref + sum_n c_n (w_n - w_ref): exact when every model equals w_ref
    ref = np.asarray(models[0], dtype=np.float64)
    acc = np.zeros_like(ref)
    for c, m in zip(weights, models):
        acc += c * (np.asarray(m, dtype=np.float64) - ref)
    return (total * ref if total != 1.0 else ref.copy()) + acc


def aggregate_full(models: Sequence, p: Sequence[float]) -> np.ndarray:
    """Weighted average sum_n p_n w_n over all clients."""
    if len(models) != len(p) or not models:
        raise ValueError("need one weight per model")
    _check_same_dim(models)
    p = [float(v) for v in p]
    if any(v < 0 for v in p) or abs(math.fsum(p) - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    return _combine(models, p, 1.0)


def aggregate_partial(models: Mapping, p: Mapping, n_total: int, k: int) -> np.ndarray:
    """(N/K) * sum_{n in S} p_n w_n over the responding set S (|S| = K).

    ``models`` and ``p`` are keyed by client; ``p`` may cover clients outside S.
    Iteration follows sorted client keys.
    """
    if k < 1 or len(models) == 0:
        raise ValueError("empty responding set")
    if k != len(models) or k > n_total:
        raise ValueError(f"K={k} inconsistent with {len(models)} models and N={n_total}")
    keys = sorted(models)
    _check_same_dim([models[c] for c in keys])
    if k == n_total:
        return aggregate_full([models[c] for c in keys], [p[c] for c in keys])
    scale = n_total / k
    weights = [scale * float(p[c]) for c in keys]
    return _combine([models[c] for c in keys], weights, math.fsum(weights))


def lr_schedule(t: int, r_t: float, mu: float, gamma: float) -> float:
    """Diminishing rate 2 r_t / (mu (gamma + t))."""
    if not mu > 0 or not gamma > 0:
        raise ValueError("mu and gamma must be positive")
    if t < 0:
        raise ValueError("t must be >= 0")
    return 2.0 * r_t / (mu * (gamma + t))


@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "none"
    nis: float = 0.0
    malicious_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"noise mode must be one of {NOISE_MODES}")
        if not self.nis >= 0:
            raise ValueError("nis must be nonnegative")
        object.__setattr__(self, "malicious_ids", frozenset(self.malicious_ids))

    @property
    def active(self) -> bool:
        return self.mode != "none" and self.nis > 0


def inject_noise(model, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a model: additive w + N(0, nis) or multiplicative w * (1 + N(0, nis)).

    ``nis`` is the standard deviation. Identity (and no random draws) when the
    spec is inactive.
    """
    w = as_model(model)
    if not spec.active:
        return w
    z = rng.normal(0.0, spec.nis, w.shape[0])
    return w + z if spec.mode == "additive" else w * (1.0 + z)
