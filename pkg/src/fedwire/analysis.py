"""Convergence constants, bounds and their checks against simulated runs.

Everything is evaluated on the server's committed model after each round.
Expectations are replica means; checks allow three standard errors of slack.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .learning import ConvexTask, as_model


class AnalysisError(ValueError):
    pass


class UnsupportedTaskError(AnalysisError):
    pass


class InsufficientReplicasError(AnalysisError):
    pass


class InconsistentInputsError(AnalysisError):
    pass


SLACK_SE = 3.0


@dataclass(frozen=True)
class ConvergenceParams:
    l_smooth: float
    mu: float
    sigma_k: tuple[float, ...]
    g_bound: float
    e_local: int
    p: tuple[float, ...]
    n_clients: int
    gamma_het: float

    def __post_init__(self):
        if not (self.mu > 0 and self.l_smooth > 0):
            raise AnalysisError("L and mu must be positive")
        if self.mu > self.l_smooth * (1 + 1e-12):
            raise AnalysisError(f"mu={self.mu} exceeds L={self.l_smooth}")
        if self.e_local < 1:
            raise AnalysisError("E must be >= 1")
        if len(self.sigma_k) != self.n_clients or len(self.p) != self.n_clients:
            raise AnalysisError("need one sigma and one weight per client")
        object.__setattr__(self, "sigma_k", tuple(float(s) for s in self.sigma_k))
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))

    @property
    def kappa(self) -> float:
        return self.l_smooth / self.mu

    @property
    def gamma(self) -> float:
        return max(8.0 * self.kappa, float(self.e_local))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(kappa=self.kappa, gamma=self.gamma)
        return d


def gamma_het(f_star: float, f_k_stars: Sequence[float], p: Sequence[float]) -> float:
    """Heterogeneity F* - sum_k p_k F_k*, floored at zero."""
    if len(f_k_stars) != len(p):
        raise InconsistentInputsError("one weight per client optimum required")
    lower = math.fsum(pk * fk for pk, fk in zip(p, f_k_stars))
    if f_star < lower - 1e-12:
        raise InconsistentInputsError(f"F*={f_star!r} below the weighted client optima {lower!r}")
    return max(0.0, f_star - lower)


def smoothness(task: ConvexTask) -> tuple[float, float]:
    if task.kind == "ridge-quadratic":
        eig = [np.linalg.eigvalsh(task.client_hessian(k)) for k in range(task.n_clients)]
        return max(float(e[-1]) for e in eig), min(float(e[0]) for e in eig)
    if task.kind == "l2-logistic":
        tops = []
        for X in task.features:
            s = max(X.shape[0], 1)
            tops.append(float(np.linalg.eigvalsh(X.T @ X)[-1]) / (4.0 * s) if X.shape[0] else 0.0)
        return max(tops) + task.lam, task.lam
    raise UnsupportedTaskError(task.kind)


def _gradient_moments(task: ConvexTask, k: int, w: np.ndarray, batch: int | None) -> tuple[float, float]:
    """(variance, second moment) of client k's minibatch gradient at w.

    Minibatches are uniform with replacement, so the variance of the batch
    mean is the per-sample variance divided by the batch size.
    """
    full = task.client_gradient(k, w)
    if batch is None or task.sizes[k] == 0:
        var = 0.0
    else:
        per = task.sample_gradients(k, w)
        dev = per - per.mean(axis=0)
        var = float(np.mean(np.einsum("ij,ij->i", dev, dev))) / batch
    return var, float(full @ full) + var


def probe_points(task: ConvexTask, w0, n_probe: int, rng: np.random.Generator,
                 iterates: Sequence = ()) -> np.ndarray:
    """Points where sigma and G are measured.

    The region is a ball around w* large enough to hold w0 and every client
    optimum; probes are spread over its surface and interior, plus w0, w*,
    the client optima and any recorded iterates.
    """
    w_star = task.minimizer()
    w0 = as_model(w0, task.dim)
    anchors = [w0, w_star] + [task.client_minimizer(k) for k in range(task.n_clients)]
    radius = max(float(np.linalg.norm(a - w_star)) for a in anchors)
    radius = max(radius, 1e-12)
    u = rng.normal(size=(n_probe, task.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    scale = np.ones(n_probe)
    scale[n_probe // 2:] = rng.random(n_probe - n_probe // 2) ** (1.0 / task.dim)
    pts = w_star + radius * scale[:, None] * u
    extra = [as_model(w, task.dim) for w in iterates]
    return np.vstack([np.array(anchors), pts] + ([np.array(extra)] if extra else []))


def estimate_constants(task: ConvexTask, e_local: int, *, batch: int | None = None, w0=None,
                       n_probe: int = 256, rng: np.random.Generator | None = None,
                       iterates: Sequence = (), margin: float = 1.2) -> ConvergenceParams:
    """L, mu, sigma_k, G and Gamma for ``task``.

    Ridge: L and mu are the extreme Hessian eigenvalues over clients (exact).
    Logistic: L = max_k lambda_max(X_k'X_k)/(4 s_k) + lambda, mu = lambda.
    sigma_k and G are maxima over :func:`probe_points`, inflated by ``margin``;
    they hold only while iterates stay inside that region.
    """
    if task.kind not in ("ridge-quadratic", "l2-logistic"):
        raise UnsupportedTaskError(task.kind)
    rng = np.random.default_rng(0) if rng is None else rng
    w0 = np.zeros(task.dim) if w0 is None else w0
    L, mu = smoothness(task)
    pts = probe_points(task, w0, n_probe, rng, iterates)
    sig2 = [0.0] * task.n_clients
    g2 = 0.0
    for k in range(task.n_clients):
        for w in pts:
            var, second = _gradient_moments(task, k, w, batch)
            sig2[k] = max(sig2[k], var)
            g2 = max(g2, second)
    w_star = task.minimizer()
    f_star = task.objective(w_star)
    f_k = [task.client_objective(k, task.client_minimizer(k)) for k in range(task.n_clients)]
    het = gamma_het(f_star, f_k, task.weights)
    return ConvergenceParams(
        l_smooth=L, mu=mu,
        sigma_k=tuple(margin * math.sqrt(s) for s in sig2),
        g_bound=max(margin * math.sqrt(g2), 1e-300),
        e_local=e_local, p=tuple(task.weights), n_clients=task.n_clients, gamma_het=het,
    )


def compute_B(params: ConvergenceParams) -> float:
    e, g = params.e_local, params.g_bound
    return (math.fsum(p * p * s * s for p, s in zip(params.p, params.sigma_k))
            + 6.0 * params.l_smooth * params.gamma_het + 8.0 * (e - 1) ** 2 * g * g)


def compute_C(params: ConvergenceParams, n_tilde: int) -> float:
    n = params.n_clients
    if not 1 <= n_tilde <= n:
        raise AnalysisError(f"responder count {n_tilde} outside [1, {n}]")
    if n == 1:
        return 0.0
    e, g = params.e_local, params.g_bound
    return (n - n_tilde) / (n - 1) * (4.0 / n_tilde) * e * e * g * g


def compute_D(params: ConvergenceParams) -> float:
    return 4.0 * params.e_local ** 2 * params.g_bound ** 2


def theorem_bound(params: ConvergenceParams, t: float, delta0: float, *, noise_term: float | None = None) -> float:
    """(2 kappa / (gamma + t)) ((B + D)/mu + 2 L delta0).

    ``noise_term`` replaces B + D, e.g. with B alone for a full-participation
    reading or B + C_t for one round.
    """
    if delta0 < 0:
        raise AnalysisError("delta0 must be nonnegative")
    bd = compute_B(params) + compute_D(params) if noise_term is None else noise_term
    return 2.0 * params.kappa / (params.gamma + t) * (bd / params.mu + 2.0 * params.l_smooth * delta0)


def supremum_recursion(delta0: float, mu: float, b: float, c_seq: Sequence[float], horizon: int | None = None) -> np.ndarray:
    """Worst-case Delta trajectory under the per-round optimal step size."""
    if delta0 < 0:
        raise AnalysisError("delta0 must be nonnegative")
    horizon = len(c_seq) if horizon is None else horizon
    if horizon > len(c_seq):
        raise AnalysisError("need one C_t per round")
    out = np.empty(horizon + 1)
    out[0] = d = float(delta0)
    for t in range(horizon):
        d = max(0.0, d - mu * mu * d * d / (4.0 * (b + c_seq[t])))
        out[t + 1] = d
    return out


def lemma2_rate(base_eta: float, r_t: float) -> float:
    if not 0.0 < r_t <= 1.0:
        raise AnalysisError("participation ratio must lie in (0, 1]")
    return r_t * base_eta


# -- traces from replica reports --------------------------------------------------
@dataclass
class BoundTrace:
    t: list[int]
    delta: list[float]
    delta_se: list[float]
    delta_tilde: list[float]
    gap: list[float]
    gap_se: list[float]
    bound: list[float]
    r: list[float]
    eta: list[float]
    lemma1: list[bool] = field(default_factory=list)
    theorem: list[bool] = field(default_factory=list)
    sandwich: list[bool] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("delta", "delta_se", "delta_tilde", "gap", "gap_se", "bound", "r", "eta"):
            if len(getattr(self, name)) != n:
                raise AnalysisError(f"series {name} has the wrong length")

    @property
    def verdicts(self) -> dict[str, bool]:
        return {"lemma1": all(self.lemma1), "theorem": all(self.theorem), "sandwich": all(self.sandwich)}

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "verdicts": self.verdicts}, sort_keys=True, allow_nan=False)


def _matrix(reports, key: str) -> np.ndarray:
    """Replica x round array, column 0 holding the initial evaluation when present."""
    rows = []
    for rep in reports:
        first = rep.initial.get(key)
        series = [rec[key] for rec in rep.rounds]
        rows.append(([first] if first is not None else [np.nan]) + series)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise AnalysisError("replicas ran different numbers of rounds")
    return np.array(rows, dtype=np.float64)


def _mean_se(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = a.shape[0]
    return a.mean(axis=0), a.std(axis=0, ddof=1) / math.sqrt(r)


def lemma1_check(dist: np.ndarray, eta: np.ndarray, n_active: np.ndarray, params: ConvergenceParams,
                 slack_se: float = SLACK_SE) -> list[bool]:
    """Per-round check of D_{t+1} <= (1 - eta_t mu) D_t + eta_t^2 (B + C_t).

    ``dist`` is replicas x (T+1) squared distances to w*; ``eta`` and
    ``n_active`` are replicas x T. The inequality is tested on the paired
    per-replica residual, whose mean must not exceed ``slack_se`` standard errors.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] < 2:
        raise InsufficientReplicasError("the one-step check compares expectations; need at least two replicas")
    b = compute_B(params)
    d_cap = compute_D(params)
    c = np.vectorize(lambda k: compute_C(params, int(k)) if k >= 1 else d_cap)(n_active)
    resid = dist[:, 1:] - (1.0 - eta * params.mu) * dist[:, :-1] - eta * eta * (b + c)
    mean, se = _mean_se(resid)
    return [bool(m <= slack_se * s + 1e-12 * (1 + abs(b))) for m, s in zip(mean, se)]


def bound_trace(reports: Sequence, params: ConvergenceParams, *, slack_se: float = SLACK_SE,
                sandwich_rtol: float = 1e-6) -> BoundTrace:
    """Replica means of the measured quantities and the verdict of every check.

    ``reports`` are per-replica :class:`SimulationReport` objects whose records
    carry ``dist_sq``, ``gap``, ``r``, ``eta`` and ``n_active``.
    """
    if len(reports) < 2:
        raise InsufficientReplicasError(f"need at least 2 replicas, got {len(reports)}")
    dist = _matrix(reports, "dist_sq")
    gap = _matrix(reports, "gap")
    r = _matrix(reports, "r")[:, 1:]
    eta = _matrix(reports, "eta")[:, 1:]
    n_active = _matrix(reports, "n_active")[:, 1:]
    delta, delta_se = _mean_se(dist)
    gap_mean, gap_se = _mean_se(gap)
    horizon = dist.shape[1] - 1
    delta0 = float(delta[0])

    b = compute_B(params)
    d_cap = compute_D(params)
    mean_active = n_active.mean(axis=0)
    c_seq = [compute_C(params, max(1, min(params.n_clients, int(round(k))))) if k >= 1 else d_cap
             for k in mean_active]
    tilde = supremum_recursion(delta0, params.mu, b, c_seq, horizon)
    bound = [theorem_bound(params, t, delta0) for t in range(horizon + 1)]

    lemma1 = lemma1_check(dist, eta, n_active, params, slack_se)
    theorem = [bool(g <= bd + slack_se * s) for g, bd, s in zip(gap_mean, bound, gap_se)]
    # strong convexity and smoothness pin the gap between mu/2 and L/2 times the distance
    lo = 0.5 * params.mu * dist
    hi = 0.5 * params.l_smooth * dist
    tol = sandwich_rtol * (np.abs(gap) + hi) + 1e-12
    ok = (gap >= lo - tol) & (gap <= hi + tol)
    sandwich = [bool(v) for v in ok.all(axis=0)]
    return BoundTrace(
        t=list(range(horizon + 1)), delta=delta.tolist(), delta_se=delta_se.tolist(),
        delta_tilde=tilde.tolist(), gap=gap_mean.tolist(), gap_se=gap_se.tolist(), bound=bound,
        r=[1.0] + r.mean(axis=0).tolist(),
        eta=[0.0] + eta.mean(axis=0).tolist(),
        lemma1=lemma1, theorem=theorem, sandwich=sandwich, params=params.to_dict(),
    )
