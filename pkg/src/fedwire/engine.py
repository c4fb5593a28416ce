"""Round state machine: broadcast, local training, stochastic upload, windowed
aggregation, sync and async modes, termination.

Each round the server broadcasts its memory, every scheduled client draws an
uplink time and trains locally, uploads that arrive within the time window
are folded into the server buffer by the aggregation rule, and the memory is
set to the committed buffer.

Randomness is keyed by (seed, client id, purpose), never by execution order,
so results do not depend on how clients are spread over workers.
"""
from __future__ import annotations

import logging
import math
import operator
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import learning
from .channel import LinkSample, sample_link
from .learning import ConvexTask, DimensionMismatchError, NoiseSpec, as_model
from .metrics import QosLedger, charge_round, fairness_ratio, DegenerateFairnessError
from .topology import Topology

log = logging.getLogger(__name__)

MODES = ("sync", "async")
_PURPOSES = {"channel": 1, "train": 2, "noise": 3}
HARD_ROUND_CAP = 1_000_000


class EngineError(RuntimeError):
    pass


class ModeMismatchError(EngineError):
    pass


def client_key(client_id: str) -> int:
    return zlib.crc32(client_id.encode("utf-8"))


def client_stream(seed: int, client_id: str, purpose: str) -> np.random.Generator:
    """Independent generator for one client and one purpose."""
    return np.random.default_rng(np.random.SeedSequence([seed, client_key(client_id), _PURPOSES[purpose]]))


def replica_seed(seed: int, replica: int) -> int:
    return int(np.random.SeedSequence([seed, 0x5EED, replica]).generate_state(1, np.uint32)[0])


# -- aggregation rules ----------------------------------------------------------
Incoming = Sequence[tuple[str, float, np.ndarray]]


def _rule_fedavg_partial(buffer, memory, incoming: Incoming, n_total: int, **_):
    models = {cid: w for cid, _, w in incoming}
    weights = {cid: p for cid, p, _ in incoming}
    return learning.aggregate_partial(models, weights, n_total, len(incoming))


def _rule_fedavg_full(buffer, memory, incoming: Incoming, n_total: int, **_):
    ordered = sorted(incoming, key=operator.itemgetter(0))
    weights = [p for _, p, _ in ordered]
    total = math.fsum(weights)
    if len(ordered) != n_total:
        # partial response under the full rule: renormalise over responders
        weights = [p / total for p in weights] if total > 0 else [1.0 / len(ordered)] * len(ordered)
    return learning.aggregate_full([w for _, _, w in ordered], weights)


def _rule_replace_latest(buffer, memory, incoming: Incoming, **_):
    return np.array(incoming[-1][2], dtype=np.float64)


def _rule_running_average(buffer, memory, incoming: Incoming, weight: float = 0.5, **_):
    m = np.array(memory, dtype=np.float64)
    for _, _, w in incoming:
        m = m + weight * (np.asarray(w, dtype=np.float64) - m)
    return m


RULES: dict[str, Callable] = {
    "fedavg-partial": _rule_fedavg_partial,
    "fedavg-full": _rule_fedavg_full,
    "replace-latest": _rule_replace_latest,
    "running-average": _rule_running_average,
}


def register_rule(name: str, fn: Callable) -> None:
    """Add a custom ``fn(buffer, memory, incoming, n_total=..., weight=...) -> vector``."""
    RULES[name] = fn


def buffer_update(buffer, memory, incoming: Incoming, rule: str | Callable = "fedavg-partial", *,
                  n_total: int | None = None, weight: float = 0.5) -> np.ndarray:
    """Apply an aggregation rule; an empty ``incoming`` leaves the buffer as is."""
    buffer = np.asarray(buffer, dtype=np.float64)
    memory = np.asarray(memory, dtype=np.float64)
    if buffer.shape != memory.shape:
        raise DimensionMismatchError("buffer and memory differ in dimension")
    for cid, p, w in incoming:
        if np.shape(w) != buffer.shape:
            raise DimensionMismatchError(f"upload from {cid!r} has dimension {np.shape(w)}, expected {buffer.shape}")
        if p < 0:
            raise ValueError(f"negative weight for {cid!r}")
    if not incoming:
        return buffer.copy()
    fn = RULES[rule] if isinstance(rule, str) else rule
    n_total = len(incoming) if n_total is None else n_total
    return as_model(fn(buffer, memory, list(incoming), n_total=n_total, weight=weight))


# -- configuration --------------------------------------------------------------
@dataclass(frozen=True)
class LearningRate:
    """Per-round learning rates.

    ``schedule`` is ``constant`` (``eta``) or ``theorem`` (2 / (mu (gamma + t))).
    ``scaling`` multiplies by the participation ratio: ``realized`` uses the
    round's actual K/N, ``expected`` a fixed ``expected_r``, ``none`` nothing.
    ``per_step`` advances the schedule at every local step instead of once per
    round.
    """

    schedule: str = "constant"
    eta: float = 0.05
    mu: float | None = None
    gamma: float | None = None
    scaling: str = "none"
    expected_r: float = 1.0
    per_step: bool = False

    def __post_init__(self):
        if self.schedule not in ("constant", "theorem"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.scaling not in ("none", "realized", "expected"):
            raise ValueError(f"unknown rate scaling {self.scaling!r}")
        if self.schedule == "theorem" and (self.mu is None or self.gamma is None):
            raise ValueError("theorem schedule needs mu and gamma")

    def ratio(self, r_t: float) -> float:
        if self.scaling == "realized":
            return r_t
        if self.scaling == "expected":
            return self.expected_r
        return 1.0

    def rates(self, t: int, r_t: float, e_steps: int) -> np.ndarray:
        r = self.ratio(r_t)
        steps = max(e_steps, 1)
        if self.schedule == "constant":
            return np.full(steps, self.eta * r)
        if self.per_step:
            return np.array([learning.lr_schedule(t * steps + i, r, self.mu, self.gamma) for i in range(steps)])
        return np.full(steps, learning.lr_schedule(t, r, self.mu, self.gamma))


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "sync"
    time_window_s: float = 1.0
    local_steps: int = 1
    batch_size: int | None = None
    rule: str = "fedavg-partial"
    async_rule: str = "running-average"
    async_weight: float = 0.5
    first_k: int | None = None
    lr: LearningRate = field(default_factory=LearningRate)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    charge_downlink: bool = True
    truncate_dropped_airtime: bool = False
    enforce_battery: bool = False
    record_models: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.time_window_s > 0:
            raise ValueError("time_window_s must be positive")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")
        if self.first_k is not None and self.first_k < 1:
            raise ValueError("first_k must be >= 1")
        if self.rule not in RULES or self.async_rule not in RULES:
            raise ValueError("unknown aggregation rule")


@dataclass(frozen=True)
class TerminationSpec:
    max_rounds: int | None = None
    max_sim_time_s: float | None = None
    max_energy_j: float | None = None
    target: tuple[str, str, float] | None = None

    def __post_init__(self):
        if all(v is None for v in (self.max_rounds, self.max_sim_time_s, self.max_energy_j, self.target)):
            raise ValueError("at least one termination condition is required")
        if self.target is not None:
            metric, op, _ = self.target
            if op not in _COMPARATORS:
                raise ValueError(f"comparator must be one of {sorted(_COMPARATORS)}")
            object.__setattr__(self, "target", (metric, op, float(self.target[2])))


_COMPARATORS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


# -- state ----------------------------------------------------------------------
@dataclass
class RoundState:
    round_index: int
    server_buffer: np.ndarray
    server_memory: np.ndarray
    client_models: dict[str, np.ndarray]
    clock_s: float = 0.0
    mode: str = "sync"
    time_window_s: float = 1.0


@dataclass(frozen=True)
class RoundOutcome:
    round_index: int
    activated: tuple[str, ...]
    arrivals: Mapping[str, float]
    dropped: frozenset
    round_duration_s: float
    uplink_samples: Mapping[str, LinkSample]
    compute_times: Mapping[str, float] = field(default_factory=dict)
    r_t: float = 0.0
    eta: float = 0.0
    limit: str | None = None
    warning: str | None = None

    @property
    def scheduled(self) -> list[str]:
        return sorted(set(self.activated) | set(self.dropped))


UplinkSampler = Callable[[np.random.Generator], tuple[LinkSample, float]]


def topology_sampler(topology: Topology, client_id: str) -> UplinkSampler:
    """Upload-time sampler along the client's route: the wireless hop's total
    time plus delay and serialisation on every point-to-point hop."""
    ids = topology.route(client_id)
    hops = [topology.agent(a).adj[b] for a, b in zip(ids, ids[1:])]
    channel = hops[0].channel
    fixed = sum(h.backhaul_time(channel.packet_bits) for h in hops[1:])

    def draw(rng: np.random.Generator) -> tuple[LinkSample, float]:
        sample = sample_link(channel, rng)
        return sample, sample.total_time_s + fixed

    return draw


@dataclass
class LocalTrainer:
    task: ConvexTask
    local_steps: int = 1
    batch_size: int | None = None

    def train(self, client: int, model, etas, rng: np.random.Generator) -> np.ndarray:
        if self.local_steps == 0:
            return as_model(model, self.task.dim)
        return learning.local_sgd(model, self.task, client, self.local_steps, etas, self.batch_size, rng)

    def samples_per_round(self, client: int) -> int:
        per_step = self.task.sizes[client] if self.batch_size is None else self.batch_size
        return per_step * self.local_steps


@dataclass
class ClientRuntime:
    """Per-client mutable state; owned by exactly one worker at a time."""

    id: str
    index: int
    weight: float
    compute_time_s: float
    sampler: UplinkSampler
    channel_rng: np.random.Generator
    train_rng: np.random.Generator
    noise_rng: np.random.Generator
    malicious: bool = False

    def draw_uplink(self) -> tuple[LinkSample, float]:
        return self.sampler(self.channel_rng)

    def local_update(self, model, etas, trainer: LocalTrainer, noise: NoiseSpec) -> np.ndarray:
        w = trainer.train(self.index, model, etas, self.train_rng)
        if self.malicious:
            w = learning.inject_noise(w, noise, self.noise_rng)
        return w


class SerialRunner:
    """Runs client phases one after another in the calling thread."""

    def map(self, fn, clients: Sequence[ClientRuntime]) -> list:
        return [fn(c) for c in clients]

    def close(self):
        pass


# -- one round ------------------------------------------------------------------
def run_round(state: RoundState, clients: Sequence[ClientRuntime], trainer: LocalTrainer,
              config: EngineConfig, *, n_total: int | None = None, runner=None) -> tuple[RoundState, RoundOutcome]:
    """One synchronous round. ``clients`` are the scheduled clients."""
    if state.mode != "sync":
        raise ModeMismatchError("run_round needs a sync state; use async_step")
    runner = runner or SerialRunner()
    n_total = len(clients) if n_total is None else n_total
    eps = state.time_window_s
    t = state.round_index

    draws = runner.map(ClientRuntime.draw_uplink, clients)
    samples = {c.id: d[0] for c, d in zip(clients, draws)}
    uploads = {c.id: d[1] for c, d in zip(clients, draws)}
    compute = {c.id: c.compute_time_s for c in clients}

    in_window = sorted((c.id for c in clients if uploads[c.id] <= eps),
                       key=lambda cid: (compute[cid] + uploads[cid], cid))
    window_drop = len(in_window) < len(clients)
    activated = in_window
    limit = "window" if window_drop else None
    if config.first_k is not None and len(in_window) > config.first_k:
        activated = in_window[:config.first_k]
        limit = "first_k"
        log.debug("round %d: first-K limit (K=%d) binds before the window", t + 1, config.first_k)
    dropped = frozenset(c.id for c in clients) - set(activated)

    r_t = len(activated) / n_total if n_total else 0.0
    etas = config.lr.rates(t, r_t, config.local_steps)
    broadcast = state.server_memory.copy()
    trained = runner.map(lambda c: c.local_update(broadcast, etas, trainer, config.noise), clients)
    trained = {c.id: w for c, w in zip(clients, trained)}
    by_id = {c.id: c for c in clients}

    warning = None
    incoming = [(cid, by_id[cid].weight, trained[cid]) for cid in sorted(activated)]
    if not incoming:
        warning = "empty-activation"
        log.info("round %d: no client responded within %.6g s; buffer unchanged", t + 1, eps)
    buffer = buffer_update(state.server_buffer, state.server_memory, incoming, config.rule, n_total=n_total)
    memory = buffer.copy()

    duration = max((compute[cid] + uploads[cid] for cid in activated), default=0.0)
    if window_drop:
        duration = max(duration, eps)
    if duration <= 0.0:
        duration = eps

    client_models = dict(state.client_models)
    client_models.update(trained)
    new_state = RoundState(t + 1, buffer, memory, client_models, state.clock_s + duration,
                           state.mode, state.time_window_s)
    outcome = RoundOutcome(t + 1, tuple(activated), dict(sorted(uploads.items())), dropped, duration,
                           samples, compute, r_t, float(etas[0]), limit, warning)
    return new_state, outcome


def async_step(state: RoundState, client: ClientRuntime, trainer: LocalTrainer,
               config: EngineConfig) -> tuple[RoundState, RoundOutcome]:
    """One asynchronous exchange with a single client.

    The client trains from the model the server last sent it; if the upload
    fits in the window the server folds it into its memory with the async rule
    and returns the result to that client only.
    """
    if state.mode != "async":
        raise ModeMismatchError("async_step needs an async state")
    t = state.round_index
    sample, upload = client.draw_uplink()
    start = state.client_models.get(client.id, state.server_memory)
    etas = config.lr.rates(t, 1.0, config.local_steps)
    trained = client.local_update(start, etas, trainer, config.noise)
    ok = upload <= state.time_window_s
    client_models = dict(state.client_models)
    if ok:
        buffer = buffer_update(state.server_buffer, state.server_memory, [(client.id, client.weight, trained)],
                               config.async_rule, n_total=1, weight=config.async_weight)
        memory = buffer.copy()
        client_models[client.id] = memory.copy()
        duration = client.compute_time_s + upload
    else:
        buffer, memory = state.server_buffer.copy(), state.server_memory.copy()
        client_models[client.id] = trained
        duration = client.compute_time_s + state.time_window_s
    if duration <= 0.0:
        duration = state.time_window_s
    new_state = RoundState(t + 1, buffer, memory, client_models, state.clock_s + duration,
                           state.mode, state.time_window_s)
    outcome = RoundOutcome(t + 1, (client.id,) if ok else (), {client.id: upload},
                           frozenset() if ok else frozenset([client.id]), duration, {client.id: sample},
                           {client.id: client.compute_time_s}, 1.0 if ok else 0.0, float(etas[0]),
                           None if ok else "window", None if ok else "empty-activation")
    return new_state, outcome


# -- whole simulations ----------------------------------------------------------
@dataclass
class SimulationReport:
    initial: dict
    rounds: list[dict]
    summary: dict

    @property
    def termination(self) -> str:
        return self.summary["termination"]

    def series(self, key: str) -> list:
        return [r[key] for r in self.rounds]


class Simulation:
    """Drives rounds over a topology and task; owns state and QoS ledger."""

    def __init__(self, topology: Topology, task: ConvexTask, config: EngineConfig, seed: int, *,
                 runner=None, samplers: Mapping[str, UplinkSampler] | None = None, initial_model=None,
                 reference: tuple[np.ndarray, float] | None = None):
        ids = topology.client_ids
        if len(ids) != task.n_clients:
            raise EngineError(f"topology has {len(ids)} clients but task has {task.n_clients}")
        self.topology = topology
        self.task = task
        self.config = config
        self.seed = seed
        self.runner = runner or SerialRunner()
        self.trainer = LocalTrainer(task, config.local_steps, config.batch_size)
        for cid in config.noise.malicious_ids:
            if cid not in ids:
                raise EngineError(f"malicious id {cid!r} is not a client")
        samplers = dict(samplers or {})
        self.clients: list[ClientRuntime] = []
        for k, cid in enumerate(ids):
            agent = topology.agent(cid)
            compute_time = (agent.compute_time_per_epoch_s * config.local_steps
                            + agent.compute_time_per_sample_s * self.trainer.samples_per_round(k))
            self.clients.append(ClientRuntime(
                id=cid, index=k, weight=float(task.weights[k]), compute_time_s=compute_time,
                sampler=samplers.get(cid) or topology_sampler(topology, cid),
                channel_rng=client_stream(seed, cid, "channel"),
                train_rng=client_stream(seed, cid, "train"),
                noise_rng=client_stream(seed, cid, "noise"),
                malicious=cid in config.noise.malicious_ids,
            ))
        w0 = np.zeros(task.dim) if initial_model is None else as_model(initial_model, task.dim)
        self.state = RoundState(0, w0.copy(), w0.copy(), {cid: w0.copy() for cid in ids}, 0.0,
                                config.mode, config.time_window_s)
        self.ledger = QosLedger()
        if reference is None:
            w_star = task.minimizer()
            reference = (w_star, task.objective(w_star))
        self.w_star, self.f_star = np.asarray(reference[0], dtype=np.float64), float(reference[1])
        self._next_async = 0

    # metrics of the committed global model
    def evaluate(self) -> dict:
        w = self.state.server_memory
        loss = self.task.objective(w)
        diff = w - self.w_star
        out = {"loss": loss, "gap": loss - self.f_star, "dist_sq": float(diff @ diff)}
        if self.task.kind == "l2-logistic":
            out["accuracy"] = self.task.accuracy(w)
        return out

    def _schedulable(self) -> list[ClientRuntime]:
        if not self.config.enforce_battery:
            return self.clients
        out = []
        for c in self.clients:
            battery = self.topology.agent(c.id).battery_j
            if battery is None or self.ledger.energy_j.get(c.id, 0.0) < battery:
                out.append(c)
        return out

    def _downlink_energy(self, scheduled: Sequence[str]) -> dict[str, float]:
        if not self.config.charge_downlink or not scheduled:
            return {}
        server = self.topology.agent(self.topology.server_id)
        if server.transmit_power_w == 0.0:
            return {}
        first_hops = sorted({self.topology.route(cid)[-2] for cid in scheduled})
        joules = 0.0
        for hop in first_hops:
            edge = server.adj[hop]
            bits = self.topology.client_channel(scheduled[0]).packet_bits
            airtime = bits / edge.p2p_rate_bps if not edge.wireless else bits / edge.channel.bandwidth_hz
            joules += server.transmit_power_w * airtime
        return {server.id: joules}

    def step(self) -> RoundOutcome | None:
        """Run one round (sync) or one client exchange (async). Returns None
        when no client can be scheduled."""
        clients = self._schedulable()
        if not clients:
            return None
        if self.config.mode == "sync":
            self.state, outcome = run_round(self.state, clients, self.trainer, self.config,
                                            n_total=len(self.clients), runner=self.runner)
        else:
            client = clients[self._next_async % len(clients)]
            self._next_async += 1
            self.state, outcome = async_step(self.state, client, self.trainer, self.config)
        scheduled = outcome.scheduled
        downlink = self._downlink_energy(scheduled if self.config.mode == "sync" else list(outcome.activated))
        charge_round(self.ledger, outcome, self.topology, outcome.compute_times,
                     epsilon_s=self.state.time_window_s,
                     truncate_dropped=self.config.truncate_dropped_airtime, downlink=downlink)
        return outcome

    def _record(self, outcome: RoundOutcome, metrics: dict) -> dict:
        i = len(self.ledger.round_durations_s) - 1
        bits = self.ledger.round_bits_delivered[i]
        rec = {
            "record": "round",
            "round": outcome.round_index,
            "clock_s": self.state.clock_s,
            "duration_s": outcome.round_duration_s,
            "n_scheduled": len(outcome.scheduled),
            "n_active": len(outcome.activated),
            "activated": list(outcome.activated),
            "dropped": sorted(outcome.dropped),
            "r": outcome.r_t,
            "eta": outcome.eta,
            "energy_j": self.ledger.total_energy_j,
            "bits_attempted": self.ledger.round_bits_attempted[i],
            "bits_delivered": bits,
            "packets_lost": self.ledger.packets_lost,
            "throughput_bps": bits / outcome.round_duration_s,
            "limit": outcome.limit,
            "warning": outcome.warning,
            **metrics,
        }
        if self.config.record_models:
            rec["model"] = self.state.server_memory.tolist()
        return rec

    def _check(self, term: TerminationSpec, metrics: dict, rounds: int) -> str | None:
        if term.target is not None:
            name, op, threshold = term.target
            if name not in metrics:
                raise EngineError(f"unknown target metric {name!r}")
            if _COMPARATORS[op](metrics[name], threshold):
                return "target"
        if term.max_rounds is not None and rounds >= term.max_rounds:
            return "max_rounds"
        if term.max_sim_time_s is not None and self.state.clock_s >= term.max_sim_time_s:
            return "max_sim_time"
        if term.max_energy_j is not None and self.ledger.total_energy_j >= term.max_energy_j:
            return "max_energy"
        return None

    def run(self, termination: TerminationSpec) -> SimulationReport:
        metrics = self.evaluate()
        initial = {"record": "initial", "round": 0, **metrics}
        if self.config.record_models:
            initial["model"] = self.state.server_memory.tolist()
        rounds: list[dict] = []
        reason = self._check(termination, metrics, 0)
        while reason is None:
            outcome = self.step()
            if outcome is None:
                reason = "no_schedulable_clients"
                break
            metrics = self.evaluate()
            rounds.append(self._record(outcome, metrics))
            reason = self._check(termination, metrics, len(rounds))
            if reason is None and len(rounds) >= HARD_ROUND_CAP:
                reason = "round_cap"
        return SimulationReport(initial, rounds, self._summary(reason, metrics, len(rounds)))

    def _summary(self, reason: str, metrics: dict, n_rounds: int) -> dict:
        energies = self.ledger.client_energies(self.topology)
        try:
            fairness = fairness_ratio(self.ledger, self.topology.client_ids)
        except DegenerateFairnessError:
            fairness = None
        return {
            "record": "summary",
            "termination": reason,
            "rounds": n_rounds,
            "seed": self.seed,
            "final": metrics,
            "qos": self.ledger.summary(),
            "client_energy_j": energies,
            "fairness_ratio": fairness,
            "empty_rounds": sum(1 for n in self.ledger.active_links_per_round if n == 0),
        }


def run_simulation(config: EngineConfig, topology: Topology, task: ConvexTask, termination: TerminationSpec,
                   seed: int, **kwargs) -> SimulationReport:
    return Simulation(topology, task, config, seed, **kwargs).run(termination)
