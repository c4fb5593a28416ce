"""Cell-partitioned worker pool.

Cells are dealt round-robin (by sorted cell id) to ``n_workers`` workers.
Each worker runs its clients one after another; the round waits for all
workers (the barrier) and the server then aggregates in client-id order.
Because every client draws from its own seeded streams, the layout never
changes the numbers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .topology import Topology

ENV_WORKERS = "FEDWIRE_WORKERS"
SERVER_RANK = 0


class WorkerError(RuntimeError):
    def __init__(self, cell_id: str, client_id: str, cause: BaseException):
        super().__init__(f"worker failed in cell {cell_id!r} (client {client_id!r}): {cause!r}")
        self.cell_id = cell_id
        self.client_id = client_id
        self.__cause__ = cause


@dataclass(frozen=True)
class WorkerPlan:
    n_workers: int
    assignment: dict[str, int]
    address: dict[str, tuple[int, int]]

    def worker_of(self, topology: Topology, agent_id: str) -> int:
        return self.assignment[topology.agent(agent_id).cell_id]

    def to_dict(self) -> dict:
        return {
            "n_workers": self.n_workers,
            "assignment": dict(sorted(self.assignment.items())),
            "address": {k: list(v) for k, v in sorted(self.address.items())},
        }


def resolve_workers(requested: int | None = None) -> int:
    """Explicit value, else the environment override, else 1."""
    if requested is None:
        raw = os.environ.get(ENV_WORKERS)
        requested = int(raw) if raw else 1
    if requested < 1:
        raise ValueError("worker count must be >= 1")
    return requested


def plan_partition(topology: Topology, n_workers: int) -> WorkerPlan:
    """Round-robin cells over workers. The server sits alone on rank 0 and
    worker ``w`` is rank ``w + 1``; node ids number the agents of a rank in
    (cell, id) order."""
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    cells = sorted({a.cell_id for a in topology.agents if a.role != "server"})
    assignment = {cell: i % n_workers for i, cell in enumerate(cells)}
    address = {topology.server_id: (SERVER_RANK, 0)}
    members = sorted((a.cell_id, a.id) for a in topology.agents if a.role != "server")
    next_node = [0] * n_workers
    for cell, agent_id in members:
        w = assignment[cell]
        address[agent_id] = (w + 1, next_node[w])
        next_node[w] += 1
    return WorkerPlan(n_workers, assignment, address)


class PoolRunner:
    """Runs a per-client phase on the plan's workers, then joins (barrier).

    Results come back in the input order regardless of which worker produced
    them.
    """

    def __init__(self, plan: WorkerPlan, topology: Topology):
        self.plan = plan
        self.topology = topology
        self._pool = ThreadPoolExecutor(max_workers=plan.n_workers, thread_name_prefix="fedwire-worker") \
            if plan.n_workers > 1 else None

    def _serial(self, fn: Callable, items: Sequence[tuple[int, object]]) -> list[tuple[int, object]]:
        out = []
        for pos, client in items:
            try:
                out.append((pos, fn(client)))
            except Exception as exc:
                cid = client.id
                raise WorkerError(self.topology.agent(cid).cell_id, cid, exc) from exc
        return out

    def map(self, fn: Callable, clients: Sequence) -> list:
        buckets: list[list[tuple[int, object]]] = [[] for _ in range(self.plan.n_workers)]
        for pos, c in enumerate(clients):
            buckets[self.plan.worker_of(self.topology, c.id)].append((pos, c))
        if self._pool is None:
            parts = [self._serial(fn, b) for b in buckets]
        else:
            futures = [self._pool.submit(self._serial, fn, b) for b in buckets if b]
            parts = [f.result() for f in futures]
        results = [None] * len(clients)
        for part in parts:
            for pos, value in part:
                results[pos] = value
        return results

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_parallel(plan: WorkerPlan | None, config, seed: int | None = None):
    """Run ``config`` once with its client phases spread over ``plan``.

    The report is bit-identical for every plan: the worker count only
    decides which thread executes a client, never what it computes.
    """
    from .engine import Simulation

    built = config.build()
    seed = config.seed if seed is None else seed
    plan = plan or plan_partition(built.topology, resolve_workers(config.workers))
    with PoolRunner(plan, built.topology) as runner:
        sim = Simulation(built.topology, built.task, built.engine, seed, runner=runner)
        return sim.run(built.termination)


def run_replicas(config, replicas: int, n_workers: int | None = None) -> list:
    """Independent repetitions; replica ``r`` uses a seed derived from
    (config seed, r), and results are ordered by replica index."""
    from .engine import Simulation, replica_seed

    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    built = config.build()
    plan = plan_partition(built.topology, resolve_workers(n_workers if n_workers is not None else config.workers))
    w_star = built.task.minimizer()
    reference = (w_star, built.task.objective(w_star))
    out = []
    with PoolRunner(plan, built.topology) as runner:
        for r in range(replicas):
            sim = Simulation(built.topology, built.task, built.engine, replica_seed(config.seed, r),
                             runner=runner, reference=reference)
            out.append(sim.run(built.termination))
    return out
