import json
import os
import time

import pytest
from hypothesis import given, strategies as st

from fedwire import report as report_io
from fedwire.config import load_config
from fedwire.topology import build_cell_topology, load_topology, parse_topology
from fedwire.workers import (PoolRunner, WorkerError, plan_partition, resolve_workers, run_parallel,
                             run_replicas)


@pytest.fixture(scope="module")
def cells32():
    from conftest import FIXTURES
    return load_config(FIXTURES / "cells32.yaml")


def test_plan_golden(fixtures):
    topo = load_topology(fixtures / "topology_2cells.json")
    golden = json.loads((fixtures / "golden_plan_2workers.json").read_text())
    assert plan_partition(topo, 2).to_dict() == golden


def test_plan_single_worker(fixtures):
    topo = load_topology(fixtures / "topology_2cells.json")
    plan = plan_partition(topo, 1)
    assert set(plan.assignment.values()) == {0}
    assert plan.address["server"] == (0, 0)
    assert plan.address["client01_03"] == (1, 9)


@given(st.integers(1, 12), st.integers(1, 3), st.integers(1, 8))
def test_plan_properties(n_cells, per_cell, n_workers):
    topo = parse_topology(build_cell_topology(n_cells, per_cell))
    plan = plan_partition(topo, n_workers)
    # whole cells go to one worker, round-robin, and addresses are unique
    assert sorted(plan.assignment) == sorted(topo.cells)
    for i, cell in enumerate(sorted(topo.cells)):
        assert plan.assignment[cell] == i % n_workers
    addrs = list(plan.address.values())
    assert len(set(addrs)) == len(addrs) == len(topo.agents)
    for cid in topo.client_ids:
        assert plan.address[cid][0] == plan.worker_of(topo, cid) + 1


def test_bad_counts(fixtures):
    topo = load_topology(fixtures / "topology_2cells.json")
    with pytest.raises(ValueError):
        plan_partition(topo, 0)
    with pytest.raises(ValueError):
        resolve_workers(0)


def test_env_override(monkeypatch):
    monkeypatch.setenv("FEDWIRE_WORKERS", "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.delenv("FEDWIRE_WORKERS")
    assert resolve_workers() == 1


def test_worker_invariance(cells32):
    texts = {n: report_io.dumps(run_parallel(plan_partition(cells32.build().topology, n), cells32))
             for n in (1, 2, 4)}
    assert texts[1] == texts[2] == texts[4]
    assert json.loads(texts[1].splitlines()[-1])["rounds"] == 15


def test_replicas_invariant_to_workers(fixtures):
    cfg = load_config(fixtures / "quadratic.yaml").with_overrides(max_rounds=10)
    a = report_io.dumps(run_replicas(cfg, 3, 1))
    b = report_io.dumps(run_replicas(cfg, 3, 2))
    assert a == b


def test_pool_preserves_order(fixtures):
    topo = load_topology(fixtures / "topology_2cells.json")

    class C:
        def __init__(self, cid):
            self.id = cid

    clients = [C(c) for c in reversed(topo.client_ids)]
    with PoolRunner(plan_partition(topo, 2), topo) as runner:
        assert runner.map(lambda c: c.id, clients) == [c.id for c in clients]


def test_worker_error_names_cell(fixtures):
    topo = load_topology(fixtures / "topology_2cells.json")

    class C:
        def __init__(self, cid):
            self.id = cid

    def boom(c):
        if c.id == "client01_02":
            raise RuntimeError("disk on fire")
        return 1

    for n in (1, 2):
        with PoolRunner(plan_partition(topo, n), topo) as runner:
            with pytest.raises(WorkerError) as info:
                runner.map(boom, [C(c) for c in topo.client_ids])
        assert info.value.cell_id == "cell01"
        assert info.value.client_id == "client01_02"
        assert isinstance(info.value.__cause__, RuntimeError)


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs at least 4 CPUs")
def test_wall_clock_smoke(cells32):
    plan1 = plan_partition(cells32.build().topology, 1)
    plan4 = plan_partition(cells32.build().topology, 4)
    t0 = time.perf_counter()
    run_parallel(plan1, cells32)
    t1 = time.perf_counter()
    run_parallel(plan4, cells32)
    t4 = time.perf_counter() - t1
    # threads share the interpreter, so only require no large slowdown
    assert t4 < 2.0 * (t1 - t0)


def test_four_cells_two_workers():
    topo = parse_topology(build_cell_topology(4, 2))
    plan = plan_partition(topo, 2)
    assert plan.assignment == {"cell00": 0, "cell01": 1, "cell02": 0, "cell03": 1}


def test_quadratic_one_vs_four_workers(fixtures):
    cfg = load_config(fixtures / "quadratic.yaml")
    topo = cfg.build().topology
    a = report_io.dumps(run_parallel(plan_partition(topo, 1), cfg))
    b = report_io.dumps(run_parallel(plan_partition(topo, 4), cfg))
    assert a == b
