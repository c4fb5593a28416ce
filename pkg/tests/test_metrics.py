import math

import pytest
from hypothesis import given, strategies as st

from fedwire.channel import LinkSample
from fedwire.engine import RoundOutcome
from fedwire.metrics import (DegenerateFairnessError, QosLedger, charge_round, fairness_ratio, merge,
                             throughput)
from fedwire.topology import UnknownAgentError, build_cell_topology, parse_topology

TOPO = parse_topology(build_cell_topology(1, 3, channel={"packet_bits": 1000, "transmit_power_w": 0.5},
                                          client_attrs={"compute_power_w": 2.0}))
IDS = TOPO.client_ids


def outcome(activated, dropped, tries, latency=1e-3, duration=0.1, index=1):
    samples = {c: LinkSample.make(0.01, latency, tries[c]) for c in list(activated) + list(dropped)}
    return RoundOutcome(index, tuple(activated), {c: s.total_time_s for c, s in samples.items()},
                        frozenset(dropped), duration, samples)


def test_one_round_by_hand():
    led = QosLedger()
    out = outcome([IDS[0], IDS[1]], [IDS[2]], {IDS[0]: 1, IDS[1]: 3, IDS[2]: 5})
    charge_round(led, out, TOPO, {c: 0.01 for c in IDS})
    assert led.bits_attempted == 9000
    assert led.bits_delivered == 2000
    assert led.packets_lost == 7
    assert led.round_bits_lost == [7000]
    assert led.energy_j[IDS[1]] == pytest.approx(0.5 * 3e-3 + 2.0 * 0.01, rel=1e-15)
    assert led.active_links_per_round == [2]
    assert throughput(led, 0) == 2000 / 0.1


def test_truncated_airtime():
    led = QosLedger()
    out = outcome([], [IDS[0]], {IDS[0]: 10}, latency=1.0)
    charge_round(led, out, TOPO, {}, epsilon_s=2.0, truncate_dropped=True)
    assert led.energy_j[IDS[0]] == 0.5 * 2.0


def test_unknown_agent():
    out = outcome(["ghost"], [], {"ghost": 1})
    with pytest.raises(UnknownAgentError, match="ghost"):
        charge_round(QosLedger(), out, TOPO, {})


def test_negative_charge():
    with pytest.raises(ValueError):
        QosLedger().charge("x", -1.0)


class TestFairness:
    def test_uniform(self):
        led = QosLedger()
        for c in IDS:
            led.charge(c, 2.5)
        assert fairness_ratio(led) == 1.0

    def test_skewed(self):
        led = QosLedger()
        for c, e in zip(IDS, (8.0, 1.0, 2.0)):
            led.charge(c, e)
        assert fairness_ratio(led) == 8.0

    def test_degenerate(self):
        led = QosLedger()
        led.charge(IDS[0], 1.0)
        with pytest.raises(DegenerateFairnessError):
            fairness_ratio(led)
        with pytest.raises(DegenerateFairnessError):
            fairness_ratio(led, IDS)


def test_throughput_errors():
    led = QosLedger()
    with pytest.raises(IndexError):
        throughput(led, 0)
    charge_round(led, outcome([IDS[0]], [], {IDS[0]: 1}, duration=0.0), TOPO, {})
    with pytest.raises(ZeroDivisionError):
        throughput(led, 0)


rounds = st.lists(
    st.tuples(st.lists(st.sampled_from(IDS), unique=True),
              st.fixed_dictionaries({c: st.integers(1, 6) for c in IDS}),
              st.floats(1e-4, 1.0)),
    min_size=1, max_size=12)


@given(rounds)
def test_conservation(spec):
    led = QosLedger()
    for i, (active, tries, duration) in enumerate(spec):
        dropped = [c for c in IDS if c not in active]
        charge_round(led, outcome(active, dropped, tries, duration=duration, index=i + 1), TOPO,
                     {c: 0.002 for c in IDS}, downlink={"server": 1e-4})
    for a, d, lost in zip(led.round_bits_attempted, led.round_bits_delivered, led.round_bits_lost):
        assert d + lost == a
    assert math.isclose(math.fsum(led.energy_j.values()), led.total_energy_j, rel_tol=1e-9)
    assert led.bits_delivered == sum(led.round_bits_delivered)
    assert math.isclose(led.total_time_s, math.fsum(led.round_durations_s), rel_tol=1e-12)


@given(rounds, st.integers(1, 4))
def test_merge_of_split_ledgers(spec, n_parts):
    # splitting clients across ledgers and merging preserves totals
    whole = QosLedger()
    parts = [QosLedger() for _ in range(n_parts)]
    for i, (active, tries, duration) in enumerate(spec):
        dropped = [c for c in IDS if c not in active]
        full = outcome(active, dropped, tries, duration=duration, index=i + 1)
        charge_round(whole, full, TOPO, {})
        for w, led in enumerate(parts):
            mine = [c for j, c in enumerate(IDS) if j % n_parts == w]
            charge_round(led, outcome([c for c in active if c in mine], [c for c in dropped if c in mine],
                                      tries, duration=duration, index=i + 1), TOPO, {})
    merged = merge(parts)
    assert merged.bits_attempted == whole.bits_attempted
    assert merged.bits_delivered == whole.bits_delivered
    assert merged.packets_lost == whole.packets_lost
    assert merged.round_bits_delivered == whole.round_bits_delivered
    assert merged.active_links_per_round == whole.active_links_per_round
    for c in IDS:
        assert math.isclose(merged.energy_j.get(c, 0.0), whole.energy_j.get(c, 0.0), rel_tol=1e-12)


def test_summary_keys():
    s = QosLedger().summary()
    assert s["rounds"] == 0 and s["mean_throughput_bps"] == 0.0


def test_one_second_at_720_mw():
    topo = parse_topology({"s": {"role": "server"}, "c": {"role": "client", "compute_power_w": 0.0,
                                                          "adj": {"s": {"channel": {}}}}})
    led = QosLedger()
    out = RoundOutcome(1, ("c",), {"c": 1.0}, frozenset(), 1.0, {"c": LinkSample.make(1.0, 1.0, 1)})
    charge_round(led, out, topo, {})
    assert led.energy_j["c"] == 0.72


def test_three_attempts_delivered():
    led = QosLedger()
    charge_round(led, outcome([IDS[0]], [], {IDS[0]: 3}), TOPO, {})
    assert (led.bits_attempted, led.bits_delivered, led.packets_lost) == (3000, 1000, 2)


def test_nothing_scheduled_leaves_ledger():
    led = QosLedger()
    charge_round(led, outcome([], [], {}), TOPO, {})
    assert led == QosLedger()


def test_throughput_examples():
    led = QosLedger()
    charge_round(led, outcome(IDS, [], {c: 1 for c in IDS}, duration=0.5), TOPO, {})
    assert throughput(led, 0) == 6000.0
    charge_round(led, outcome([], IDS, {c: 1 for c in IDS}, duration=1.0, index=2), TOPO, {})
    assert throughput(led, 1) == 0.0


@given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=6), st.floats(1e-3, 1e3))
def test_fairness_scale_invariant(energies, c):
    a, b = QosLedger(), QosLedger()
    for i, e in enumerate(energies):
        a.charge(f"c{i}", e)
        b.charge(f"c{i}", e * c)
    assert math.isclose(fairness_ratio(a), fairness_ratio(b), rel_tol=1e-12)
    assert fairness_ratio(a) >= 1.0


def test_active_links_match_engine(fixtures):
    from fedwire.config import load_config
    from fedwire.engine import Simulation
    cfg = load_config(fixtures / "analysis_partial.yaml").with_overrides(max_rounds=50)
    b = cfg.build()
    sim = Simulation(b.topology, b.task, b.engine, cfg.seed)
    rep = sim.run(b.termination)
    assert sim.ledger.active_links_per_round == rep.series("n_active")
    assert rep.series("n_active") == [len(r["activated"]) for r in rep.rounds]
