"""QoS accounting: energy, time, bits, packet loss and active links."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .topology import Topology, UnknownAgentError


class DegenerateFairnessError(ValueError):
    pass


@dataclass
class QosLedger:
    energy_j: dict[str, float] = field(default_factory=dict)
    total_energy_j: float = 0.0
    total_time_s: float = 0.0
    bits_attempted: int = 0
    bits_delivered: int = 0
    packets_lost: int = 0
    active_links_per_round: list[int] = field(default_factory=list)
    round_bits_attempted: list[int] = field(default_factory=list)
    round_bits_delivered: list[int] = field(default_factory=list)
    round_bits_lost: list[int] = field(default_factory=list)
    round_durations_s: list[float] = field(default_factory=list)

    def charge(self, agent_id: str, joules: float) -> None:
        if joules < 0:
            raise ValueError("energy charges must be nonnegative")
        self.energy_j[agent_id] = self.energy_j.get(agent_id, 0.0) + joules
        self.total_energy_j += joules

    def client_energies(self, topology: Topology) -> dict[str, float]:
        return {c: self.energy_j.get(c, 0.0) for c in topology.client_ids}

    def summary(self) -> dict:
        return {
            "total_energy_j": self.total_energy_j,
            "total_time_s": self.total_time_s,
            "bits_attempted": self.bits_attempted,
            "bits_delivered": self.bits_delivered,
            "packets_lost": self.packets_lost,
            "rounds": len(self.round_durations_s),
            "mean_active_links": (sum(self.active_links_per_round) / len(self.active_links_per_round)
                                  if self.active_links_per_round else 0.0),
            "mean_throughput_bps": (self.bits_delivered / self.total_time_s if self.total_time_s > 0 else 0.0),
        }


def charge_round(ledger: QosLedger, outcome, topology: Topology, compute_times: Mapping[str, float], *,
                 epsilon_s: float | None = None, truncate_dropped: bool = False,
                 downlink: Mapping[str, float] | None = None) -> QosLedger:
    """Add one round's costs to ``ledger`` (in place) and return it.

    Radio energy is transmit power times airtime. Every scheduled client pays
    for its full attempted airtime unless ``truncate_dropped`` caps dropped
    clients at the window ``epsilon_s``. Compute energy is charged to every
    scheduled client. ``downlink`` maps agent id to broadcast energy already
    computed by the engine.
    """
    activated = set(outcome.activated)
    scheduled = list(outcome.activated) + sorted(outcome.dropped)
    if not scheduled and not downlink:
        return ledger
    attempted = delivered = lost_bits = 0
    for cid in scheduled:
        try:
            agent = topology.agent(cid)
        except UnknownAgentError:
            raise UnknownAgentError(f"round outcome names unknown agent {cid!r}") from None
        sample = outcome.uplink_samples[cid]
        channel = topology.client_channel(cid)
        bits = channel.packet_bits
        ok = cid in activated
        airtime = sample.total_time_s
        if not ok and truncate_dropped and epsilon_s is not None:
            airtime = min(airtime, epsilon_s)
        joules = channel.transmit_power_w * airtime + agent.compute_power_w * compute_times.get(cid, 0.0)
        ledger.charge(cid, joules)
        attempted += bits * sample.retransmissions
        if ok:
            delivered += bits
            ledger.packets_lost += sample.retransmissions - 1
            lost_bits += bits * (sample.retransmissions - 1)
        else:
            ledger.packets_lost += sample.retransmissions
            lost_bits += bits * sample.retransmissions
    for agent_id, joules in sorted((downlink or {}).items()):
        ledger.charge(agent_id, joules)
    ledger.bits_attempted += attempted
    ledger.bits_delivered += delivered
    ledger.active_links_per_round.append(len(outcome.activated))
    ledger.round_bits_attempted.append(attempted)
    ledger.round_bits_delivered.append(delivered)
    ledger.round_bits_lost.append(lost_bits)
    ledger.round_durations_s.append(outcome.round_duration_s)
    ledger.total_time_s += outcome.round_duration_s
    return ledger


def fairness_ratio(ledger: QosLedger, client_ids=None) -> float:
    """Largest over smallest per-client cumulative energy."""
    ids = sorted(ledger.energy_j) if client_ids is None else list(client_ids)
    energies = [ledger.energy_j.get(c, 0.0) for c in ids]
    if len(energies) < 2:
        raise DegenerateFairnessError("need at least two clients")
    lo, hi = min(energies), max(energies)
    if not lo > 0:
        raise DegenerateFairnessError("a client has zero energy")
    return hi / lo


def throughput(ledger: QosLedger, round_index: int) -> float:
    """Delivered bits of one round divided by that round's duration (bit/s)."""
    try:
        bits = ledger.round_bits_delivered[round_index]
        duration = ledger.round_durations_s[round_index]
    except IndexError:
        raise IndexError(f"round {round_index} not recorded") from None
    if bits == 0:
        return 0.0
    if not duration > 0:
        raise ZeroDivisionError(f"round {round_index} has zero duration")
    return bits / duration


def merge(ledgers) -> QosLedger:
    """Combine ledgers (e.g. one per worker). Reduction follows input order;
    per-round series are summed element-wise."""
    ledgers = list(ledgers)
    out = QosLedger()
    for led in ledgers:
        for agent_id in sorted(led.energy_j):
            out.energy_j[agent_id] = out.energy_j.get(agent_id, 0.0) + led.energy_j[agent_id]
        out.bits_attempted += led.bits_attempted
        out.bits_delivered += led.bits_delivered
        out.packets_lost += led.packets_lost
    out.energy_j = dict(sorted(out.energy_j.items()))
    out.total_energy_j = math.fsum(out.energy_j.values())
    n_rounds = max((len(led.round_durations_s) for led in ledgers), default=0)

    def col(name, i):
        return [getattr(led, name)[i] for led in ledgers if i < len(getattr(led, name))]

    for i in range(n_rounds):
        out.active_links_per_round.append(sum(col("active_links_per_round", i)))
        out.round_bits_attempted.append(sum(col("round_bits_attempted", i)))
        out.round_bits_delivered.append(sum(col("round_bits_delivered", i)))
        out.round_bits_lost.append(sum(col("round_bits_lost", i)))
        out.round_durations_s.append(max(col("round_durations_s", i)))
    out.total_time_s = math.fsum(out.round_durations_s)
    return out
