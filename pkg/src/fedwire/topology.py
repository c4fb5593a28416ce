"""Agent configuration documents and the network graph built from them.

A document is a mapping with one entry per agent id. The first layer of each
entry holds the agent's own attributes (``role``, ``cell_id``, powers,
battery, position, ...). The ``adj`` entry maps neighbour ids to edge
attributes: wireless edges carry a ``channel`` block, AP-server backhaul
edges carry ``p2p_rate_bps`` / ``p2p_delay_s``. Edges listed in one direction
only are mirrored onto the other.

Example (JSON)::

    {
      "server": {"role": "server", "adj": {"ap0": {"p2p_rate_bps": 5e8, "p2p_delay_s": 0.02}}},
      "ap0": {"role": "ap", "cell_id": "cell0"},
      "client0": {"role": "client", "cell_id": "cell0",
                  "adj": {"ap0": {"channel": {"per": 1e-4}}}}
    }
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .channel import ChannelError, ChannelParams

ROLES = ("server", "ap", "client")
DEFAULT_P2P_RATE_BPS = 500e6
DEFAULT_P2P_DELAY_S = 0.02

_AGENT_KEYS = {"role", "cell_id", "compute_power_w", "compute_time_per_epoch_s",
               "compute_time_per_sample_s", "transmit_power_w", "battery_j",
               "position", "speed_mps", "adj"}


class TopologyError(ValueError):
    pass


class DuplicateIdError(TopologyError):
    pass


class MissingServerError(TopologyError):
    pass


class MultipleServersError(TopologyError):
    pass


class UnreachableClientError(TopologyError):
    pass


class MalformedAttributeError(TopologyError):
    pass


class UnknownAgentError(TopologyError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class EdgeAttrs:
    channel: ChannelParams | None = None
    p2p_rate_bps: float | None = None
    p2p_delay_s: float | None = None

    @property
    def wireless(self) -> bool:
        return self.channel is not None

    def backhaul_time(self, bits: int) -> float:
        """Serialisation plus propagation time of a point-to-point hop."""
        return self.p2p_delay_s + bits / self.p2p_rate_bps

    def to_dict(self) -> dict:
        if self.channel is not None:
            return {"channel": self.channel.to_dict()}
        return {"p2p_rate_bps": self.p2p_rate_bps, "p2p_delay_s": self.p2p_delay_s}


@dataclass(frozen=True)
class AgentSpec:
    id: str
    role: str
    cell_id: str = "cell0"
    compute_power_w: float = 0.0
    compute_time_per_epoch_s: float = 0.0
    compute_time_per_sample_s: float = 0.0
    transmit_power_w: float = 0.0
    battery_j: float | None = None
    position: tuple[float, float] | None = None
    speed_mps: float = 0.0
    adj: Mapping[str, EdgeAttrs] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "role": self.role,
            "cell_id": self.cell_id,
            "compute_power_w": self.compute_power_w,
            "compute_time_per_epoch_s": self.compute_time_per_epoch_s,
            "compute_time_per_sample_s": self.compute_time_per_sample_s,
            "transmit_power_w": self.transmit_power_w,
            "speed_mps": self.speed_mps,
            "adj": {k: self.adj[k].to_dict() for k in sorted(self.adj)},
        }
        if self.battery_j is not None:
            out["battery_j"] = self.battery_j
        if self.position is not None:
            out["position"] = list(self.position)
        return out


@dataclass(frozen=True)
class Topology:
    agents: tuple[AgentSpec, ...]
    server_id: str
    cells: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {a.id: a for a in self.agents})
        object.__setattr__(self, "_paths", {})

    def agent(self, agent_id: str) -> AgentSpec:
        try:
            return self._by_id[agent_id]
        except KeyError:
            raise UnknownAgentError(f"unknown agent id {agent_id!r}") from None

    def __contains__(self, agent_id: str) -> bool:
        return agent_id in self._by_id

    def route(self, client_id: str) -> list[str]:
        """Cached client->server agent ids (see :func:`uplink_route`)."""
        if client_id not in self._paths:
            self._paths[client_id] = _path_ids(self, client_id)
        return list(self._paths[client_id])

    def client_channel(self, client_id: str) -> ChannelParams:
        """Channel of the client's first (wireless) hop."""
        ids = self.route(client_id)
        return self.agent(ids[0]).adj[ids[1]].channel

    @property
    def client_ids(self) -> list[str]:
        return sorted(a.id for a in self.agents if a.role == "client")

    @property
    def edges(self) -> list[tuple[str, str]]:
        """Undirected edges, each listed once as a sorted pair."""
        return sorted({tuple(sorted((a.id, n))) for a in self.agents for n in a.adj})

    def to_document(self) -> dict:
        return {a.id: a.to_dict() for a in sorted(self.agents, key=lambda a: a.id)}

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True) + "\n"

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return self.to_document() == other.to_document() and self.server_id == other.server_id

    __hash__ = None


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise DuplicateIdError(f"duplicate key {k!r}")
        out[k] = v
    return out


class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _construct_unique_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise DuplicateIdError(f"duplicate key {key!r}")
        seen.add(key)
    return loader.construct_mapping(node, deep=deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_unique_mapping)


def load_document(text: str, fmt: str = "json") -> dict:
    """Parse structured text, rejecting duplicate keys at any level."""
    if fmt == "json":
        try:
            return json.loads(text, object_pairs_hook=_reject_duplicates)
        except json.JSONDecodeError as exc:
            raise MalformedAttributeError(f"not valid JSON: {exc}") from None
    if fmt in ("yaml", "yml"):
        try:
            return yaml.load(text, Loader=_UniqueKeyLoader)
        except yaml.YAMLError as exc:
            raise MalformedAttributeError(f"not valid YAML: {exc}") from None
    raise ValueError(f"unknown document format {fmt!r}")


def _number(agent_id, key, value, *, positive=False, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MalformedAttributeError(f"agent {agent_id!r}: {key} must be a finite number, got {value!r}")
    if value < 0 or (positive and value == 0):
        raise MalformedAttributeError(
            f"agent {agent_id!r}: {key} must be {'positive' if positive else 'nonnegative'}, got {value!r}")
    return float(value)


def _parse_edge(src: str, dst: str, raw, roles: Mapping[str, str]) -> EdgeAttrs | None:
    """Returns None when the document gives no attributes for this direction."""
    where = f"edge {src!r}->{dst!r}"
    if raw is None or (isinstance(raw, Mapping) and not raw):
        return None
    if not isinstance(raw, Mapping):
        raise MalformedAttributeError(f"{where}: attributes must be a mapping")
    extra = set(raw) - {"channel", "p2p_rate_bps", "p2p_delay_s"}
    if extra:
        raise MalformedAttributeError(f"{where}: unknown attribute(s) {', '.join(sorted(extra))}")
    has_channel = "channel" in raw
    has_p2p = "p2p_rate_bps" in raw or "p2p_delay_s" in raw
    if has_channel and has_p2p:
        raise MalformedAttributeError(f"{where}: both channel and point-to-point attributes given")
    if has_channel:
        block = raw["channel"] if raw["channel"] is not None else {}
        if not isinstance(block, Mapping):
            raise MalformedAttributeError(f"{where}: channel must be a mapping")
        try:
            return EdgeAttrs(channel=ChannelParams.from_dict(dict(block)))
        except (ChannelError, TypeError) as exc:
            raise MalformedAttributeError(f"{where}: {exc}") from None
    if has_p2p:
        rate = _number(where, "p2p_rate_bps", raw.get("p2p_rate_bps", DEFAULT_P2P_RATE_BPS), positive=True)
        delay = _number(where, "p2p_delay_s", raw.get("p2p_delay_s", DEFAULT_P2P_DELAY_S))
        return EdgeAttrs(p2p_rate_bps=rate, p2p_delay_s=delay)
    raise AssertionError("unreachable")


def _default_edge(a: str, b: str, roles: Mapping[str, str]) -> EdgeAttrs:
    if "client" in (roles[a], roles[b]):
        return EdgeAttrs(channel=ChannelParams())
    return EdgeAttrs(p2p_rate_bps=DEFAULT_P2P_RATE_BPS, p2p_delay_s=DEFAULT_P2P_DELAY_S)


def parse_topology(document: str | Mapping, fmt: str = "json") -> Topology:
    """Validate an agent document (text or already-parsed mapping) into a Topology."""
    if isinstance(document, str):
        document = load_document(document, fmt)
    if not isinstance(document, Mapping) or not document:
        raise MalformedAttributeError("topology document must be a non-empty mapping of agent ids")

    roles: dict[str, str] = {}
    for agent_id, attrs in document.items():
        if not isinstance(agent_id, str) or not agent_id:
            raise MalformedAttributeError(f"agent id must be a non-empty string, got {agent_id!r}")
        if not isinstance(attrs, Mapping):
            raise MalformedAttributeError(f"agent {agent_id!r}: attributes must be a mapping")
        if "role" not in attrs:
            raise MalformedAttributeError(f"agent {agent_id!r}: missing attribute 'role'")
        if attrs["role"] not in ROLES:
            raise MalformedAttributeError(f"agent {agent_id!r}: role must be one of {ROLES}, got {attrs['role']!r}")
        unknown = set(attrs) - _AGENT_KEYS
        if unknown:
            raise MalformedAttributeError(f"agent {agent_id!r}: unknown attribute(s) {', '.join(sorted(unknown))}")
        roles[agent_id] = attrs["role"]

    servers = sorted(a for a, r in roles.items() if r == "server")
    if not servers:
        raise MissingServerError("no agent has role 'server'")
    if len(servers) > 1:
        raise MultipleServersError(f"more than one server: {', '.join(servers)}")
    server_id = servers[0]

    # forward edges as written, then mirror missing reverse directions
    directed: dict[tuple[str, str], EdgeAttrs] = {}
    for agent_id, attrs in document.items():
        adj = attrs.get("adj") or {}
        if not isinstance(adj, Mapping):
            raise MalformedAttributeError(f"agent {agent_id!r}: adj must be a mapping")
        for nb, raw in adj.items():
            if nb not in roles:
                raise MalformedAttributeError(f"edge {agent_id!r}->{nb!r}: unknown neighbour {nb!r}")
            if nb == agent_id:
                raise MalformedAttributeError(f"edge {agent_id!r}->{nb!r}: self loop")
            edge = _parse_edge(agent_id, nb, raw, roles)
            directed[(agent_id, nb)] = edge
    for (a, b), edge in list(directed.items()):
        if directed.get((b, a)) is None:
            directed[(b, a)] = edge if edge is not None else _default_edge(a, b, roles)
        if edge is None:
            directed[(a, b)] = directed[(b, a)]
    for (a, b), edge in directed.items():
        if "client" in (roles[a], roles[b]) and not edge.wireless:
            raise MalformedAttributeError(f"edge {a!r}->{b!r}: client links must be wireless")
        if "client" not in (roles[a], roles[b]) and edge.wireless:
            raise MalformedAttributeError(f"edge {a!r}->{b!r}: backhaul links must be point-to-point")

    agents = []
    for agent_id in sorted(document):
        attrs = document[agent_id]
        position = attrs.get("position")
        if position is not None:
            if (not isinstance(position, (list, tuple)) or len(position) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in position)):
                raise MalformedAttributeError(f"agent {agent_id!r}: position must be [x, y]")
            position = (float(position[0]), float(position[1]))
        cell_id = attrs.get("cell_id", "cell0")
        if not isinstance(cell_id, str) or not cell_id:
            raise MalformedAttributeError(f"agent {agent_id!r}: cell_id must be a non-empty string")
        agents.append(AgentSpec(
            id=agent_id,
            role=roles[agent_id],
            cell_id=cell_id,
            compute_power_w=_number(agent_id, "compute_power_w", attrs.get("compute_power_w", 0.0)),
            compute_time_per_epoch_s=_number(agent_id, "compute_time_per_epoch_s",
                                             attrs.get("compute_time_per_epoch_s", 0.0)),
            compute_time_per_sample_s=_number(agent_id, "compute_time_per_sample_s",
                                              attrs.get("compute_time_per_sample_s", 0.0)),
            transmit_power_w=_number(agent_id, "transmit_power_w", attrs.get("transmit_power_w", 0.0)),
            battery_j=_number(agent_id, "battery_j", attrs.get("battery_j"), positive=True, allow_none=True),
            position=position,
            speed_mps=_number(agent_id, "speed_mps", attrs.get("speed_mps", 0.0)),
            adj={b: e for (a, b), e in sorted(directed.items()) if a == agent_id},
        ))

    topo_cells: dict[str, list[str]] = {}
    for a in agents:
        if a.role == "client":
            topo_cells.setdefault(a.cell_id, []).append(a.id)
    topology = Topology(tuple(agents), server_id, {c: tuple(ids) for c, ids in sorted(topo_cells.items())})
    for client in topology.client_ids:
        topology.route(client)
    return topology


def load_topology(path: str | Path) -> Topology:
    path = Path(path)
    fmt = "yaml" if path.suffix in (".yaml", ".yml") else "json"
    return parse_topology(path.read_text(encoding="utf-8"), fmt)


def neighbors(topology: Topology, agent_id: str) -> list[tuple[str, EdgeAttrs]]:
    agent = topology.agent(agent_id)
    return [(nb, agent.adj[nb]) for nb in sorted(agent.adj)]


def _path_ids(topology: Topology, client_id: str) -> list[str]:
    """Shortest client->server route; only APs may relay. Ties go to the
    lexicographically smallest neighbour."""
    start = topology.agent(client_id)
    parent = {client_id: None}
    queue = deque([client_id])
    while queue:
        node = queue.popleft()
        if node == topology.server_id:
            path = [node]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        if node != client_id and topology.agent(node).role != "ap":
            continue
        for nb in sorted(topology.agent(node).adj):
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    raise UnreachableClientError(f"client {start.id!r} cannot reach server {topology.server_id!r}")


def uplink_path(topology: Topology, client_id: str) -> list[EdgeAttrs]:
    """Edge attributes hop by hop from the client to the server."""
    if topology.agent(client_id).role != "client":
        raise TopologyError(f"{client_id!r} is not a client")
    ids = topology.route(client_id)
    return [topology.agent(a).adj[b] for a, b in zip(ids, ids[1:])]


def uplink_route(topology: Topology, client_id: str) -> list[str]:
    """Agent ids from the client to the server."""
    return topology.route(client_id)


def build_cell_topology(n_cells: int, clients_per_cell: int, *, channel: Mapping | None = None,
                        client_attrs: Mapping | None = None, p2p_rate_bps: float = DEFAULT_P2P_RATE_BPS,
                        p2p_delay_s: float = DEFAULT_P2P_DELAY_S) -> dict:
    """Document for a server with ``n_cells`` APs, each serving ``clients_per_cell`` clients."""
    width = max(2, len(str(max(n_cells, clients_per_cell) - 1)))
    doc: dict[str, Any] = {"server": {"role": "server", "adj": {}}}
    for c in range(n_cells):
        cell = f"cell{c:0{width}d}"
        ap = f"ap{c:0{width}d}"
        doc["server"]["adj"][ap] = {"p2p_rate_bps": p2p_rate_bps, "p2p_delay_s": p2p_delay_s}
        doc[ap] = {"role": "ap", "cell_id": cell}
        for k in range(clients_per_cell):
            cid = f"client{c:0{width}d}_{k:0{width}d}"
            entry = {"role": "client", "cell_id": cell, "adj": {ap: {"channel": dict(channel or {})}}}
            entry.update(dict(client_attrs or {}))
            doc[cid] = entry
    return doc
