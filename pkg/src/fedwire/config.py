"""Run configuration documents (YAML or JSON).

A config names a topology (file path relative to the config, or a generated
cell layout), a synthetic task, engine and learning-rate settings, optional
noise, termination conditions and a seed. There is no clock-based default
seed.
"""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import analysis
from .engine import EngineConfig, LearningRate, TerminationSpec
from .learning import ConvexTask, NoiseSpec, load_dataset, synthetic_task
from .topology import Topology, TopologyError, build_cell_topology, parse_topology


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"seed", "topology", "task", "engine", "learning_rate", "noise", "termination",
             "workers", "replicas", "sweep", "thresholds", "analysis", "output"}
_TASK_KEYS = {"kind", "dim", "samples_per_client", "total_samples", "ratios", "lam", "label_noise",
              "heterogeneity", "feature_scale", "seed", "dataset"}
_ENGINE_KEYS = {"mode", "time_window_s", "local_steps", "batch_size", "rule", "async_rule", "async_weight",
                "first_k", "charge_downlink", "truncate_dropped_airtime", "enforce_battery", "record_models"}
_LR_KEYS = {"schedule", "eta", "mu", "gamma", "scaling", "expected_r", "per_step"}
_NOISE_KEYS = {"mode", "nis", "malicious"}
_TERM_KEYS = {"max_rounds", "max_sim_time_s", "max_energy_j", "target"}

SWEEP_PARAMS = {
    "per": "topology",
    "local_steps": "engine",
    "batch_size": "engine",
    "time_window_s": "engine",
    "ratios": "task",
    "eta": "learning_rate",
    "nis": "noise",
}


def _check_keys(section: str, data: Any, allowed: set) -> dict:
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(sorted(unknown))}")
    return dict(data)


def read_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse ({exc})") from None
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return dict(doc)


@dataclass
class Built:
    topology: Topology
    task: ConvexTask
    engine: EngineConfig
    termination: TerminationSpec


@dataclass
class RunConfig:
    doc: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.doc = _check_keys("config", self.doc, _TOP_KEYS)
        if "seed" not in self.doc or isinstance(self.doc["seed"], bool) or not isinstance(self.doc["seed"], int):
            raise ConfigError("seed: an integer seed is required")
        if "topology" not in self.doc:
            raise ConfigError("topology: missing")
        for name, keys in (("task", _TASK_KEYS), ("engine", _ENGINE_KEYS), ("learning_rate", _LR_KEYS),
                           ("noise", _NOISE_KEYS), ("termination", _TERM_KEYS)):
            _check_keys(name, self.doc.get(name), keys)
        for name in self.sweep:
            if name not in SWEEP_PARAMS:
                raise ConfigError(f"sweep: invalid parameter name {name!r} (known: {', '.join(sorted(SWEEP_PARAMS))})")
        self._built: Built | None = None

    # -- accessors --------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def workers(self) -> int | None:
        return self.doc.get("workers")

    @property
    def replicas(self) -> int:
        return int(self.doc.get("replicas", 1))

    @property
    def sweep(self) -> dict:
        s = self.doc.get("sweep") or {}
        if not isinstance(s, Mapping):
            raise ConfigError("sweep: expected a mapping of parameter -> list of values")
        return dict(s)

    @property
    def thresholds(self) -> dict:
        return dict(self.doc.get("thresholds") or {})

    def with_overrides(self, **changes) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        for name, value in changes.items():
            if name == "seed":
                doc["seed"] = value
            elif name in ("workers", "replicas"):
                doc[name] = value
            elif name == "max_rounds":
                doc["termination"] = dict(doc.get("termination") or {}, max_rounds=value)
            elif name in SWEEP_PARAMS:
                section = SWEEP_PARAMS[name]
                if section == "topology":
                    doc.setdefault("_overrides", {})[name] = value
                else:
                    key = {"eta": "eta", "nis": "nis"}.get(name, name)
                    doc.setdefault(section, {})
                    doc[section] = dict(doc[section] or {}, **{key: value})
            else:
                raise ConfigError(f"unknown override {name!r}")
        overrides = doc.pop("_overrides", {})
        out = RunConfig(doc, self.base_dir)
        out._topology_overrides = {**getattr(self, "_topology_overrides", {}), **overrides}
        return out

    # -- construction -------------------------------------------------------------
    def topology_document(self) -> dict:
        spec = self.doc["topology"]
        if isinstance(spec, str):
            path = (self.base_dir / spec) if not Path(spec).is_absolute() else Path(spec)
            if not path.is_file():
                raise ConfigError(f"topology file not found: {path}")
            text = path.read_text(encoding="utf-8")
            fmt = "json" if path.suffix == ".json" else "yaml"
            try:
                from .topology import load_document
                return load_document(text, fmt)
            except TopologyError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if isinstance(spec, Mapping) and "generate" in spec:
            gen = dict(spec["generate"])
            try:
                return build_cell_topology(int(gen.pop("n_cells")), int(gen.pop("clients_per_cell")), **gen)
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"topology.generate: {exc}") from None
        if isinstance(spec, Mapping):
            return copy.deepcopy(dict(spec))
        raise ConfigError("topology: expected a path, an inline document or a generate block")

    def _topology(self) -> Topology:
        try:
            topo = parse_topology(self.topology_document())
            per = getattr(self, "_topology_overrides", {}).get("per")
            if per is not None:
                doc = topo.to_document()
                for entry in doc.values():
                    for edge in entry["adj"].values():
                        if edge.get("channel") is not None:
                            edge["channel"]["per"] = float(per)
                topo = parse_topology(doc)
        except TopologyError as exc:
            raise ConfigError(f"topology: {exc}") from None
        return topo

    def _task(self, n_clients: int) -> ConvexTask:
        spec = dict(self.doc.get("task") or {})
        kind = spec.pop("kind", "ridge-quadratic")
        lam = float(spec.pop("lam", 0.1))
        dataset = spec.pop("dataset", None)
        try:
            if dataset is not None:
                path = self.base_dir / dataset
                if not path.is_file():
                    raise ConfigError(f"dataset file not found: {path}")
                task = load_dataset(path, kind, lam, n_clients)
            else:
                dim = int(spec.pop("dim", 4))
                if "samples_per_client" not in spec and "ratios" not in spec:
                    spec["samples_per_client"] = 20
                task = synthetic_task(kind, n_clients, dim, lam=lam, **spec)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"task: {exc}") from None
        if task.n_clients != n_clients:
            raise ConfigError(f"task has {task.n_clients} clients, topology has {n_clients}")
        return task

    def _engine(self, task: ConvexTask) -> EngineConfig:
        eng = dict(self.doc.get("engine") or {})
        lr = dict(self.doc.get("learning_rate") or {})
        noise = dict(self.doc.get("noise") or {})
        try:
            if lr.get("schedule") == "theorem" and (lr.get("mu") is None or lr.get("gamma") is None):
                L, mu = analysis.smoothness(task)
                lr.setdefault("mu", mu)
                if lr.get("gamma") is None:
                    lr["gamma"] = max(8.0 * L / mu, float(max(eng.get("local_steps", 1), 1)))
            rate = LearningRate(**lr)
            spec = NoiseSpec(noise.get("mode", "none"), float(noise.get("nis", 0.0)),
                             frozenset(noise.get("malicious", ())))
            return EngineConfig(lr=rate, noise=spec, **eng)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"engine: {exc}") from None

    def _termination(self) -> TerminationSpec:
        term = dict(self.doc.get("termination") or {})
        if "target" in term and term["target"] is not None:
            term["target"] = tuple(term["target"])
        try:
            return TerminationSpec(**term)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"termination: {exc}") from None

    def build(self) -> Built:
        if self._built is None:
            topo = self._topology()
            task = self._task(len(topo.client_ids))
            self._built = Built(topo, task, self._engine(task), self._termination())
        return self._built

    def grid(self) -> list[dict]:
        """Cross product of the sweep values in sorted parameter order; one empty
        point when there is no sweep."""
        sweep = self.sweep
        names = sorted(sweep)
        for n in names:
            if not isinstance(sweep[n], list) or not sweep[n]:
                raise ConfigError(f"sweep.{n}: expected a non-empty list")
        return [dict(zip(names, combo)) for combo in itertools.product(*(sweep[n] for n in names))]


def load_config(path: str | Path, **overrides) -> RunConfig:
    path = Path(path)
    cfg = RunConfig(read_document(path), path.parent.resolve())
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.with_overrides(**changes) if changes else cfg


def default_rng_for_analysis(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
