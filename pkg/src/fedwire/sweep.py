"""Parameter sweeps and time/energy-to-threshold tables."""
from __future__ import annotations

import csv
import json
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import report as report_io
from .config import ConfigError, RunConfig
from .engine import SimulationReport
from .workers import run_parallel

_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


@dataclass(frozen=True)
class ThresholdSpec:
    metric: str
    comparator: str
    values: tuple[float, ...]

    @classmethod
    def from_config(cls, data: dict) -> "ThresholdSpec | None":
        if not data:
            return None
        metric = data.get("metric", "gap")
        op = data.get("comparator", "<=")
        if op not in _OPS:
            raise ConfigError(f"thresholds.comparator must be one of {sorted(_OPS)}")
        if "values" in data:
            values = [float(v) for v in data["values"]]
        elif {"start", "stop", "step"} <= set(data):
            start, stop, step = (float(data[k]) for k in ("start", "stop", "step"))
            if not step > 0:
                raise ConfigError("thresholds.step must be positive")
            n = int(np.floor(abs(stop - start) / step + 1e-9)) + 1
            sign = 1.0 if stop >= start else -1.0
            values = [round(start + sign * i * step, 12) for i in range(n)]
        else:
            raise ConfigError("thresholds: give values or start/stop/step")
        return cls(metric, op, tuple(values))

    def ordered(self) -> list[float]:
        # lenient first: rising for >, falling for <
        return sorted(self.values, reverse=self.comparator in ("<", "<="))


def crossing(rep: SimulationReport, metric: str, comparator: str, threshold: float) -> dict | None:
    """Round, clock and cumulative energy when ``metric`` first crosses."""
    test = _OPS[comparator]
    if metric in rep.initial and test(rep.initial[metric], threshold):
        return {"round": 0, "time_s": 0.0, "energy_j": 0.0}
    for rec in rep.rounds:
        if test(rec[metric], threshold):
            return {"round": rec["round"], "time_s": rec["clock_s"], "energy_j": rec["energy_j"]}
    return None


def ladder(rows: Sequence[dict]) -> list[dict]:
    """Drop rows whose energy repeats the previous row's (keep the first)."""
    out = []
    for row in rows:
        if out and row["reached"] and out[-1]["reached"] and row["energy_j"] == out[-1]["energy_j"]:
            continue
        out.append(row)
    return out


def _label(point: dict) -> str:
    if not point:
        return "baseline"
    parts = []
    for k in sorted(point):
        v = point[k]
        parts.append(f"{k}={json.dumps(v, separators=(',', ':'))}")
    return "_".join(parts).replace("/", "-").replace(" ", "")


def run_sweep(config: RunConfig, out_dir: str | Path, n_workers: int | None = None) -> list[dict]:
    """One report per grid point plus ``table.csv``. Returns the table rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = ThresholdSpec.from_config(config.thresholds)
    names = sorted(config.sweep)
    rows: list[dict] = []
    for i, point in enumerate(config.grid()):
        cfg = config.with_overrides(**point)
        if n_workers is not None:
            cfg = cfg.with_overrides(workers=n_workers)
        rep = run_parallel(None, cfg)
        fname = f"run_{i:03d}.jsonl"
        report_io.write(out_dir / fname, rep)
        if spec is None:
            continue
        point_rows = []
        for thr in spec.ordered():
            hit = crossing(rep, spec.metric, spec.comparator, thr)
            row = {**{n: point[n] for n in names}, "point": _label(point), "report": fname,
                   "metric": spec.metric, "threshold": thr, "reached": hit is not None,
                   "round": hit["round"] if hit else None, "time_s": hit["time_s"] if hit else None,
                   "energy_j": hit["energy_j"] if hit else None}
            point_rows.append(row)
        rows.extend(ladder(point_rows))
    columns = names + ["point", "report", "metric", "threshold", "reached", "round", "time_s", "energy_j"]
    with open(out_dir / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else (json.dumps(row[k]) if isinstance(row[k], list) else row[k]))
                             for k in columns})
    return rows
