"""Line-delimited report files.

Every line is one JSON object with sorted keys. A run contributes an
``initial`` record (round 0 evaluation), one ``round`` record per executed
round and a closing ``summary``. Replica runs tag every line with
``"replica": r``.
"""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .engine import SimulationReport


class ReportFormatError(ValueError):
    pass


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False, separators=(",", ":"))


def report_lines(report: SimulationReport, replica: int | None = None) -> list[str]:
    records = [report.initial, *report.rounds, report.summary]
    if replica is not None:
        records = [{**rec, "replica": replica} for rec in records]
    return [_dump(rec) for rec in records]


def dumps(reports: SimulationReport | Sequence[SimulationReport]) -> str:
    """Serialise one report, or a replica list (tagged by position)."""
    if isinstance(reports, SimulationReport):
        lines = report_lines(reports)
    else:
        lines = [line for r, rep in enumerate(reports) for line in report_lines(rep, r)]
    return "\n".join(lines) + "\n"


def write(path: str | Path, reports) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(reports))
    return path


def _parse(lines: Iterable[str]) -> dict[int | None, SimulationReport]:
    groups: dict[int | None, dict] = defaultdict(lambda: {"initial": None, "rounds": [], "summary": None})
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportFormatError(f"line {n}: {exc.msg}") from None
        kind = rec.get("record")
        g = groups[rec.get("replica")]
        if kind == "initial":
            g["initial"] = rec
        elif kind == "round":
            g["rounds"].append(rec)
        elif kind == "summary":
            g["summary"] = rec
        else:
            raise ReportFormatError(f"line {n}: unknown record type {kind!r}")
    out = {}
    for key, g in groups.items():
        if g["initial"] is None or g["summary"] is None:
            raise ReportFormatError(f"replica {key}: missing initial or summary record")
        out[key] = SimulationReport(g["initial"], g["rounds"], g["summary"])
    return out


def loads(text: str) -> list[SimulationReport]:
    """Parse a report file into a list of runs ordered by replica index."""
    groups = _parse(text.splitlines())
    if None in groups and len(groups) > 1:
        raise ReportFormatError("mixes tagged and untagged records")
    return [groups[k] for k in sorted(groups, key=lambda k: -1 if k is None else k)]


def read(path: str | Path) -> list[SimulationReport]:
    return loads(Path(path).read_text(encoding="utf-8"))
