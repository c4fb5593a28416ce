"""Command-line front end.

Exit codes: 0 success, 1 a bound check failed, 2 configuration or input
error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from . import report as report_io
from .analysis import AnalysisError, bound_trace, estimate_constants
from .config import ConfigError, RunConfig, default_rng_for_analysis, load_config
from .sweep import run_sweep
from .topology import TopologyError, load_topology
from .workers import resolve_workers, run_parallel, run_replicas

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("fedwire")


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _load(args) -> RunConfig:
    cfg = load_config(args.config, seed=args.seed, workers=getattr(args, "workers", None))
    doc = cfg.doc
    changed = False
    if getattr(args, "topology", None):
        path = Path(args.topology)
        if not path.is_file():
            raise ConfigError(f"topology file not found: {path}")
        doc = dict(doc, topology=str(path.resolve()))
        changed = True
    if getattr(args, "enforce_battery", False):
        doc = dict(doc, engine=dict(doc.get("engine") or {}, enforce_battery=True))
        changed = True
    if getattr(args, "replicas", None) is not None:
        doc = dict(doc, replicas=args.replicas)
        changed = True
    if changed:
        new = RunConfig(doc, cfg.base_dir)
        new._topology_overrides = getattr(cfg, "_topology_overrides", {})
        cfg = new
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    cfg.build()
    workers = resolve_workers(cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.replicas > 1:
        reps = run_replicas(cfg, cfg.replicas, workers)
        report_io.write(out / "report.jsonl", reps)
        summary = {"replicas": cfg.replicas, "seed": cfg.seed,
                   "runs": [dict(rep.summary, replica=r) for r, rep in enumerate(reps)]}
        terminations = sorted({rep.termination for rep in reps})
    else:
        rep = run_parallel(None, cfg.with_overrides(workers=workers))
        report_io.write(out / "report.jsonl", rep)
        summary = rep.summary
        terminations = [rep.termination]
    _dump_json(out / "summary.json", summary)
    print(f"wrote {out / 'report.jsonl'}; termination: {', '.join(terminations)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.sweep:
        path = Path(args.sweep)
        if not path.is_file():
            raise ConfigError(f"sweep file not found: {path}")
        spec = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        doc = dict(cfg.doc, sweep=spec.get("sweep", spec))
        if "thresholds" in spec:
            doc["thresholds"] = spec["thresholds"]
        new = RunConfig(doc, cfg.base_dir)
        new._topology_overrides = getattr(cfg, "_topology_overrides", {})
        cfg = new
    cfg.grid()
    rows = run_sweep(cfg, args.out, resolve_workers(cfg.workers))
    print(f"wrote {len(cfg.grid())} report(s) and {len(rows)} table row(s) to {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load(args)
    built = cfg.build()
    path = Path(args.report)
    if not path.is_file():
        raise ConfigError(f"report file not found: {path}")
    try:
        reps = report_io.read(path)
    except report_io.ReportFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if args.replicas is not None and len(reps) != args.replicas:
        raise ConfigError(f"report holds {len(reps)} replica(s), expected {args.replicas}")
    e_local = built.engine.local_steps
    if e_local < 1:
        raise ConfigError("analysis needs at least one local step")
    params = estimate_constants(built.task, e_local, batch=built.engine.batch_size,
                                rng=default_rng_for_analysis(cfg.seed))
    try:
        trace = bound_trace(reps, params)
    except AnalysisError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out) if args.out else path.with_suffix(".trace.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(trace.to_json() + "\n", encoding="utf-8")
    ok = True
    for name, verdict in trace.verdicts.items():
        print(f"{name}: {'pass' if verdict else 'FAIL'}")
        ok = ok and verdict
    return EXIT_OK if ok else EXIT_VERDICT


def cmd_validate_topology(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise ConfigError(f"topology file not found: {path}")
    topo = load_topology(path)
    n_ap = sum(1 for a in topo.agents if a.role == "ap")
    print(f"ok: {len(topo.agents)} agents ({len(topo.client_ids)} clients, {n_ap} APs), "
          f"{len(topo.edges)} edges, {len(topo.cells)} cell(s), server {topo.server_id!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedwire", description="Federated averaging over stochastic wireless uplinks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="run configuration (YAML or JSON)")
        sp.add_argument("--topology", help="topology file, overriding the config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--workers", type=int, help="worker count (else $FEDWIRE_WORKERS, else 1)")
        sp.add_argument("--enforce-battery", action="store_true", help="stop clients whose battery is spent")
        sp.add_argument("--out", required=out_help is not None, help=out_help)

    run = sub.add_parser("run", help="run one simulation (or replicas)")
    common(run, "output directory for report.jsonl and summary.json")
    run.add_argument("--replicas", type=int, help="independent replicas (tagged in the report)")
    run.set_defaults(fn=cmd_run)

    sw = sub.add_parser("sweep", help="grid of runs and a threshold table")
    common(sw, "output directory")
    sw.add_argument("--sweep", help="YAML file with the sweep grid (overrides the config's)")
    sw.set_defaults(fn=cmd_sweep)

    an = sub.add_parser("analyze", help="check convergence bounds on a replica report")
    an.add_argument("report", help="report.jsonl produced by `run --replicas`")
    common(an, None)
    an.add_argument("--replicas", type=int, help="expected replica count")
    an.set_defaults(fn=cmd_analyze)

    vt = sub.add_parser("validate-topology", help="parse and check a topology file")
    vt.add_argument("path")
    vt.set_defaults(fn=cmd_validate_topology)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures surface as one line plus a code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
