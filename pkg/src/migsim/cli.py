"""Simulate MIG-partitioned GPU hosts and run controller experiments.

    migsim run --scenario default --seed 1 --out runs/one
    migsim experiment --plan e2 --seeds 7 --out runs/e2
    migsim report --in runs/e2
    migsim validate --scenario my.yaml

Failures exit nonzero and print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .engine import SimulationAborted, run_scenario
from .experiments import format_report, load_report, make_plan, run_experiment
from .model import ConfigError
from .scenario import load_scenario, shipped_scenarios

log = logging.getLogger("migsim")

EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_IO = 4


def _error(kind: str, message: str, code: int, **extra) -> int:
    rec = {"error": kind, "message": message, "exit_code": code}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.horizon is not None:
        import dataclasses
        sc = dataclasses.replace(sc, horizon_s=args.horizon)
    trace = run_scenario(sc, args.seed, out_dir=args.out)
    brief = {tid: {k: t[k] for k in ("completed", "miss_rate", "p99_ms", "throughput_rps")}
             for tid, t in trace.summary["tenants"].items()}
    print(json.dumps({"scenario": sc.name, "seed": args.seed, "out": args.out,
                      "tenants": brief, "actions": trace.summary["action_counts"]},
                     indent=2, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    plan = make_plan(args.plan, seeds=args.seeds, scenario=args.scenario,
                     horizon_s=args.horizon)
    report = run_experiment(plan, out_dir=args.out, workers=args.workers,
                            keep_traces=args.traces)
    print(format_report(report.to_dict()), end="")
    if report.incomplete:
        return _error("incomplete", "some runs aborted; see summary.json", EXIT_ABORTED,
                      variants=report.incomplete)
    return 0


def cmd_report(args) -> int:
    print(format_report(load_report(args.input)), end="")
    return 0


def cmd_validate(args) -> int:
    sc = load_scenario(args.scenario)
    print(json.dumps({"valid": True, "scenario": sc.name, "tenants": len(sc.tenants),
                      "deferred": len(sc.deferred), "horizon_s": sc.horizon_s},
                     sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="migsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    shipped = ", ".join(shipped_scenarios())

    r = sub.add_parser("run", help="simulate one scenario under one seed")
    r.add_argument("--scenario", required=True, help=f"YAML file or shipped name ({shipped})")
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--out", default=None, help="directory for latency/signal/action traces")
    r.add_argument("--horizon", type=float, default=None, help="override horizon (s)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("experiment", help="run a replicated experiment plan")
    e.add_argument("--plan", required=True, type=str.lower, choices=["e1", "e2", "e3", "llm"])
    e.add_argument("--seeds", type=int, default=7)
    e.add_argument("--out", required=True)
    e.add_argument("--scenario", default=None, help="override the plan's base scenario")
    e.add_argument("--horizon", type=float, default=None)
    e.add_argument("--workers", type=int, default=None)
    e.add_argument("--traces", action="store_true",
                   help="also keep per-request latency and signal traces")
    e.set_defaults(func=cmd_experiment)

    rep = sub.add_parser("report", help="print the tables of a finished experiment")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=cmd_report)

    v = sub.add_parser("validate", help="parse and check a scenario file")
    v.add_argument("--scenario", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        return _error("config", str(e), EXIT_CONFIG)
    except SimulationAborted as e:
        return _error("aborted", "simulation aborted", EXIT_ABORTED, diagnostic=e.diagnostic)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        return _error("io", str(e), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
