"""Experiment plans, replicated runs and confidence-interval reports.

A plan is a base scenario plus a list of controller variants and a seed
list. Every (variant, seed) pair runs in its own engine, optionally in a
process pool, and the results are reduced to per-variant means with 95%
confidence half-widths. All outputs are plain files so that the ``report``
command can rebuild the tables later without rerunning anything.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .controller import GUARDRAIL_ACTIONS, ActionKind
from .engine import SimulationAborted, run_scenario
from .model import ConfigError, Features
from .scenario import Scenario, load_scenario

log = logging.getLogger(__name__)

EXPERIMENTS = ("E1", "E2", "E3", "LLM")
DEFAULT_SEEDS = tuple(range(1, 8))
CI_Z = 1.96

FULL = Features(mig=True, placement=True, guardrails=True)
MIG_ONLY = Features(mig=True, placement=False, guardrails=False)
PLACEMENT_ONLY = Features(mig=False, placement=True, guardrails=False)
GUARDS_ONLY = Features(mig=False, placement=False, guardrails=True)
STATIC = Features(mig=False, placement=False, guardrails=False)

ABLATION_ORDER = ("full", "mig-only", "placement-only", "guards-only", "static")

# Sweep grids for the sensitivity experiment.
E3_TAIL_THRESHOLDS_MS = (10.0, 15.0, 20.0)
E3_PERSISTENCE = (1, 3, 5)

METRICS = ("miss_rate", "p95_ms", "p99_ms", "p999_ms", "throughput_rps", "norm_throughput",
           "moves_per_hour", "actions_per_hour", "reconfig_pause_mean_s")

_RECONFIG_KINDS = {ActionKind.MOVE.value, ActionKind.MIG_UP.value, ActionKind.MIG_DOWN.value}
_GUARD_KINDS = {k.value for k in GUARDRAIL_ACTIONS}
_COUNTED = _RECONFIG_KINDS | _GUARD_KINDS


@dataclass(frozen=True)
class Variant:
    """A named controller configuration applied on top of the base scenario."""

    name: str
    features: Features = FULL
    overrides: tuple = ()  # (ControllerConfig field, value) pairs

    def apply(self, scenario: Scenario) -> Scenario:
        return scenario.with_controller(features=self.features, **dict(self.overrides))


@dataclass(frozen=True)
class ExperimentPlan:
    experiment: str
    scenario: str = "default"
    variants: tuple = ()
    seeds: tuple = DEFAULT_SEEDS
    horizon_s: Optional[float] = None
    tenant: Optional[str] = None  # latency-sensitive tenant to report on
    baseline: str = "static"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose one of {', '.join(EXPERIMENTS)}")
        if not self.variants:
            raise ConfigError("a plan needs at least one variant")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}")
        if not self.seeds:
            raise ConfigError("a plan needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.horizon_s is not None and not self.horizon_s > 0:
            raise ConfigError("horizon_s must be > 0")
        if self.experiment == "E2":
            expected = dict(zip(ABLATION_ORDER, (FULL, MIG_ONLY, PLACEMENT_ONLY,
                                                 GUARDS_ONLY, STATIC)))
            got = {v.name: v.features for v in self.variants}
            if got != expected:
                raise ConfigError("E2 must contain exactly the five ablation variants")

    def load(self) -> Scenario:
        sc = load_scenario(self.scenario)
        if self.horizon_s is not None:
            sc = dataclasses.replace(sc, horizon_s=float(self.horizon_s))
        return sc

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "scenario": self.scenario,
            "seeds": list(self.seeds),
            "horizon_s": self.horizon_s,
            "tenant": self.tenant,
            "baseline": self.baseline,
            "variants": [{"name": v.name, "features": dataclasses.asdict(v.features),
                          "overrides": dict(v.overrides)} for v in self.variants],
        }


def make_plan(experiment: str, seeds: int | Sequence[int] = 7, scenario: Optional[str] = None,
              horizon_s: Optional[float] = None) -> ExperimentPlan:
    """The standard plan for ``experiment`` (case-insensitive)."""
    exp = experiment.upper()
    if isinstance(seeds, int):
        if seeds < 1:
            raise ConfigError("need at least one seed")
        seeds = tuple(range(1, seeds + 1))
    seeds = tuple(int(s) for s in seeds)
    if exp == "E1":
        variants = (Variant("full", FULL), Variant("static", STATIC))
        default_scenario = "default"
    elif exp == "E2":
        variants = tuple(Variant(n, f) for n, f in zip(
            ABLATION_ORDER, (FULL, MIG_ONLY, PLACEMENT_ONLY, GUARDS_ONLY, STATIC)))
        default_scenario = "default"
    elif exp == "E3":
        variants = [Variant(f"tau={t:g}", FULL, (("tail_threshold_ms", t),))
                    for t in E3_TAIL_THRESHOLDS_MS]
        variants += [Variant(f"Y={y}", FULL, (("persistence_windows", y),))
                     for y in E3_PERSISTENCE]
        variants.append(Variant("static", STATIC))
        variants = tuple(variants)
        default_scenario = "default"
    elif exp == "LLM":
        variants = (Variant("full", FULL), Variant("static", STATIC))
        default_scenario = "llm-ttft"
    else:
        raise ConfigError(f"unknown experiment {experiment!r}; "
                          f"choose one of {', '.join(EXPERIMENTS)}")
    return ExperimentPlan(exp, scenario or default_scenario, variants, seeds, horizon_s)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def aggregate_ci(values: Sequence[float]) -> tuple[float, Optional[float]]:
    """Mean and 95% half-width ``1.96 * s / sqrt(n)``.

    With fewer than two values the interval is undefined and the half-width
    is ``None``.
    """
    x = np.asarray(list(values), dtype=float)
    if x.size == 0:
        raise ValueError("no values to aggregate")
    mean = float(x.mean())
    if x.size < 2:
        return mean, None
    s = float(x.std(ddof=1))
    return mean, CI_Z * s / math.sqrt(x.size)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: dict = field(default_factory=dict)
    actions: list = field(default_factory=list)  # action records as dicts
    summary: dict = field(default_factory=dict)
    aborted: Optional[dict] = None


def _pick_tenant(scenario: Scenario, tenant: Optional[str]) -> str:
    if tenant is not None:
        return tenant
    ls = scenario.latency_sensitive
    if not ls:
        raise ConfigError(f"scenario {scenario.name!r} has no latency-sensitive tenant")
    return ls[0]


def _run_one(args) -> RunResult:
    scenario, variant, seed, tenant, run_dir, keep_traces = args
    sc = variant.apply(scenario)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
    try:
        trace = run_scenario(sc, seed, out_dir=run_dir if keep_traces else None)
    except SimulationAborted as e:
        res = RunResult(variant.name, seed, aborted=e.diagnostic)
        if run_dir is not None:
            _write_json(Path(run_dir) / "summary.json", {"aborted": e.diagnostic})
        return res
    actions = [r.to_dict() for r in trace.actions]
    if run_dir is not None and not keep_traces:
        with open(Path(run_dir) / "actions.jsonl", "w") as f:
            for line in trace.action_lines():
                f.write(line + "\n")
        _write_json(Path(run_dir) / "summary.json", trace.summary)
    t = trace.summary["tenants"].get(tenant)
    if t is None:
        raise ConfigError(f"tenant {tenant!r} produced no latency stream")
    hours = trace.horizon_s / 3600.0
    counted = sum(1 for a in actions if a["action"] in _COUNTED
                  and (a["tenant"] == tenant or a["trigger"] == tenant))
    pauses = trace.summary["reconfig_pause_s"]
    metrics = {
        "miss_rate": t["miss_rate"],
        "p95_ms": t["p95_ms"],
        "p99_ms": t["p99_ms"],
        "p999_ms": t["p999_ms"],
        "throughput_rps": t["throughput_rps"],
        "moves_per_hour": t["moves_per_hour"],
        "actions_per_hour": counted / hours,
        "reconfig_pause_mean_s": pauses["mean"] if pauses["mean"] is not None else 0.0,
    }
    return RunResult(variant.name, seed, metrics, actions, trace.summary)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class VariantStats:
    name: str
    n: int
    mean: dict
    ci: dict
    per_seed: dict  # metric -> list ordered like seeds
    incomplete: bool = False
    aborted_seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SummaryReport:
    experiment: str
    scenario: str
    tenant: str
    seeds: list
    variants: dict  # name -> VariantStats, in plan order
    ordering: list = field(default_factory=list)  # variant names by mean p99, ascending
    pairwise: dict = field(default_factory=dict)  # "a<b" -> seeds where a's p99 < b's
    overheads: dict = field(default_factory=dict)
    runs: list = field(default_factory=list, repr=False)  # RunResult, not serialized

    @property
    def incomplete(self) -> list:
        return [n for n, v in self.variants.items() if v.incomplete]

    def mean(self, variant: str, metric: str) -> float:
        return self.variants[variant].mean[metric]

    def per_seed(self, variant: str, metric: str) -> list:
        return self.variants[variant].per_seed[metric]

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "scenario": self.scenario,
            "tenant": self.tenant,
            "seeds": self.seeds,
            "variants": {n: v.to_dict() for n, v in self.variants.items()},
            "variant_order": list(self.variants),
            "ordering": self.ordering,
            "pairwise": self.pairwise,
            "overheads": self.overheads,
            "incomplete": self.incomplete,
        }

    def tidy_rows(self) -> list[tuple]:
        rows = []
        for name, v in self.variants.items():
            for metric in METRICS:
                for seed, value in zip(self.seeds, v.per_seed.get(metric, [])):
                    rows.append((name, seed, metric, value))
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "summary.json", self.to_dict())
        with open(out / "metrics.tsv", "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(("variant", "seed", "metric", "value"))
            for name, seed, metric, value in self.tidy_rows():
                w.writerow((name, seed, metric, "" if value is None else repr(float(value))))
        with open(out / "report.md", "w") as f:
            f.write(format_report(self.to_dict()))


def _reduce(plan: ExperimentPlan, tenant: str, runs: list[RunResult]) -> SummaryReport:
    by_variant: dict[str, dict[int, RunResult]] = {v.name: {} for v in plan.variants}
    for r in runs:
        by_variant[r.variant][r.seed] = r
    seeds = list(plan.seeds)

    base = by_variant.get(plan.baseline, {})
    base_thr = [r.metrics["throughput_rps"] for r in base.values() if r.aborted is None]
    base_mean = float(np.mean(base_thr)) if base_thr else None

    stats: dict[str, VariantStats] = {}
    for v in plan.variants:
        rs = [by_variant[v.name][s] for s in seeds]
        aborted = [r.seed for r in rs if r.aborted is not None]
        ok = [r for r in rs if r.aborted is None]
        per_seed: dict[str, list] = {}
        for metric in METRICS:
            if metric == "norm_throughput":
                vals = [None if r.aborted is not None or not base_mean
                        else r.metrics["throughput_rps"] / base_mean for r in rs]
            else:
                vals = [None if r.aborted is not None else r.metrics[metric] for r in rs]
            per_seed[metric] = vals
        mean, ci = {}, {}
        for metric, vals in per_seed.items():
            good = [x for x in vals if x is not None]
            if good and not aborted:
                mean[metric], ci[metric] = aggregate_ci(good)
            else:
                # an incomplete variant is flagged, never silently averaged
                mean[metric], ci[metric] = None, None
        stats[v.name] = VariantStats(v.name, len(ok), mean, ci, per_seed,
                                     incomplete=bool(aborted), aborted_seeds=aborted)

    complete = [n for n, s in stats.items() if not s.incomplete]
    ordering = sorted(complete, key=lambda n: (stats[n].mean["p99_ms"], n))
    pairwise = {}
    names = list(stats)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pa, pb = stats[a].per_seed["p99_ms"], stats[b].per_seed["p99_ms"]
            pairwise[f"{a}<{b}"] = sum(1 for x, y in zip(pa, pb)
                                       if x is not None and y is not None and x < y)

    pauses = [a["pause_s"] for r in runs for a in r.actions if a.get("pause_s") is not None]
    moves = [r.metrics["moves_per_hour"] for r in runs if r.aborted is None]
    overheads = {
        "reconfig_pause_count": len(pauses),
        "reconfig_pause_mean_s": float(np.mean(pauses)) if pauses else None,
        "reconfig_pause_sd_s": float(np.std(pauses, ddof=1)) if len(pauses) > 1 else None,
        "reconfig_pause_max_s": float(np.max(pauses)) if pauses else None,
        "moves_per_hour_max": float(np.max(moves)) if moves else None,
    }
    return SummaryReport(plan.experiment, plan.scenario, tenant, seeds, stats, ordering,
                         pairwise, overheads, runs=sorted(runs, key=lambda r: (r.variant, r.seed)))


def run_experiment(plan: ExperimentPlan, out_dir=None, workers: Optional[int] = None,
                   keep_traces: bool = False) -> SummaryReport:
    """Run every (variant, seed) pair of ``plan`` and reduce to a report.

    With ``out_dir`` each run writes ``<variant>/seed-<n>/`` (summary and
    action log; latency and signal traces too when ``keep_traces``) and the
    aggregate lands in ``summary.json``, ``metrics.tsv`` and ``report.md``.
    """
    plan.validate()
    scenario = plan.load()
    tenant = _pick_tenant(scenario, plan.tenant)
    jobs = []
    for v in plan.variants:
        for seed in plan.seeds:
            run_dir = None
            if out_dir is not None:
                run_dir = str(Path(out_dir) / _safe(v.name) / f"seed-{seed}")
            jobs.append((scenario, v, seed, tenant, run_dir, keep_traces))
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(workers, len(jobs)))
    log.info("experiment %s: %d runs on %d worker(s)", plan.experiment, len(jobs), workers)
    if workers == 1:
        runs = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            runs = list(ex.map(_run_one, jobs))
    for r in runs:
        if r.aborted is not None:
            log.warning("variant %s seed %d aborted: %s", r.variant, r.seed, r.aborted)
    report = _reduce(plan, tenant, runs)
    if out_dir is not None:
        _write_json(Path(out_dir) / "plan.json", plan.to_dict())
        report.write(out_dir)
    return report


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def _cell(mean, ci, fmt) -> str:
    if mean is None:
        return "incomplete"
    if ci is None:
        return format(mean, fmt)
    return f"{format(mean, fmt)} ± {format(ci, fmt)}"


def format_report(summary: dict) -> str:
    """Markdown tables from a serialized :class:`SummaryReport`."""
    lines = [f"# {summary['experiment']} on {summary['scenario']} "
             f"(tenant {summary['tenant']}, {len(summary['seeds'])} seeds)", ""]
    cols = (("miss_rate", "miss-rate", ".4f"), ("p95_ms", "p95 ms", ".2f"),
            ("p99_ms", "p99 ms", ".2f"), ("p999_ms", "p999 ms", ".2f"),
            ("norm_throughput", "norm. thr.", ".3f"), ("moves_per_hour", "moves/h", ".2f"),
            ("actions_per_hour", "actions/h", ".2f"))
    lines.append("| variant | " + " | ".join(c[1] for c in cols) + " |")
    lines.append("|---" * (len(cols) + 1) + "|")
    for name in summary.get("variant_order", list(summary["variants"])):
        v = summary["variants"][name]
        cells = [_cell(v["mean"].get(k), v["ci"].get(k), f) for k, _, f in cols]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    lines.append("")
    if summary["ordering"]:
        lines.append("p99 ordering (mean, ascending): " + " < ".join(summary["ordering"]))
    if summary["incomplete"]:
        lines.append("incomplete variants (aborted runs): " + ", ".join(summary["incomplete"]))
    lines.append("")
    lines.append("| pair | seeds where first has lower p99 |")
    lines.append("|---|---|")
    for pair, n in sorted(summary["pairwise"].items()):
        lines.append(f"| {pair} | {n}/{len(summary['seeds'])} |")
    lines.append("")
    o = summary["overheads"]
    if o.get("reconfig_pause_count"):
        lines.append(f"reconfiguration pauses: n={o['reconfig_pause_count']}, "
                     f"mean {o['reconfig_pause_mean_s']:.2f} s, "
                     f"max {o['reconfig_pause_max_s']:.2f} s")
    if o.get("moves_per_hour_max") is not None:
        lines.append(f"max moves per hour in any run: {o['moves_per_hour_max']:.2f}")
    return "\n".join(lines) + "\n"


def load_report(in_dir) -> dict:
    path = Path(in_dir) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"no summary.json in {in_dir}")
    with open(path) as f:
        return json.load(f)
