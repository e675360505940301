"""Trace audits for controller policy soundness.

Each check takes the action log of one run (``ActionRecord`` objects or their
dict form) and returns a list of human-readable violations; an empty list
means the run is clean.
"""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable

from .controller import GATED_ACTIONS, ActionKind
from .model import (
    IO_THROTTLE_BOUNDS_MBPS,
    MPS_QUOTA_BOUNDS,
    A100_LATTICE,
    ControllerConfig,
    profile_by_name,
)
from .scenario import Scenario

_GATED = {k.value for k in GATED_ACTIONS}


def _as_dicts(actions: Iterable) -> list[dict]:
    return [a if isinstance(a, dict) else a.to_dict() for a in actions]


def audit_dwell_cooldown(actions, cfg: ControllerConfig) -> list[str]:
    """Gated actions of one tenant are at least ``dwell_obs`` observations
    apart, and none lands inside the cooldown that follows a change (the
    cooldown starts when the reconfiguration pause ends)."""
    out = []
    last: dict[str, dict] = {}
    for a in _as_dicts(actions):
        kind = a["action"]
        tid = a["tenant"]
        if kind not in _GATED and kind != ActionKind.ROLLBACK.value:
            continue
        prev = last.get(tid)
        if prev is not None and kind in _GATED:
            gap = a["obs_index"] - prev["obs_index"]
            if gap < cfg.dwell_obs:
                out.append(f"{tid}: {kind} at obs {a['obs_index']} only {gap} obs after "
                           f"{prev['action']} (dwell {cfg.dwell_obs})")
            pause_obs = math.ceil((prev.get("pause_s") or 0.0) / cfg.sample_interval_s)
            if gap < pause_obs + cfg.cooldown_obs:
                out.append(f"{tid}: {kind} at obs {a['obs_index']} inside the cooldown of "
                           f"{prev['action']} at obs {prev['obs_index']}")
        last[tid] = a
    return out


def _slices(cfg: dict):
    name = cfg.get("profile") if cfg else None
    return None if name is None else profile_by_name(name).slices


def audit_escalation(actions) -> list[str]:
    """No more than ``|M| - 1`` upgrades of a tenant between two relax actions.

    An upgrade is a ``mig_up`` or a move that lands on a larger profile; a
    rollback of an upgrade takes it back off the count.
    """
    limit = len(A100_LATTICE) - 1
    out = []
    count: dict[str, int] = defaultdict(int)
    upgrades: dict[str, set] = defaultdict(set)
    for a in _as_dicts(actions):
        tid, kind = a["tenant"], a["action"]
        if kind == ActionKind.MIG_DOWN.value:
            count[tid] = 0
            upgrades[tid].clear()
            continue
        if kind == ActionKind.ROLLBACK.value and a.get("reverts") in upgrades[tid]:
            upgrades[tid].discard(a["reverts"])
            count[tid] -= 1
            continue
        grew = (_slices(a.get("post")) or 0) > (_slices(a.get("pre")) or 0)
        if kind == ActionKind.MIG_UP.value or (kind == ActionKind.MOVE.value and grew):
            count[tid] += 1
            upgrades[tid].add(a["seq"])
            if count[tid] > limit:
                out.append(f"{tid}: {count[tid]} upgrades without a relax (limit {limit})")
    return out


def audit_guardrail_bounds(actions) -> list[str]:
    out = []
    lo_io, hi_io = IO_THROTTLE_BOUNDS_MBPS
    lo_q, hi_q = MPS_QUOTA_BOUNDS
    for a in _as_dicts(actions):
        post = a.get("post") or {}
        io = post.get("io_throttle_MBps")
        if io is not None and not lo_io <= io <= hi_io:
            out.append(f"{a['tenant']}: I/O throttle {io} MB/s outside [{lo_io}, {hi_io}]")
        q = post.get("mps_quota_pct")
        if q is not None and not lo_q <= q <= hi_q:
            out.append(f"{a['tenant']}: MPS quota {q}% outside [{lo_q}, {hi_q}]")
    return out


def _gpu_of(slot: str) -> tuple[str, int]:
    host, g, _ = slot.split("/")
    return host, int(g[1:])


def audit_admission(actions, scenario: Scenario) -> list[str]:
    """After every admit, the demand caps on each root that hosts a
    latency-sensitive tenant sum to less than the root's capacity.

    Placements are replayed from the scenario and the records' post
    configurations. MPS co-tenants never change root (they stay on their
    instance's GPU), so replaying only the recorded tenants is exact.
    """
    hosts = {h.id: h for h in scenario.topology.hosts}
    specs = {t.id: t.spec for t in scenario.tenants}
    specs.update({d.spec.id: d.spec for d in scenario.deferred})
    where: dict[str, tuple[str, int]] = {}
    for t in scenario.tenants:
        if t.placement is not None:
            where[t.id] = (t.placement.host, t.placement.gpu)
    out = []
    for a in _as_dicts(actions):
        slot = (a.get("post") or {}).get("slot")
        kind = a["action"]
        if slot is not None:
            where[a["tenant"]] = _gpu_of(slot)
        elif kind in (ActionKind.QUEUE.value, ActionKind.REJECT.value):
            where.pop(a["tenant"], None)
        if kind != ActionKind.ADMIT.value:
            continue
        demand: dict[tuple[str, int], float] = defaultdict(float)
        ls_roots = set()
        for tid, (hid, gid) in where.items():
            root = (hid, hosts[hid].gpu(gid).pcie_root_id)
            demand[root] += specs[tid].pcie_cap_Bps
            if specs[tid].is_latency_sensitive:
                ls_roots.add(root)
        for root in sorted(ls_roots):
            cap = hosts[root[0]].root(root[1]).capacity_Bps
            if not demand[root] < cap:
                out.append(f"after admitting {a['tenant']} at t={a['timestamp']}: "
                           f"root {root} demand {demand[root]:.3g} >= capacity {cap:.3g}")
    return out


def audit_trace(actions, scenario: Scenario) -> dict[str, list[str]]:
    """All policy audits for one run, keyed by check name."""
    cfg = scenario.controller
    actions = _as_dicts(actions)
    return {
        "dwell_cooldown": audit_dwell_cooldown(actions, cfg),
        "escalation": audit_escalation(actions),
        "guardrail_bounds": audit_guardrail_bounds(actions),
        "admission": audit_admission(actions, scenario),
    }
