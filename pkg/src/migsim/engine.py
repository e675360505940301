"""Deterministic discrete-event engine.

Latency-sensitive tenants are simulated request by request on a single FIFO
server per tenant: each request first moves its input across the tenant's
PCIe root (a processor-sharing server re-rated at every change of the active
flow set), then computes on its MIG slice, then picks up an exponential
scheduling-noise term. Background tenants are fluid sources that burst on
their root complex and load the host's block-I/O path.

Events are ordered by (time, kind priority, insertion counter), so a
(scenario, seed) pair always produces the same trace.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import os
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controller import (
    GUARDRAIL_ACTIONS,
    RECONFIG_ACTIONS,
    ActionKind,
    ActionRecord,
    HostController,
    Observation,
    RawCounters,
    clear_guardrail,
)
from .fabric import allocate_bandwidth, background_duty
from .model import A100_TOTAL_SLICES, AdmissionStatus, TenantClass, TenantState
from .scenario import FabricOptions, Scenario
from .telemetry import nearest_rank
from .workload import InterferenceSchedule, generate_arrivals, stream_rng

log = logging.getLogger(__name__)

# event kinds, in tie-break priority order
RECONFIG_DONE = 0
GUARDRAIL_EXPIRY = 1
SCHEDULE_TOGGLE = 2
BURST_TOGGLE = 3
TRANSFER_DONE = 4
COMPUTE_DONE = 5
ARRIVAL = 6
ADMISSION = 7
CONTROLLER_TICK = 8

EVENT_NAMES = {
    RECONFIG_DONE: "reconfig_done", GUARDRAIL_EXPIRY: "guardrail_expiry",
    SCHEDULE_TOGGLE: "schedule_toggle", BURST_TOGGLE: "burst_toggle",
    TRANSFER_DONE: "transfer_done", COMPUTE_DONE: "compute_done", ARRIVAL: "arrival",
    ADMISSION: "admission", CONTROLLER_TICK: "controller_tick",
}

LATENCY_COLUMNS = ("time_s", "tenant", "latency_ms", "slo_miss", "profile", "slot", "root_id")


class SimulationAborted(RuntimeError):
    """Queue growth crossed the guard limit; carries a diagnostic record."""

    def __init__(self, diagnostic: dict):
        super().__init__(diagnostic.get("reason", "simulation aborted"))
        self.diagnostic = diagnostic


def apply_reconfig_pause(kind, rng, fabric: FabricOptions = FabricOptions()) -> float:
    """Service pause for a reconfiguration: truncated normal, halved for moves.

    ``rng`` needs only a ``normal(loc, scale)`` method.
    """
    kind = ActionKind(kind)
    if kind not in RECONFIG_ACTIONS:
        raise ValueError(f"{kind.value} does not pause the tenant")
    mean, sd = fabric.pause_mean_s, fabric.pause_sd_s
    lo, hi = fabric.pause_min_s, fabric.pause_max_s
    scale = 0.5 if kind is ActionKind.MOVE else 1.0
    x = rng.normal(mean, sd)
    for _ in range(1000):
        if lo <= x <= hi:
            break
        x = rng.normal(mean, sd)
    else:
        x = min(max(x, lo), hi)
    return x * scale


# ---------------------------------------------------------------------------
# Runtime state
# ---------------------------------------------------------------------------


class _Root:
    __slots__ = ("key", "capacity", "flows", "grant", "last_t", "bytes", "heavy_bytes",
                 "heavy", "fg", "water_filling", "label")

    def __init__(self, key, capacity, water_filling):
        self.key = key
        self.label = f"{key[0]}/r{key[1]}"
        self.capacity = capacity
        self.flows: dict = {}  # tenant -> (weight, cap)
        self.grant: dict = {}
        self.last_t = 0.0
        self.bytes = 0.0
        self.heavy_bytes = 0.0
        self.heavy: set = set()  # bandwidth-heavy tenant ids
        self.fg: dict = {}  # tenant id -> _Server currently transferring here
        self.water_filling = water_filling


class _Server:
    __slots__ = ("id", "state", "times", "sizes", "work", "expo", "n", "next_idx",
                 "queue", "cur", "phase", "t0", "rate", "remaining", "version",
                 "paused", "pause_start", "resume_t", "root", "numa", "pressure",
                 "out_t", "out_lat", "out_slices", "out_slot", "out_root", "tick_samples",
                 "tick_completed", "tau", "max_q", "arrived", "disrupted", "gpu_key",
                 "busy_since", "busy_acc", "slot", "slices", "recovering")

    def __init__(self, state: TenantState, stream, expo):
        self.id = state.id
        self.state = state
        self.times = stream.times.tolist()
        self.sizes = stream.sizes.tolist()
        self.work = stream.work_ms.tolist()
        self.expo = expo
        self.n = len(self.times)
        self.next_idx = 0
        self.queue: deque = deque()
        self.cur = -1
        self.phase = 0  # 0 idle, 1 transfer, 2 compute
        self.t0 = 0.0
        self.rate = 0.0
        self.remaining = 0.0
        self.version = 0
        self.paused = False
        self.pause_start = -math.inf
        self.resume_t = -math.inf
        self.root = None
        self.numa = 0
        self.pressure = 0.0
        self.out_t: list = []
        self.out_lat: list = []
        self.out_slices: list = []
        self.out_slot: list = []
        self.out_root: list = []
        self.tick_samples: list = []
        self.tick_completed = 0
        self.tau = state.spec.slo_tail_ms
        self.max_q = [0, 0]
        self.arrived = 0
        self.disrupted = 0
        self.gpu_key = None
        self.busy_since = None
        self.busy_acc = 0.0
        self.slot = ""
        self.slices = 1
        # set by a pause, cleared once the backlog has drained
        self.recovering = False


class _Flow:
    __slots__ = ("id", "state", "schedule", "active", "bursting", "root", "numa", "gpu_key",
                 "version", "rng", "duty", "heavy")

    def __init__(self, state, schedule, rng):
        self.id = state.id
        self.state = state
        self.schedule = schedule
        self.active = False
        self.bursting = False
        self.root = None
        self.numa = 0
        self.gpu_key = None
        self.version = 0
        self.rng = rng
        self.duty = 0.0
        self.heavy = state.spec.tenant_class is TenantClass.BANDWIDTH_HEAVY


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


@dataclass
class SimTrace:
    scenario: str
    seed: int
    horizon_s: float
    latency: dict  # tenant -> dict of numpy columns
    signal_columns: list
    signals: list  # rows
    actions: list  # ActionRecord
    summary: dict = field(default_factory=dict)
    aborted: Optional[dict] = None

    def latencies(self, tenant: str) -> np.ndarray:
        return self.latency[tenant]["latency_ms"]

    def action_lines(self) -> list[str]:
        return [r.to_json() for r in self.actions]


def _fmt(x: float) -> str:
    return format(x, ".6f")


def summarize(trace: SimTrace, taus: dict, pauses: dict) -> dict:
    """Summary statistics, all recomputable from the raw streams."""
    hours = trace.horizon_s / 3600.0
    out: dict = {"scenario": trace.scenario, "seed": trace.seed, "horizon_s": trace.horizon_s,
                 "aborted": trace.aborted is not None, "tenants": {}}
    counts = Counter(r.action.value for r in trace.actions)
    out["action_counts"] = dict(sorted(counts.items()))
    for tid, cols in sorted(trace.latency.items()):
        lat = cols["latency_ms"]
        tau = taus[tid]
        s: dict = {"completed": int(lat.size), "slo_ms": tau}
        if lat.size:
            s["miss_rate"] = float(np.count_nonzero(lat > tau)) / lat.size
            for name, q in (("p50_ms", 0.5), ("p95_ms", 0.95), ("p99_ms", 0.99),
                            ("p999_ms", 0.999)):
                s[name] = nearest_rank(lat, q)
            s["mean_ms"] = float(lat.mean())
        else:
            s.update(miss_rate=None, p50_ms=None, p95_ms=None, p99_ms=None, p999_ms=None,
                     mean_ms=None)
        s["throughput_rps"] = lat.size / trace.horizon_s
        mine = [r for r in trace.actions if r.tenant == tid]
        s["moves_per_hour"] = sum(r.action is ActionKind.MOVE for r in mine) / hours
        s["actions"] = dict(sorted(Counter(r.action.value for r in trace.actions
                                           if r.tenant == tid or r.trigger == tid).items()))
        s.update(cols.get("meta", {}))
        out["tenants"][tid] = s
    p = [x for v in pauses.values() for x in v]
    out["reconfig_pause_s"] = {
        "count": len(p),
        "mean": float(np.mean(p)) if p else None,
        "max": float(np.max(p)) if p else None,
        "total": float(np.sum(p)) if p else 0.0,
    }
    return out


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class Engine:
    def __init__(self, scenario: Scenario, seed: int, out_dir=None, audit: bool = False):
        self.sc = scenario
        self.seed = int(seed)
        self.fab = scenario.fabric
        self.audit = audit
        self.out_dir = out_dir
        self.horizon = scenario.horizon_s
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.tenants: dict[str, TenantState] = scenario.fresh_tenants()
        self.controllers: dict[str, HostController] = {}
        self.roots: dict = {}
        self.servers: dict[str, _Server] = {}
        self.flows: dict[str, _Flow] = {}
        self.pauses: dict[str, list] = {}
        self._guard_seq: dict = {}
        self._numa_rate: dict = {}
        self._numa_acc: dict = {}
        self._numa_last: dict = {}
        self.actions: list[ActionRecord] = []
        self._pause_rng = {}
        self._files = {}
        self.kappa = self.fab.interference_kappa

        for host in scenario.topology.hosts:
            for r in host.pcie_roots:
                self.roots[(host.id, r.id)] = _Root((host.id, r.id), r.capacity_Bps,
                                                    self.fab.water_filling)
            for n in range(host.numa_domains):
                self._numa_rate[(host.id, n)] = 0.0
                self._numa_acc[(host.id, n)] = 0.0
                self._numa_last[(host.id, n)] = 0.0
            self.controllers[host.id] = HostController(host, scenario.controller, self.tenants)

        self.signal_columns = ["time_s"]
        for key in sorted(self.roots):
            self.signal_columns.append(f"pcie_bytes_s[{self.roots[key].label}]")
        for host in scenario.topology.hosts:
            self.signal_columns.append(f"host_io_MBps[{host.id}]")
        for host in scenario.topology.hosts:
            for g in host.gpus:
                self.signal_columns.append(f"sm_util[{host.id}/g{g.id}]")
        self.signal_rows: list = []

    # -- plumbing ----------------------------------------------------------

    def _push(self, t, kind, a=None, b=None):
        self._seq += 1
        heapq.heappush(self._heap, (t, kind, self._seq, a, b))

    def _host(self, host_id):
        return self.sc.topology.host(host_id)

    def _locate(self, state: TenantState):
        p = state.placement
        host = self._host(p.host)
        gpu = host.gpu(p.gpu)
        return self.roots[(p.host, gpu.pcie_root_id)], gpu.numa_id, (p.host, p.gpu)

    def _open(self):
        if self.out_dir is None:
            return
        os.makedirs(self.out_dir, exist_ok=True)
        self._files["latency"] = open(os.path.join(self.out_dir, "latency.csv"), "w")
        self._files["latency"].write(",".join(LATENCY_COLUMNS) + "\n")
        self._files["signals"] = open(os.path.join(self.out_dir, "signals.csv"), "w")
        self._files["signals"].write(",".join(self.signal_columns) + "\n")
        self._files["actions"] = open(os.path.join(self.out_dir, "actions.jsonl"), "w")
        self._lat_written = {tid: 0 for tid in self.servers}

    def _close(self):
        for f in self._files.values():
            f.close()
        self._files = {}

    def _flush_latency(self):
        f = self._files.get("latency")
        if f is None:
            return
        rows = []
        for tid in sorted(self.servers):
            srv = self.servers[tid]
            start = self._lat_written.get(tid, 0)
            for i in range(start, len(srv.out_t)):
                lat = srv.out_lat[i]
                rows.append((srv.out_t[i], tid, lat, srv.out_slices[i], srv.out_slot[i],
                             srv.out_root[i], srv.tau))
            self._lat_written[tid] = len(srv.out_t)
        rows.sort(key=lambda r: (r[0], r[1]))
        f.write("".join(
            f"{_fmt(t)},{tid},{_fmt(lat)},{int(lat > tau)},{_profile_name(sl)},{slot},{root}\n"
            for t, tid, lat, sl, slot, root, tau in rows))

    # -- fabric ------------------------------------------------------------

    def _integrate(self, root: _Root, now: float):
        dt = now - root.last_t
        if dt > 0 and root.grant:
            heavy = root.heavy
            for tid, b in root.grant.items():
                x = b * dt
                root.bytes += x
                if tid in heavy:
                    root.heavy_bytes += x
        root.last_t = now

    def _realloc(self, root: _Root, now: float):
        self._integrate(root, now)
        if root.flows:
            grant = allocate_bandwidth(((tid, w, cap) for tid, (w, cap) in root.flows.items()),
                                       root.capacity, root.water_filling)
            root.grant = grant.shares
            if self.audit and root.fg:
                assert grant.total > 0, "pending transfer with zero granted bandwidth"
        else:
            root.grant = {}
        for srv in root.fg.values():
            b = root.grant[srv.id]
            if srv.rate > 0:
                srv.remaining -= srv.rate * (now - srv.t0)
                if srv.remaining < 0:
                    srv.remaining = 0.0
            if b == srv.rate and srv.rate > 0:
                srv.t0 = now
                continue
            srv.rate = b
            srv.t0 = now
            srv.version += 1
            self._push(now + srv.remaining / b, TRANSFER_DONE, srv, srv.version)

    # -- background tenants -------------------------------------------------

    def _offered(self, flow: _Flow) -> float:
        spec = flow.state.spec
        if spec.pcie_demand_Bps is None:
            return 0.0
        return spec.offered_pcie_Bps(flow.state.io_throttle_MBps)

    def _update_background(self, root: _Root, now: float):
        """Recompute burst duty of every background flow on ``root``."""
        members = [f for f in self.flows.values() if f.root is root]
        demand = {f.id: (self._offered(f), f.state.spec.pcie_demand_Bps)
                  for f in members if f.active}
        duty = background_duty(demand, root.capacity)
        changed = False
        for f in sorted(members, key=lambda f: f.id):
            d = duty.get(f.id, 0.0)
            if d == f.duty and (f.active or not f.bursting):
                continue
            f.duty = d
            f.version += 1
            if d <= 0:
                want = False
            elif d >= 1:
                want = True
            else:
                want = f.bursting
                self._schedule_burst(f, now)
            if want != f.bursting:
                self._set_burst(f, want)
                changed = True
        if changed:
            self._realloc(root, now)

    def _schedule_burst(self, f: _Flow, now: float):
        on = self.fab.burst_on_mean_s
        mean = on if f.bursting else on * (1.0 - f.duty) / f.duty
        self._push(now + f.rng.exponential(mean), BURST_TOGGLE, f, f.version)

    def _set_burst(self, f: _Flow, on: bool):
        f.bursting = on
        if on:
            f.root.flows[f.id] = (f.state.spec.weight, f.state.spec.pcie_demand_Bps)
        else:
            f.root.flows.pop(f.id, None)

    def _on_burst(self, f: _Flow, version):
        if version != f.version or not (0 < f.duty < 1):
            return
        self._set_burst(f, not f.bursting)
        self._schedule_burst(f, self.now)
        self._realloc(f.root, self.now)

    def _numa_key(self, f):
        return (f.state.placement.host, f.numa)

    def _update_io(self, now: float):
        rates = {k: 0.0 for k in self._numa_rate}
        for f in self.flows.values():
            if not f.active:
                continue
            io = f.state.spec.host_io_MBps
            if f.state.io_throttle_MBps is not None:
                io = min(io, f.state.io_throttle_MBps)
            rates[self._numa_key(f)] += io
        for k, r in rates.items():
            self._numa_acc[k] += self._numa_rate[k] * (now - self._numa_last[k])
            self._numa_last[k] = now
            self._numa_rate[k] = r

    def _io_util(self, host_id, numa) -> float:
        return self._numa_rate[(host_id, numa)] / self._host(host_id).host_io_capacity_MBps

    def _on_schedule(self, f: _Flow, state: bool):
        f.active = state
        self._update_io(self.now)
        self._update_background(f.root, self.now)
        self._refresh_pressure_for(f.state)

    # -- compute pressure ---------------------------------------------------

    def _pressure_of(self, srv: _Server) -> float:
        p = 0.0
        for f in self.flows.values():
            st = f.state
            if st.mps_host == srv.id and f.active and st.placement == srv.state.placement:
                p += st.spec.sm_pressure * st.mps_quota_pct / 100.0
        return min(1.0, p)

    def _refresh_pressure_for(self, state: TenantState):
        host = state.mps_host
        if host is not None and host in self.servers:
            self._set_pressure(self.servers[host])

    def _set_pressure(self, srv: _Server):
        p = self._pressure_of(srv)
        if p == srv.pressure:
            return
        srv.pressure = p
        if srv.phase == 2 and not srv.paused:
            self._restart_compute(srv)

    def _compute_rate(self, srv: _Server) -> float:
        # full-GPU work milliseconds retired per simulated second
        return 1000.0 * srv.slices / A100_TOTAL_SLICES / (1.0 + self.kappa * srv.pressure)

    def _restart_compute(self, srv: _Server):
        now = self.now
        if srv.rate > 0:
            srv.remaining -= srv.rate * (now - srv.t0)
            if srv.remaining < 0:
                srv.remaining = 0.0
        srv.rate = self._compute_rate(srv)
        srv.t0 = now
        srv.version += 1
        self._push(now + srv.remaining / srv.rate, COMPUTE_DONE, srv, srv.version)

    # -- latency-sensitive servers ------------------------------------------

    def _bind(self, srv: _Server):
        root, numa, gkey = self._locate(srv.state)
        srv.root = root
        srv.numa = numa
        srv.gpu_key = gkey
        srv.slot = srv.state.placement.slot_id
        srv.slices = srv.state.placement.slices
        srv.pressure = self._pressure_of(srv)

    def _on_arrival(self, srv: _Server):
        i = srv.next_idx
        srv.next_idx = i + 1
        srv.arrived += 1
        if srv.next_idx < srv.n:
            self._push(srv.times[srv.next_idx], ARRIVAL, srv)
        outstanding = len(srv.queue) + (srv.cur >= 0) + 1
        if outstanding > self.sc.guard_limit:
            raise SimulationAborted({
                "reason": "unbounded queue growth", "tenant": srv.id, "time_s": self.now,
                "outstanding": outstanding, "guard_limit": self.sc.guard_limit,
            })
        half = 0 if self.now < self.horizon / 2 else 1
        if outstanding > srv.max_q[half]:
            srv.max_q[half] = outstanding
        if srv.cur < 0 and not srv.paused:
            self._start(srv, i)
        else:
            srv.queue.append(i)

    def _start(self, srv: _Server, i: int):
        srv.cur = i
        srv.busy_since = self.now
        size = srv.sizes[i]
        if size > 0:
            srv.phase = 1
            srv.remaining = size
            srv.rate = 0.0
            root = srv.root
            root.fg[srv.id] = srv
            root.flows[srv.id] = (srv.state.spec.weight, None)
            self._realloc(root, self.now)
        else:
            self._begin_compute(srv)

    def _begin_compute(self, srv: _Server):
        srv.phase = 2
        srv.remaining = srv.work[srv.cur]
        srv.rate = 0.0
        self._restart_compute(srv)

    def _on_transfer_done(self, srv: _Server, version):
        if version != srv.version:
            return
        root = srv.root
        del root.fg[srv.id]
        del root.flows[srv.id]
        self._realloc(root, self.now)
        self._begin_compute(srv)

    def _on_compute_done(self, srv: _Server, version):
        if version != srv.version:
            return
        now = self.now
        i = srv.cur
        host_id = srv.state.placement.host
        mult = 1.0
        if self.fab.numa_io_sensitivity or self.fab.irq_sensitivity:
            util = self._io_util(host_id, srv.numa)
            mult += self.fab.numa_io_sensitivity * util
            if (not srv.state.cpu_affinity_pinned and util > self.fab.irq_io_threshold
                    and srv.numa in self._host(host_id).irq_hot_cores):
                mult += self.fab.irq_sensitivity
        eps = self.fab.noise_mean_ms * mult * srv.expo[i]
        lat = (now - srv.times[i]) * 1000.0 + eps
        srv.out_t.append(now + eps / 1000.0)
        srv.out_lat.append(lat)
        srv.out_slices.append(srv.slices)
        srv.out_slot.append(srv.slot)
        srv.out_root.append(srv.root.key[1])
        srv.tick_completed += 1
        if srv.recovering:
            srv.disrupted += 1
        else:
            srv.tick_samples.append(lat)
        if self.audit:
            assert lat >= 0, "completion before arrival"
        srv.busy_acc += now - srv.busy_since
        srv.cur = -1
        srv.phase = 0
        srv.rate = 0.0
        if srv.paused:
            return
        if srv.queue:
            self._start(srv, srv.queue.popleft())
        else:
            srv.recovering = False

    def _pause(self, srv: _Server, duration: float):
        now = self.now
        srv.version += 1
        if srv.phase == 1:
            srv.remaining -= srv.rate * (now - srv.t0)
            srv.remaining = max(srv.remaining, 0.0)
            root = srv.root
            del root.fg[srv.id]
            del root.flows[srv.id]
            self._realloc(root, now)
        elif srv.phase == 2:
            srv.remaining -= srv.rate * (now - srv.t0)
            srv.remaining = max(srv.remaining, 0.0)
        srv.rate = 0.0
        srv.paused = True
        srv.recovering = True
        srv.pause_start = now
        self._push(now + duration, RECONFIG_DONE, srv)

    def _on_resume(self, srv: _Server):
        now = self.now
        srv.paused = False
        srv.resume_t = now
        self._bind(srv)
        for f in self.flows.values():
            if f.state.mps_host == srv.id:
                self._rebind_flow(f)
        if srv.phase == 1:
            srv.t0 = now
            root = srv.root
            root.fg[srv.id] = srv
            root.flows[srv.id] = (srv.state.spec.weight, None)
            self._realloc(root, now)
        elif srv.phase == 2:
            self._restart_compute(srv)
        elif srv.queue:
            self._start(srv, srv.queue.popleft())
        else:
            srv.recovering = False
        self.controllers[srv.state.placement.host].on_resume(srv.id)

    # -- admission & actions -----------------------------------------------

    def _add_server(self, state: TenantState):
        stream = generate_arrivals(state.spec, self.horizon, self.seed)
        expo = stream_rng(self.seed, state.id, "noise").standard_exponential(len(stream)).tolist()
        srv = _Server(state, stream, expo)
        self.servers[state.id] = srv
        self._pause_rng[state.id] = stream_rng(self.seed, state.id, "pauses")
        self.pauses[state.id] = []
        self._bind(srv)
        idx = int(np.searchsorted(stream.times, self.now, side="left"))
        srv.next_idx = idx
        if idx < srv.n:
            self._push(srv.times[idx], ARRIVAL, srv)
        if self._files:
            self._lat_written[state.id] = 0

    def _add_flow(self, state: TenantState):
        sched = self.sc.schedules.get(state.id, InterferenceSchedule())
        f = _Flow(state, sched, stream_rng(self.seed, state.id, "bursts"))
        self.flows[state.id] = f
        self._rebind_flow(f, initial=True)
        f.active = sched.active(self.now)
        for t, on in sched.transitions(self.horizon):
            if t > self.now:
                self._push(t, SCHEDULE_TOGGLE, f, on)
        return f

    def _rebind_flow(self, f: _Flow, initial=False):
        root, numa, gkey = self._locate(f.state)
        if root is f.root:
            return
        old = f.root
        if old is not None and f.bursting:
            old.flows.pop(f.id, None)
            old.heavy.discard(f.id)
            self._realloc(old, self.now)
        f.root, f.numa, f.gpu_key = root, numa, gkey
        if f.heavy:
            root.heavy.add(f.id)
        if not initial:
            f.bursting = False
            self._update_background(root, self.now)
            if old is not None:
                self._update_background(old, self.now)

    def _emit(self, rec: ActionRecord):
        self.actions.append(rec)
        f = self._files.get("actions")
        if f is not None:
            f.write(rec.to_json() + "\n")
            f.flush()

    def _apply(self, rec: ActionRecord):
        kind = rec.action
        state = self.tenants.get(rec.tenant)
        if kind in RECONFIG_ACTIONS:
            srv = self.servers[rec.tenant]
            if kind is ActionKind.MOVE and rec.pre.get("profile") != rec.post.get("profile"):
                kind = ActionKind.MIG_UP  # a resizing move builds a new instance
            d = apply_reconfig_pause(kind, self._pause_rng[rec.tenant], self.fab)
            rec.pause_s = d
            self.pauses[rec.tenant].append(d)
            self._pause(srv, d)
        elif kind in GUARDRAIL_ACTIONS:
            key = (rec.tenant, kind)
            self._guard_seq[key] = rec.seq
            self._push(rec.until, GUARDRAIL_EXPIRY, key, rec.seq)
            self._guardrail_changed(state)
        elif kind is ActionKind.ADMIT:
            if state.spec.is_latency_sensitive:
                self._add_server(state)
            else:
                f = self._add_flow(state)
                self._update_io(self.now)
                self._update_background(f.root, self.now)
                self._refresh_pressure_for(state)
        self._emit(rec)

    def _guardrail_changed(self, state: TenantState):
        f = self.flows.get(state.id)
        if f is not None:
            self._update_io(self.now)
            self._update_background(f.root, self.now)
        self._refresh_pressure_for(state)

    def _on_guardrail_expiry(self, key, seq):
        if self._guard_seq.get(key) != seq:
            return
        del self._guard_seq[key]
        tid, kind = key
        state = self.tenants[tid]
        clear_guardrail(state, kind)
        self._guardrail_changed(state)
        ctl = self.controllers[state.placement.host]
        for rec in ctl.retry_queue():
            self._apply(rec)

    def _on_admission(self, deferred):
        ctl = self.controllers[self._admission_host(deferred)]
        ctl.now = self.now
        rec = ctl.admit(deferred.spec, deferred.slices, deferred.mps_host)
        self._apply(rec)

    def _admission_host(self, deferred) -> str:
        if deferred.mps_host is not None:
            return self.tenants[deferred.mps_host].placement.host
        return self.sc.topology.hosts[0].id

    # -- ticks ---------------------------------------------------------------

    def _on_tick(self):
        now = self.now
        dt = self.sc.controller.sample_interval_s
        for root in self.roots.values():
            self._integrate(root, now)
        for k in self._numa_rate:
            self._numa_acc[k] += self._numa_rate[k] * (now - self._numa_last[k])
            self._numa_last[k] = now
        row = [now]
        root_bps = {}
        heavy_bps = {}
        for key in sorted(self.roots):
            root = self.roots[key]
            root_bps[key] = root.bytes / dt
            heavy_bps[key] = root.heavy_bytes / dt
            root.bytes = 0.0
            root.heavy_bytes = 0.0
            row.append(root_bps[key])
        numa_io = {k: v / dt for k, v in self._numa_acc.items()}
        for k in self._numa_acc:
            self._numa_acc[k] = 0.0
        for host in self.sc.topology.hosts:
            row.append(sum(v for (h, _), v in numa_io.items() if h == host.id))

        sm = self._sm_util(dt)
        for host in self.sc.topology.hosts:
            for g in host.gpus:
                row.append(sm.get((host.id, g.id), 0.0))
        self.signal_rows.append(row)

        for host in self.sc.topology.hosts:
            ctl = self.controllers[host.id]
            cap = host.host_io_capacity_MBps
            irq = frozenset(n for n in host.irq_hot_cores
                            if numa_io.get((host.id, n), 0.0) / cap > self.fab.irq_io_threshold)
            raw = RawCounters(
                time=now,
                root_Bps={r: v for (h, r), v in root_bps.items() if h == host.id},
                heavy_Bps={r: v for (h, r), v in heavy_bps.items() if h == host.id},
                numa_io_MBps={n: v for (h, n), v in numa_io.items() if h == host.id},
                gpu_sm_util={g: v for (h, g), v in sm.items() if h == host.id},
                colocated_sm={tid: srv.pressure for tid, srv in self.servers.items()
                              if srv.state.placement.host == host.id},
                irq_burst=irq)
            observations = {}
            for tid, srv in self.servers.items():
                if srv.state.placement.host != host.id:
                    continue
                observations[tid] = Observation(tid, now, np.asarray(srv.tick_samples),
                                                srv.tick_completed)
                srv.tick_samples = []
                srv.tick_completed = 0
            for rec in ctl.tick(raw, observations):
                self._apply(rec)
        if self._files:
            f = self._files["signals"]
            f.write(_fmt(row[0]) + "," + ",".join(_fmt(x) for x in row[1:]) + "\n")
            self._flush_latency()
        nxt = now + dt
        if nxt <= self.horizon + 1e-9:
            self._push(nxt, CONTROLLER_TICK)

    def _sm_util(self, dt) -> dict:
        util: dict = {}
        for srv in self.servers.values():
            busy = srv.busy_acc
            if srv.cur >= 0 and srv.busy_since is not None:
                busy += self.now - srv.busy_since
                srv.busy_since = self.now
            srv.busy_acc = 0.0
            frac = min(1.0, busy / dt) if srv.phase == 2 or busy else 0.0
            util[srv.gpu_key] = util.get(srv.gpu_key, 0.0) + frac * srv.slices / A100_TOTAL_SLICES
        for f in self.flows.values():
            st = f.state
            if not f.active or st.spec.sm_pressure <= 0:
                continue
            share = min(1.0, st.spec.sm_pressure * st.mps_quota_pct / 100.0)
            util[f.gpu_key] = util.get(f.gpu_key, 0.0) + share * st.placement.slices / 7
        return {k: min(1.0, v) for k, v in util.items()}

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimTrace:
        for st in sorted(self.tenants.values(), key=lambda s: s.id):
            if st.status is not AdmissionStatus.ADMITTED or st.placement is None:
                continue
            ctl = self.controllers[st.placement.host]
            if st.spec.is_latency_sensitive:
                self._add_server(st)
                ctl.track(st)
        for st in sorted(self.tenants.values(), key=lambda s: s.id):
            if not st.spec.is_latency_sensitive and st.placement is not None:
                self._add_flow(st)
        self._update_io(0.0)
        for root in self.roots.values():
            self._update_background(root, 0.0)
        for srv in self.servers.values():
            srv.pressure = self._pressure_of(srv)
        for d in self.sc.deferred:
            self._push(d.at_s, ADMISSION, d)
        self._push(self.sc.controller.sample_interval_s, CONTROLLER_TICK)
        self._open()

        aborted = None
        heap = self._heap
        horizon = self.horizon
        pop = heapq.heappop
        try:
            while heap:
                t, kind, _, a, b = heap[0]
                if t > horizon:
                    break
                pop(heap)
                if self.audit:
                    assert t >= self.now - 1e-12, "event out of time order"
                self.now = t
                if kind == ARRIVAL:
                    self._on_arrival(a)
                elif kind == TRANSFER_DONE:
                    self._on_transfer_done(a, b)
                elif kind == COMPUTE_DONE:
                    self._on_compute_done(a, b)
                elif kind == BURST_TOGGLE:
                    self._on_burst(a, b)
                elif kind == CONTROLLER_TICK:
                    self._on_tick()
                elif kind == SCHEDULE_TOGGLE:
                    self._on_schedule(a, b)
                elif kind == RECONFIG_DONE:
                    self._on_resume(a)
                elif kind == GUARDRAIL_EXPIRY:
                    self._on_guardrail_expiry(a, b)
                elif kind == ADMISSION:
                    self._on_admission(a)
        except SimulationAborted as e:
            aborted = e.diagnostic
            log.warning("run aborted: %s", aborted)
            if self._files:
                self._flush_latency()
                self._close()
            raise
        finally:
            if self._files:
                self._flush_latency()
                self._close()
        return self._trace(aborted)

    def _trace(self, aborted) -> SimTrace:
        latency = {}
        for tid, srv in sorted(self.servers.items()):
            t = np.asarray(srv.out_t)
            order = np.argsort(t, kind="stable")
            latency[tid] = {
                "time_s": t[order],
                "latency_ms": np.asarray(srv.out_lat)[order],
                "slices": np.asarray(srv.out_slices, dtype=int)[order],
                "slot": [srv.out_slot[i] for i in order],
                "root_id": np.asarray(srv.out_root, dtype=int)[order],
                "meta": {
                    "arrived": srv.arrived,
                    "disrupted": srv.disrupted,
                    "outstanding_end": len(srv.queue) + (srv.cur >= 0),
                    "max_queue_first_half": srv.max_q[0],
                    "max_queue_second_half": srv.max_q[1],
                },
            }
        trace = SimTrace(self.sc.name, self.seed, self.horizon, latency, self.signal_columns,
                         self.signal_rows, self.actions, aborted=aborted)
        taus = {tid: srv.tau for tid, srv in self.servers.items()}
        trace.summary = summarize(trace, taus, self.pauses)
        if self.out_dir is not None:
            # records are streamed while pending; rewrite with the final verdicts
            with open(os.path.join(self.out_dir, "actions.jsonl"), "w") as f:
                f.writelines(line + "\n" for line in trace.action_lines())
            with open(os.path.join(self.out_dir, "summary.json"), "w") as f:
                json.dump(trace.summary, f, indent=2, sort_keys=True)
                f.write("\n")
        return trace


def _profile_name(slices: int) -> str:
    from .model import profile_for_slices
    return profile_for_slices(int(slices)).name


def run_scenario(scenario: Scenario, seed: int, out_dir=None, audit: bool = False) -> SimTrace:
    """Simulate ``scenario`` under ``seed``; raises :class:`SimulationAborted`
    if a tenant's backlog passes the guard limit."""
    return Engine(scenario, seed, out_dir=out_dir, audit=audit).run()
