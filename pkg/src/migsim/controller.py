"""SLO-driven multi-tenancy controller.

One :class:`HostController` per host runs the observation loop for every
latency-sensitive tenant it tracks: it keeps a sliding tail window, gates
actions on dwell and cool-down counters, diagnoses the root cause of a
persistent breach, and walks an escalation ladder (bounded guardrail, then
placement move, then a larger MIG profile). Sustained headroom relaxes the
profile again. Reconfigurations are validated after they take effect and
rolled back to the last-known-good configuration if the tail got worse.

Every decision becomes an :class:`ActionRecord`; the engine applies the side
effects (pauses, bandwidth re-allocation, guardrail expiry).
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fabric import check_stability
from .model import (
    A100_LATTICE,
    IO_THROTTLE_BOUNDS_MBPS,
    MPS_QUOTA_BOUNDS,
    AdmissionStatus,
    ConfigError,
    ControllerConfig,
    HostSpec,
    MigProfile,
    Placement,
    TenantClass,
    TenantSpec,
    TenantState,
    effective_service_rate,
    mig_lattice_step,
    profile_for_slices,
)
from .telemetry import NoDataError, SmoothedSignal, TailWindow


class ActionKind(str, enum.Enum):
    THROTTLE_IO = "throttle_io"
    MPS_QUOTA = "mps_quota"
    MOVE = "move"
    MIG_UP = "mig_up"
    MIG_DOWN = "mig_down"
    ADMIT = "admit"
    QUEUE = "queue"
    REJECT = "reject"
    ROLLBACK = "rollback"
    EXHAUSTED = "exhausted"


RECONFIG_ACTIONS = frozenset({ActionKind.MOVE, ActionKind.MIG_UP, ActionKind.MIG_DOWN,
                              ActionKind.ROLLBACK})
GUARDRAIL_ACTIONS = frozenset({ActionKind.THROTTLE_IO, ActionKind.MPS_QUOTA})
# actions subject to the dwell/cool-down gate (rollback and queue bookkeeping are not)
GATED_ACTIONS = frozenset({ActionKind.THROTTLE_IO, ActionKind.MPS_QUOTA, ActionKind.MOVE,
                           ActionKind.MIG_UP, ActionKind.MIG_DOWN, ActionKind.EXHAUSTED,
                           ActionKind.ADMIT})


class Outcome(str, enum.Enum):
    KEPT = "kept"
    ROLLED_BACK = "rolled_back"
    PENDING = "pending"
    EXHAUSTED = "exhausted"


class Diagnosis(str, enum.Enum):
    IO_PRESSURE = "io_pressure"
    COMPUTE_CONTENTION = "compute_contention"
    NONE = "none"


class GuardrailRejected(ConfigError):
    """Guardrail value outside its configured bounds; nothing was changed."""


class Phase(str, enum.Enum):
    STABLE = "stable"
    THROTTLING = "throttling"
    RECONFIGURING = "reconfiguring"
    VALIDATING = "validating"


@dataclass
class ActionRecord:
    seq: int
    timestamp: float
    tenant: str
    action: ActionKind
    obs_index: int
    trigger: Optional[str] = None  # tenant whose SLO breach caused the action
    reason: str = ""
    signals: dict = field(default_factory=dict)
    pre: dict = field(default_factory=dict)
    post: dict = field(default_factory=dict)
    outcome: Outcome = Outcome.KEPT
    until: Optional[float] = None  # guardrail expiry time
    pause_s: Optional[float] = None  # filled in by the engine for reconfigurations
    reverts: Optional[int] = None  # seq of the record a rollback undoes

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": round(self.timestamp, 9),
            "tenant": self.tenant,
            "action": self.action.value,
            "obs_index": self.obs_index,
            "trigger": self.trigger,
            "reason": self.reason,
            "signals": self.signals,
            "pre": self.pre,
            "post": self.post,
            "outcome": self.outcome.value,
            "until": self.until,
            "pause_s": None if self.pause_s is None else round(self.pause_s, 9),
            "reverts": self.reverts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Signals
# ---------------------------------------------------------------------------


@dataclass
class RawCounters:
    """Host counters averaged over one controller tick."""

    time: float
    root_Bps: dict  # root id -> bytes/s moved
    heavy_Bps: dict  # root id -> bytes/s moved by bandwidth-heavy tenants
    numa_io_MBps: dict  # NUMA id -> block I/O MB/s
    gpu_sm_util: dict  # gpu id -> [0, 1]
    colocated_sm: dict  # tenant id -> SM pressure of its MPS co-tenants
    irq_burst: frozenset = frozenset()  # core groups that saw an IRQ burst


@dataclass
class TenantSignals:
    """Smoothed view of the counters that matter to one tenant."""

    pcie_util: Optional[float] = None
    host_io_util: Optional[float] = None
    colocated_sm_util: Optional[float] = None
    pcie_hot: bool = False
    io_hot: bool = False
    sm_hot: bool = False


def diagnose(signals: TenantSignals, cfg: ControllerConfig) -> Diagnosis:
    """Root cause of a breach from smoothed utilizations (fractions of capacity)."""
    if signals.pcie_util is None or signals.host_io_util is None \
            or signals.colocated_sm_util is None:
        return Diagnosis.NONE
    if signals.pcie_util > cfg.theta_pcie or signals.host_io_util > cfg.theta_io:
        return Diagnosis.IO_PRESSURE
    if signals.colocated_sm_util > cfg.theta_sm:
        return Diagnosis.COMPUTE_CONTENTION
    return Diagnosis.NONE


class SignalMonitor:
    """EMA smoothing, hysteresis latches and lookback maxima per host."""

    def __init__(self, host: HostSpec, cfg: ControllerConfig):
        self.host = host
        self.cfg = cfg
        a, r = cfg.ema_alpha, cfg.hysteresis_clear_ratio
        self.capacity = {root.id: root.capacity_Bps for root in host.pcie_roots}
        self.pcie = {root.id: SmoothedSignal.with_ratio(a, cfg.theta_pcie, r)
                     for root in host.pcie_roots}
        self.io = {n: SmoothedSignal.with_ratio(a, cfg.theta_io, r)
                   for n in range(host.numa_domains)}
        self.heavy = {root.id: SmoothedSignal.with_ratio(a, cfg.theta_pcie, r)
                      for root in host.pcie_roots}
        self.sm: dict[str, SmoothedSignal] = {}
        look = cfg.penalty_lookback_obs
        self._heavy_hist = {root.id: deque(maxlen=look) for root in host.pcie_roots}
        self._io_hist = {n: deque(maxlen=look) for n in range(host.numa_domains)}
        self._last_irq: dict[int, int] = {}
        self.ticks = 0
        self.last: Optional[RawCounters] = None
        self.recent_heavy: dict[int, float] = {root.id: 0.0 for root in host.pcie_roots}
        self.recent_io: dict[int, float] = {n: 0.0 for n in range(host.numa_domains)}

    def update(self, raw: RawCounters) -> None:
        self.ticks += 1
        self.last = raw
        io_cap = self.host.host_io_capacity_MBps
        for rid, sig in self.pcie.items():
            sig.update(raw.root_Bps.get(rid, 0.0) / self.capacity[rid])
            h = self.heavy[rid].update(raw.heavy_Bps.get(rid, 0.0) / self.capacity[rid])
            self._heavy_hist[rid].append(h.value)
            self.recent_heavy[rid] = max(self._heavy_hist[rid])
        for n, sig in self.io.items():
            sig.update(raw.numa_io_MBps.get(n, 0.0) / io_cap)
            self._io_hist[n].append(sig.value)
            self.recent_io[n] = max(self._io_hist[n])
        for tid, value in raw.colocated_sm.items():
            sig = self.sm.get(tid)
            if sig is None:
                sig = self.sm[tid] = SmoothedSignal.with_ratio(
                    self.cfg.ema_alpha, self.cfg.theta_sm, self.cfg.hysteresis_clear_ratio)
            sig.update(value)
        for c in raw.irq_burst:
            self._last_irq[c] = self.ticks

    def irq_recent(self, core_group: int) -> bool:
        last = self._last_irq.get(core_group)
        return last is not None and self.ticks - last < self.cfg.penalty_lookback_obs

    def tenant_signals(self, tenant: TenantState) -> TenantSignals:
        if tenant.placement is None or self.ticks == 0:
            return TenantSignals()
        gpu = self.host.gpu(tenant.placement.gpu)
        pcie = self.pcie[gpu.pcie_root_id]
        io = self.io[gpu.numa_id]
        sm = self.sm.get(tenant.id)
        return TenantSignals(
            pcie_util=pcie.value, host_io_util=io.value,
            colocated_sm_util=sm.value if sm is not None else 0.0,
            pcie_hot=pcie.triggered, io_hot=io.triggered,
            sm_hot=sm.triggered if sm is not None else False)


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlacementScore:
    slot: str
    pcie_penalty: float
    numa_io_penalty: float
    irq_penalty: float
    total: float

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.total)


def infeasible_score(slot: str) -> PlacementScore:
    return PlacementScore(slot, math.inf, math.inf, math.inf, math.inf)


def placement_score(slot: Placement, host: HostSpec, monitor: Optional[SignalMonitor],
                    cfg: ControllerConfig, feasible: bool = True) -> PlacementScore:
    """Penalty of a slot from recent PCIe, NUMA I/O and IRQ activity near it."""
    if not feasible:
        return infeasible_score(slot.slot_id)
    gpu = host.gpu(slot.gpu)
    if monitor is None or monitor.ticks == 0:
        return PlacementScore(slot.slot_id, 0.0, 0.0, 0.0, 0.0)
    pcie = min(1.0, monitor.recent_heavy[gpu.pcie_root_id])
    numa = min(1.0, monitor.recent_io[gpu.numa_id])
    irq = 1.0 if gpu.numa_id in host.irq_hot_cores and monitor.irq_recent(gpu.numa_id) else 0.0
    w1, w2, w3 = cfg.penalty_weights
    return PlacementScore(slot.slot_id, pcie, numa, irq, w1 * pcie + w2 * numa + w3 * irq)


def _owners(tenants) -> list[TenantState]:
    return [t for t in tenants if t.placement is not None and t.mps_host is None
            and t.status is AdmissionStatus.ADMITTED]


def free_ranges(host: HostSpec, tenants, slices: int, gpu_id: Optional[int] = None,
                ignore: Optional[str] = None) -> list[Placement]:
    """All contiguous slice ranges of length ``slices`` not held by an instance
    owner (``ignore`` is treated as absent)."""
    used: dict[int, list[bool]] = {g.id: [False] * g.total_slices for g in host.gpus}
    for t in _owners(tenants):
        if t.id == ignore or t.placement.host != host.id:
            continue
        row = used[t.placement.gpu]
        for s in range(t.placement.start, t.placement.end):
            row[s] = True
    out = []
    for g in host.gpus:
        if gpu_id is not None and g.id != gpu_id:
            continue
        row = used[g.id]
        for start in range(0, g.total_slices - slices + 1):
            if not any(row[start:start + slices]):
                out.append(Placement(host.id, g.id, start, slices))
    return out


def _has_cotenants(tenant_id: str, tenants) -> bool:
    return any(t.mps_host == tenant_id for t in tenants)


@dataclass(frozen=True)
class Decision:
    kind: ActionKind
    placement: Optional[Placement] = None
    score: Optional[PlacementScore] = None
    reason: str = ""


def select_upgrade(tenant: TenantState, tenants, host: HostSpec,
                   monitor: Optional[SignalMonitor], cfg: ControllerConfig) -> Decision:
    """Move to a clearly better slot, else the largest feasible profile, else exhausted."""
    cur = tenant.placement
    ignore = None if _has_cotenants(tenant.id, tenants) else tenant.id
    cur_score = placement_score(cur, host, monitor, cfg)
    if cfg.features.placement:
        cands = [p for p in free_ranges(host, tenants, cur.slices, ignore=ignore)
                 if (p.gpu, p.start) != (cur.gpu, cur.start)]
        scored = sorted(((placement_score(p, host, monitor, cfg), p) for p in cands),
                        key=lambda sp: (sp[0].total, sp[1].sort_key()))
        if scored:
            best, where = scored[0]
            if cur_score.total - best.total >= cfg.move_margin:
                reason = f"slot score {cur_score.total:.3f} -> {best.total:.3f}"
                if cfg.features.mig:
                    # The destination needs a fresh instance anyway, so size it
                    # like the in-place upgrade would have.
                    bigger = _upsized(tenant, tenants, host, monitor, cfg, where.gpu, ignore)
                    if bigger is not None:
                        where, best = bigger
                        reason += f", {tenant.profile.name} -> {profile_for_slices(where.slices).name}"
                return Decision(ActionKind.MOVE, where, best, reason)
    if cfg.features.mig:
        mu_now = effective_service_rate(tenant.profile, tenant.spec)
        for prof in sorted((p for p in A100_LATTICE if p.slices > cur.slices),
                           key=lambda p: -(effective_service_rate(p, tenant.spec) - mu_now)):
            ranges = free_ranges(host, tenants, prof.slices, gpu_id=cur.gpu, ignore=ignore)
            if not ranges:
                continue
            scored = sorted(((placement_score(p, host, monitor, cfg), p) for p in ranges),
                            key=lambda sp: (sp[0].total, sp[1].sort_key()))
            sc, where = scored[0]
            return Decision(ActionKind.MIG_UP, where, sc,
                            f"{tenant.profile.name} -> {prof.name}")
    return Decision(ActionKind.EXHAUSTED, None, cur_score, "no better slot or profile")


def _upsized(tenant: TenantState, tenants, host: HostSpec, monitor: Optional[SignalMonitor],
             cfg: ControllerConfig, gpu_id: int, ignore: Optional[str]):
    """Best-scoring slot on ``gpu_id`` at the largest-gain profile above the current one."""
    mu_now = effective_service_rate(tenant.profile, tenant.spec)
    for prof in sorted((p for p in A100_LATTICE if p.slices > tenant.placement.slices),
                       key=lambda p: -(effective_service_rate(p, tenant.spec) - mu_now)):
        ranges = free_ranges(host, tenants, prof.slices, gpu_id=gpu_id, ignore=ignore)
        if ranges:
            sc, where = min(((placement_score(p, host, monitor, cfg), p) for p in ranges),
                            key=lambda sp: (sp[0].total, sp[1].sort_key()))
            return where, sc
    return None


def select_relax(tenant: TenantState, tenants, host: HostSpec,
                 monitor: Optional[SignalMonitor], cfg: ControllerConfig) -> Optional[Decision]:
    """Shrink to the adjacent smaller profile in place if the slot looks quiet."""
    if not cfg.features.mig or tenant.placement is None:
        return None
    smaller = mig_lattice_step(tenant.profile, "down")
    if smaller is None:
        return None
    cur = tenant.placement
    target = Placement(cur.host, cur.gpu, cur.start, smaller.slices)
    sc = placement_score(target, host, monitor, cfg)
    if sc.total >= cfg.relax_score_threshold:
        return None
    return Decision(ActionKind.MIG_DOWN, target, sc, f"{tenant.profile.name} -> {smaller.name}")


def validate_or_rollback(pre_p99: Optional[float], post_window: TailWindow,
                         cfg: ControllerConfig, floor_ms: float = 0.0) -> Outcome:
    """Keep a change unless its post-change p99 regressed by more than delta.

    ``floor_ms`` lets a relax be judged against the stability band rather than
    the (very good) tail it started from.
    """
    if len(post_window) == 0 or pre_p99 is None:
        return Outcome.KEPT
    post = post_window.quantile(0.99)
    ref = max(pre_p99, floor_ms)
    return Outcome.ROLLED_BACK if post > (1.0 + cfg.rollback_regress_ratio) * ref else Outcome.KEPT


def check_guardrail(kind: ActionKind, value: float) -> None:
    if kind is ActionKind.THROTTLE_IO:
        lo, hi = IO_THROTTLE_BOUNDS_MBPS
    elif kind is ActionKind.MPS_QUOTA:
        lo, hi = MPS_QUOTA_BOUNDS
    else:
        raise GuardrailRejected(f"{kind} is not a guardrail")
    if not lo <= value <= hi:
        raise GuardrailRejected(f"{kind.value} value {value} outside [{lo}, {hi}]")


def apply_guardrail(target: TenantState, kind: ActionKind, value: float) -> dict:
    """Set a bounded guardrail on ``target``; returns the pre-change config.

    Out-of-bounds values raise :class:`GuardrailRejected` and leave the
    tenant untouched.
    """
    check_guardrail(kind, value)
    pre = target.config()
    if kind is ActionKind.THROTTLE_IO:
        target.io_throttle_MBps = float(value)
    else:
        target.mps_quota_pct = float(value)
    return pre


def clear_guardrail(target: TenantState, kind: ActionKind) -> None:
    if kind is ActionKind.THROTTLE_IO:
        target.io_throttle_MBps = None
    else:
        target.mps_quota_pct = 100.0


# ---------------------------------------------------------------------------
# Per-tenant control state
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    """One controller tick for one tenant."""

    tenant: str
    time: float
    samples: np.ndarray  # latencies (ms) completed this tick, reconfig-disrupted ones excluded
    completed: int = 0  # every completion this tick


@dataclass
class Snapshot:
    """A restorable tenant configuration."""

    placement: Optional[Placement]
    cpu_affinity_pinned: bool
    cotenants: tuple[str, ...] = ()

    @classmethod
    def of(cls, tenant: TenantState, tenants) -> "Snapshot":
        co = tuple(sorted(t.id for t in tenants if t.mps_host == tenant.id))
        return cls(tenant.placement, tenant.cpu_affinity_pinned, co)


class TenantControl:
    def __init__(self, tenant: TenantState, cfg: ControllerConfig, ready: bool = True):
        self.tenant_id = tenant.id
        lam = tenant.spec.arrival_rate
        cap = max(256, int(math.ceil(cfg.dwell_obs * lam * cfg.sample_interval_s)))
        self.window = TailWindow(cap)
        self.post_window = TailWindow(max(64, int(math.ceil(cfg.validation_obs * lam
                                                            * cfg.sample_interval_s))))
        self.phase = Phase.STABLE
        self.phase_until = 0.0
        self.obs = 0
        self.since_change = cfg.dwell_obs if ready else 0
        self.cooldown_remaining = 0
        self.consecutive_breach = 0
        self.consecutive_stable = 0
        self.validate_left = 0
        self.pre_p99: Optional[float] = None
        self.validate_floor = 0.0
        self.pending: Optional[ActionRecord] = None
        self.last_good: Optional[Snapshot] = None
        self.completions = deque(maxlen=max(1, cfg.dwell_obs))
        self.last_p99: Optional[float] = None
        # smallest profile relax may shrink to; raised after a failed relax,
        # cleared by the next escalation
        self.relax_floor: Optional[MigProfile] = None

    def reset_window(self) -> None:
        self.window.clear()
        self.consecutive_breach = 0
        self.consecutive_stable = 0


class HostController:
    """Decision loop for the tenants of one host."""

    def __init__(self, host: HostSpec, cfg: ControllerConfig, tenants: dict):
        self.host = host
        self.cfg = cfg
        self.tenants = tenants  # id -> TenantState, shared with the engine
        self.monitor = SignalMonitor(host, cfg)
        self.ctl: dict[str, TenantControl] = {}
        self.records: list[ActionRecord] = []
        self.queue: list[tuple[TenantSpec, int, float, Optional[str]]] = []
        self._seq = 0
        self.now = 0.0

    # -- bookkeeping -------------------------------------------------------

    def _host_tenants(self) -> list[TenantState]:
        return [t for t in self.tenants.values()
                if t.placement is not None and t.placement.host == self.host.id]

    def track(self, tenant: TenantState, ready: bool = True) -> None:
        c = TenantControl(tenant, self.cfg, ready)
        c.last_good = Snapshot.of(tenant, self._host_tenants())
        self.ctl[tenant.id] = c

    def _control(self, tenant_id: str) -> TenantControl:
        c = self.ctl.get(tenant_id)
        if c is None:
            # background tenants get a control block on first action for gating
            c = self.ctl[tenant_id] = TenantControl(self.tenants[tenant_id], self.cfg)
            c.obs = self.monitor.ticks
        return c

    def _record(self, tenant: str, kind: ActionKind, **kw) -> ActionRecord:
        c = self.ctl.get(tenant)
        obs = c.obs if c is not None else self.monitor.ticks
        rec = ActionRecord(self._seq, self.now, tenant, kind, obs, **kw)
        self._seq += 1
        self.records.append(rec)
        return rec

    def _signal_dict(self, c: Optional[TenantControl]) -> dict:
        raw = self.monitor.last
        d: dict = {}
        if c is not None:
            try:
                d["p99_ms"] = round(c.window.quantile(0.99), 6)
                vals = c.window.values()
                tau = self.tenants[c.tenant_id].spec.slo_tail_ms
                d["miss_rate"] = round(float(np.count_nonzero(vals > tau)) / vals.size, 6)
            except NoDataError:
                d["p99_ms"] = None
                d["miss_rate"] = None
        if raw is not None:
            d["pcie_Bps"] = {str(k): round(v, 3) for k, v in sorted(raw.root_Bps.items())}
            d["host_io_MBps"] = round(sum(raw.numa_io_MBps.values()), 3)
            d["sm_util"] = {str(k): round(v, 6) for k, v in sorted(raw.gpu_sm_util.items())}
        return d

    def gates_open(self, tenant_id: str) -> bool:
        c = self.ctl.get(tenant_id)
        if c is None:
            return True
        return c.since_change >= self.cfg.dwell_obs and c.cooldown_remaining <= 0

    def _arm(self, c: TenantControl) -> None:
        c.since_change = 0
        c.cooldown_remaining = self.cfg.cooldown_obs

    # -- observation loop --------------------------------------------------

    def tick(self, raw: RawCounters, observations: dict) -> list[ActionRecord]:
        """Ingest one tick of counters and per-tenant samples; return new actions."""
        self.now = raw.time
        self.monitor.update(raw)
        out = []
        for tid in sorted(self.ctl):
            obs = observations.get(tid)
            if obs is None:
                c = self.ctl[tid]
                c.obs += 1
                c.since_change += 1
                if c.phase is not Phase.RECONFIGURING and c.cooldown_remaining > 0:
                    c.cooldown_remaining -= 1
                continue
            rec = self.on_observation(obs)
            if rec is not None:
                out.append(rec)
        out.extend(self.retry_queue())
        return out

    def on_observation(self, obs: Observation) -> Optional[ActionRecord]:
        c = self.ctl[obs.tenant]
        cfg = self.cfg
        tenant = self.tenants[obs.tenant]
        c.obs += 1
        c.since_change += 1
        c.completions.append(obs.completed)
        if c.phase is Phase.RECONFIGURING:
            return None
        if c.cooldown_remaining > 0:
            c.cooldown_remaining -= 1
        if obs.samples.size:
            c.window.extend(obs.samples)

        if c.phase is Phase.VALIDATING:
            if obs.samples.size:
                c.post_window.extend(obs.samples)
            c.validate_left -= 1
            if c.validate_left > 0:
                return None
            return self._finish_validation(c, tenant)

        if c.phase is Phase.THROTTLING:
            if self.now < c.phase_until:
                return None
            c.phase = Phase.STABLE

        if len(c.window) == 0:
            return None
        tau = cfg.tail_threshold_ms
        p99 = c.window.quantile(0.99)
        c.last_p99 = p99
        if p99 > tau:
            c.consecutive_breach += 1
        else:
            c.consecutive_breach = 0
        if p99 < cfg.relax_stability_ratio * tau:
            c.consecutive_stable += 1
        else:
            c.consecutive_stable = 0

        if not cfg.enabled or not cfg.features.any:
            return None
        if c.since_change < cfg.dwell_obs or c.cooldown_remaining > 0:
            return None
        if c.consecutive_breach >= cfg.persistence_windows:
            return self._escalate(c, tenant, p99)
        if c.consecutive_stable >= cfg.dwell_obs and self.throughput_ok(c, tenant):
            return self._relax(c, tenant, p99)
        return None

    def throughput_ok(self, c: TenantControl, tenant: TenantState) -> bool:
        if not c.completions:
            return False
        expected = tenant.spec.arrival_rate * self.cfg.sample_interval_s * len(c.completions)
        return sum(c.completions) / expected >= self.cfg.throughput_floor

    # -- escalation --------------------------------------------------------

    def _offender(self, tenant: TenantState) -> Optional[TenantState]:
        """Bandwidth-heavy tenant loading the protected tenant's root or NUMA domain."""
        gpu = self.host.gpu(tenant.placement.gpu)
        best = None
        for t in self._host_tenants():
            if t.spec.tenant_class is not TenantClass.BANDWIDTH_HEAVY:
                continue
            g = self.host.gpu(t.placement.gpu)
            if g.pcie_root_id != gpu.pcie_root_id and g.numa_id != gpu.numa_id:
                continue
            key = (g.pcie_root_id == gpu.pcie_root_id, t.spec.offered_pcie_Bps(), t.id)
            if best is None or key > best[0]:
                best = (key, t)
        return None if best is None else best[1]

    def _cotenant(self, tenant: TenantState) -> Optional[TenantState]:
        cands = [t for t in self._host_tenants() if t.mps_host == tenant.id
                 and not t.spec.is_latency_sensitive and t.spec.sm_pressure > 0]
        if not cands:
            return None
        return max(cands, key=lambda t: (t.spec.sm_pressure, t.id))

    def _guardrail(self, c: TenantControl, tenant: TenantState, target: TenantState,
                   kind: ActionKind, value: float, duration: float,
                   diag: Diagnosis) -> ActionRecord:
        sig = self._signal_dict(c)
        pre = apply_guardrail(target, kind, value)
        tc = self._control(target.id)
        self._arm(tc)
        until = self.now + duration
        rec = self._record(target.id, kind, trigger=tenant.id, reason=diag.value,
                           signals=sig, pre=pre, post=target.config(), until=until)
        c.phase = Phase.THROTTLING
        c.phase_until = until
        c.reset_window()
        return rec

    def _escalate(self, c: TenantControl, tenant: TenantState, p99: float) -> ActionRecord:
        cfg = self.cfg
        c.relax_floor = None
        diag = diagnose(self.monitor.tenant_signals(tenant), cfg)
        if cfg.features.guardrails:
            if diag is Diagnosis.IO_PRESSURE:
                off = self._offender(tenant)
                if off is not None and off.io_throttle_MBps is None and self.gates_open(off.id):
                    return self._guardrail(c, tenant, off, ActionKind.THROTTLE_IO,
                                           cfg.io_throttle_MBps, cfg.throttle_duration_s, diag)
            elif diag is Diagnosis.COMPUTE_CONTENTION:
                co = self._cotenant(tenant)
                if co is not None and co.mps_quota_pct >= 100 and self.gates_open(co.id):
                    return self._guardrail(c, tenant, co, ActionKind.MPS_QUOTA,
                                           cfg.mps_quota_pct, cfg.mps_duration_s, diag)
        decision = Decision(ActionKind.EXHAUSTED, reason="no placement or MIG actuation enabled")
        if cfg.features.mig or cfg.features.placement:
            decision = select_upgrade(tenant, self._host_tenants(), self.host, self.monitor, cfg)
        if decision.kind is ActionKind.EXHAUSTED:
            rec = self._record(tenant.id, ActionKind.EXHAUSTED, trigger=tenant.id,
                               reason=f"{diag.value}: {decision.reason}",
                               signals=self._signal_dict(c), pre=tenant.config(),
                               post=tenant.config(), outcome=Outcome.EXHAUSTED)
            self._arm(c)
            c.reset_window()
            return rec
        return self._reconfigure(c, tenant, decision, p99, diag.value, pin=True)

    def _relax(self, c: TenantControl, tenant: TenantState, p99: float) -> Optional[ActionRecord]:
        decision = select_relax(tenant, self._host_tenants(), self.host, self.monitor, self.cfg)
        if decision is None:
            return None
        if c.relax_floor is not None and decision.placement.slices < c.relax_floor.slices:
            return None
        floor = self.cfg.relax_stability_ratio * self.cfg.tail_threshold_ms
        return self._reconfigure(c, tenant, decision, p99, "stable", pin=False, floor=floor)

    def _reconfigure(self, c: TenantControl, tenant: TenantState, decision: Decision,
                     p99: float, reason: str, pin: bool, floor: float = 0.0) -> ActionRecord:
        sig = self._signal_dict(c)
        pre = tenant.config()
        self._set_placement(tenant, decision.placement)
        if pin:
            tenant.cpu_affinity_pinned = True
        rec = self._record(tenant.id, decision.kind, trigger=tenant.id,
                           reason=f"{reason}: {decision.reason}", signals=sig, pre=pre,
                           post=tenant.config(), outcome=Outcome.PENDING)
        self._arm(c)
        c.reset_window()
        c.phase = Phase.RECONFIGURING
        c.pre_p99 = p99
        c.validate_floor = floor
        c.pending = rec
        return rec

    def _set_placement(self, tenant: TenantState, placement: Placement) -> None:
        """Move ``tenant`` to ``placement``.

        MPS co-tenants follow an in-place resize. When the tenant leaves its
        instance they stay behind and the first of them takes it over.
        """
        old = tenant.placement
        tenant.placement = placement
        same_instance = old is not None and (old.gpu, old.start) == (placement.gpu,
                                                                     placement.start)
        co = sorted((t for t in self._host_tenants() if t.mps_host == tenant.id),
                    key=lambda t: t.id)
        if same_instance:
            for t in co:
                t.placement = placement
        elif co:
            owner = co[0]
            owner.mps_host = None
            for t in co[1:]:
                t.mps_host = owner.id

    def _restore(self, tenant: TenantState, good: Snapshot) -> bool:
        """Return ``tenant`` to a snapshot; False if its slices are taken by
        anyone other than its former co-tenants."""
        if good.placement is None:
            return False
        others = [t for t in self._host_tenants() if t.id != tenant.id]
        blocking = [t for t in _owners(others) if t.placement.overlaps(good.placement)]
        if any(t.id not in good.cotenants for t in blocking):
            return False
        if any(t.placement != good.placement for t in blocking):
            return False
        self._set_placement(tenant, good.placement)
        for t in others:
            if t.id in good.cotenants and t.placement == good.placement:
                t.mps_host = tenant.id
        tenant.cpu_affinity_pinned = good.cpu_affinity_pinned
        return True

    # -- validation --------------------------------------------------------

    def on_resume(self, tenant_id: str) -> None:
        """The engine finished a reconfiguration pause for ``tenant_id``."""
        c = self.ctl[tenant_id]
        c.window.clear()
        c.consecutive_breach = 0
        c.consecutive_stable = 0
        if c.pending is None:  # a rollback needs no validation
            c.phase = Phase.STABLE
            return
        c.phase = Phase.VALIDATING
        c.validate_left = self.cfg.validation_obs
        c.post_window.clear()

    def _finish_validation(self, c: TenantControl, tenant: TenantState) -> Optional[ActionRecord]:
        rec = c.pending
        c.pending = None
        c.phase = Phase.STABLE
        outcome = validate_or_rollback(c.pre_p99, c.post_window, self.cfg, c.validate_floor)
        if outcome is Outcome.KEPT:
            rec.outcome = Outcome.KEPT
            c.last_good = Snapshot.of(tenant, self._host_tenants())
            return None
        sig = self._signal_dict(c)
        pre = tenant.config()
        if not self._restore(tenant, c.last_good):
            # the old slices were taken meanwhile; keep the new configuration
            rec.outcome = Outcome.KEPT
            c.last_good = Snapshot.of(tenant, self._host_tenants())
            return None
        rec.outcome = Outcome.ROLLED_BACK
        if rec.action is ActionKind.MIG_DOWN:
            # the smaller profile proved insufficient: hold it as the relax floor
            c.relax_floor = profile_for_slices(tenant.placement.slices)
        back = self._record(tenant.id, ActionKind.ROLLBACK, trigger=tenant.id,
                            reason="post-change p99 regressed", signals=sig, pre=pre,
                            post=tenant.config(), reverts=rec.seq)
        self._arm(c)
        c.reset_window()
        c.phase = Phase.RECONFIGURING
        return back

    # -- admission ---------------------------------------------------------

    def _admission_ok(self, spec: TenantSpec, slot: Placement, profile: MigProfile) -> bool:
        """Post-admission stability on every root that hosts a latency-sensitive tenant."""
        members: dict[int, list[float]] = {}
        ls_roots = set()
        for t in self._host_tenants():
            if t.status is not AdmissionStatus.ADMITTED:
                continue
            rid = self.host.gpu(t.placement.gpu).pcie_root_id
            members.setdefault(rid, []).append(t.spec.pcie_cap_Bps)
            if t.spec.is_latency_sensitive:
                ls_roots.add(rid)
        rid = self.host.gpu(slot.gpu).pcie_root_id
        members.setdefault(rid, []).append(spec.pcie_cap_Bps)
        if spec.is_latency_sensitive:
            ls_roots.add(rid)
            mu = effective_service_rate(profile, spec)
            if not check_stability([], 1.0, spec.arrival_rate, mu):
                return False
        for r in ls_roots:
            if not check_stability(members.get(r, []), self.host.root(r).capacity_Bps):
                return False
        return True

    def admit(self, spec: TenantSpec, slices: int, mps_host: Optional[str] = None,
              enqueue: bool = True) -> ActionRecord:
        """Place a new tenant in the best-scoring slot that keeps the fabric stable."""
        if spec.id in self.tenants and self.tenants[spec.id].status is AdmissionStatus.ADMITTED:
            raise ConfigError(f"tenant {spec.id} is already admitted")
        profile = profile_for_slices(slices)
        if mps_host is not None:
            host_t = self.tenants[mps_host]
            cands = [host_t.placement] if host_t.placement is not None else []
        else:
            cands = free_ranges(self.host, self._host_tenants(), slices)
        scored = sorted(((placement_score(p, self.host, self.monitor, self.cfg), p)
                         for p in cands), key=lambda sp: (sp[0].total, sp[1].sort_key()))
        for sc, slot in scored:
            if self._admission_ok(spec, slot, profile):
                state = self.tenants.get(spec.id)
                if state is None:
                    state = self.tenants[spec.id] = TenantState(spec)
                state.placement = slot
                state.mps_host = mps_host
                state.status = AdmissionStatus.ADMITTED
                if spec.is_latency_sensitive:
                    self.track(state, ready=False)
                else:
                    self._arm(self._control(spec.id))
                return self._record(spec.id, ActionKind.ADMIT, reason=f"score {sc.total:.3f}",
                                    signals=self._signal_dict(None), pre={},
                                    post=state.config())
        state = self.tenants.get(spec.id)
        if state is None:
            state = self.tenants[spec.id] = TenantState(spec)
        state.placement = None
        if enqueue:
            state.status = AdmissionStatus.QUEUED
            self.queue.append((spec, slices, self.now, mps_host))
            return self._record(spec.id, ActionKind.QUEUE, reason="no stable slot",
                                signals=self._signal_dict(None), pre={}, post=state.config())
        state.status = AdmissionStatus.REJECTED
        return self._record(spec.id, ActionKind.REJECT, reason="no stable slot",
                            signals=self._signal_dict(None), pre={}, post=state.config())

    def retry_queue(self) -> list[ActionRecord]:
        """Re-evaluate queued tenants in FIFO order; time out stale entries."""
        out = []
        timeout = self.cfg.queue_timeout_epochs * self.cfg.window_epoch_s
        keep = []
        pending, self.queue = self.queue, []
        for spec, slices, since, mps_host in pending:
            if self.now - since >= timeout:
                self.tenants[spec.id].status = AdmissionStatus.REJECTED
                out.append(self._record(spec.id, ActionKind.REJECT, reason="queue timeout",
                                        signals=self._signal_dict(None), pre={},
                                        post=self.tenants[spec.id].config()))
                continue
            rec = self._try_admit_queued(spec, slices, mps_host)
            if rec is None:
                keep.append((spec, slices, since, mps_host))
            else:
                out.append(rec)
        self.queue = keep + self.queue
        return out

    def _try_admit_queued(self, spec, slices, mps_host) -> Optional[ActionRecord]:
        n = len(self.records)
        seq = self._seq
        rec = self.admit(spec, slices, mps_host, enqueue=True)
        if rec.action is ActionKind.ADMIT:
            return rec
        # still no room: drop the duplicate queue record
        del self.records[n:]
        self._seq = seq
        self.queue.pop()
        self.tenants[spec.id].status = AdmissionStatus.QUEUED
        return None
