"""PCIe contention math: processor-sharing bandwidth grants, per-request
latency decomposition, G/G/1 mean wait, and the fabric stability check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional


class StarvationError(RuntimeError):
    """A transfer was asked to proceed with zero granted bandwidth."""


class QueueDivergenceError(ValueError):
    """Utilization at or above one: the mean wait is unbounded."""


@dataclass(frozen=True)
class BandwidthGrant:
    shares: dict = field(default_factory=dict)  # tenant id -> bytes/s
    residual: float = 0.0
    capacity: float = 0.0

    def __getitem__(self, tenant_id):
        return self.shares[tenant_id]

    def get(self, tenant_id, default=0.0):
        return self.shares.get(tenant_id, default)

    @property
    def total(self) -> float:
        return sum(self.shares.values())


def allocate_bandwidth(active: Iterable[tuple[Hashable, float, Optional[float]]],
                       capacity: float, water_filling: bool = False) -> BandwidthGrant:
    """Split ``capacity`` among ``active`` (tenant, weight, cap) triples.

    Default mode is the literal ``min(B*w_i/sum(w), g_i)``; bandwidth left
    unused by capped tenants stays in ``residual``. With ``water_filling`` the
    leftover is re-shared among the uncapped tenants in weight proportion.
    """
    if not capacity > 0:
        raise ValueError("capacity must be > 0")
    active = list(active)
    if not active:
        return BandwidthGrant({}, capacity, capacity)
    for tid, w, cap in active:
        if not w > 0:
            raise ValueError(f"weight of {tid!r} must be > 0")
        if cap is not None and cap < 0:
            raise ValueError(f"cap of {tid!r} must be >= 0")

    if not water_filling:
        wsum = sum(w for _, w, _ in active)
        shares = {}
        for tid, w, cap in active:
            b = capacity * w / wsum
            if cap is not None and cap < b:
                b = cap
            shares[tid] = b
    else:
        shares = {}
        pending = list(active)
        remaining = capacity
        while pending:
            wsum = sum(w for _, w, _ in pending)
            capped = [(tid, cap) for tid, w, cap in pending
                      if cap is not None and cap <= remaining * w / wsum]
            if not capped:
                for tid, w, _ in pending:
                    shares[tid] = remaining * w / wsum
                remaining = 0.0
                break
            for tid, cap in capped:
                shares[tid] = cap
                remaining -= cap
            done = {tid for tid, _ in capped}
            pending = [a for a in pending if a[0] not in done]
        shares = {tid: shares[tid] for tid, _, _ in active}

    residual = capacity - sum(shares.values())
    if residual < 0:
        residual = 0.0
    return BandwidthGrant(shares, residual, capacity)


def background_duty(flows: dict, capacity: float) -> dict:
    """Fraction of time each fluid background flow is mid-burst on a root.

    ``flows`` maps tenant -> (offered bytes/s, burst cap bytes/s or None). A
    flow must stay active long enough to push its offered load at the rate it
    can reach, which is bounded by its cap and by the capacity the other flows
    leave free; once that is exhausted the flow is backlogged and always on.
    """
    total = sum(d for d, _ in flows.values())
    duty = {}
    for tid, (offered, cap) in flows.items():
        if offered <= 0:
            duty[tid] = 0.0
            continue
        reach = capacity - (total - offered)
        if cap is not None:
            reach = min(reach, cap)
        duty[tid] = 1.0 if reach <= offered else offered / reach
    return duty


@dataclass(frozen=True)
class LatencySample:
    tenant: str
    compute_ms: float
    transfer_ms: float
    noise_ms: float
    total_ms: float
    timestamp: float = 0.0


def transfer_latency(spec, grant_Bps: float, compute_ms: float, noise_ms: float = 0.0,
                     transfer_bytes: Optional[float] = None,
                     timestamp: float = 0.0) -> LatencySample:
    """``L = c + s/b + eps`` with every term in milliseconds."""
    if noise_ms < 0:
        raise ValueError("noise must be >= 0")
    s = spec.transfer_bytes if transfer_bytes is None else transfer_bytes
    if s > 0:
        if not grant_Bps > 0:
            raise StarvationError(f"tenant {spec.id} has {s} bytes pending and no bandwidth")
        transfer_ms = s / grant_Bps * 1000.0
    else:
        transfer_ms = 0.0
    total = compute_ms + transfer_ms + noise_ms
    return LatencySample(spec.id, compute_ms, transfer_ms, noise_ms, total, timestamp)


def kingman_wait(rho: float, c_a: float, c_s: float, mean_service: float) -> float:
    """Kingman's G/G/1 mean queueing delay, in the units of ``mean_service``."""
    if rho >= 1:
        raise QueueDivergenceError(f"utilization {rho} >= 1, queue is unstable")
    if rho < 0 or not mean_service > 0:
        raise ValueError("need 0 <= rho < 1 and mean_service > 0")
    return rho / (1.0 - rho) * ((c_a * c_a + c_s * c_s) / 2.0) * mean_service


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    reason: Optional[str] = None

    def __bool__(self):
        return self.stable


FABRIC_OVERSUBSCRIBED = "fabric oversubscribed"
TENANT_OVERLOAD = "tenant overload"


def check_stability(caps: Iterable[float], capacity: float,
                    arrival_rate: Optional[float] = None,
                    service_rate: Optional[float] = None) -> StabilityVerdict:
    """Bounded throttles below capacity and per-tenant arrival rate below service rate."""
    caps = list(caps)
    if any(g < 0 for g in caps) or capacity < 0:
        raise ValueError("inputs must be nonnegative")
    if sum(caps) >= capacity:
        return StabilityVerdict(False, FABRIC_OVERSUBSCRIBED)
    if arrival_rate is not None and service_rate is not None and arrival_rate >= service_rate:
        return StabilityVerdict(False, TENANT_OVERLOAD)
    return StabilityVerdict(True)
