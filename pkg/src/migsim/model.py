"""Domain types shared across the simulator: topology, MIG lattice, tenants,
controller configuration."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional


class ConfigError(ValueError):
    """Raised for inconsistent or malformed configuration."""


# ---------------------------------------------------------------------------
# MIG profile lattice
# ---------------------------------------------------------------------------

A100_TOTAL_SLICES = 7


@dataclass(frozen=True, order=True)
class MigProfile:
    slices: int
    name: str = field(compare=False)
    mem_gb: int = field(compare=False, default=0)

    @property
    def sm_fraction(self) -> float:
        return self.slices / A100_TOTAL_SLICES

    def __str__(self) -> str:
        return self.name


A100_LATTICE: tuple[MigProfile, ...] = (
    MigProfile(1, "1g.10gb", 10),
    MigProfile(2, "2g.20gb", 20),
    MigProfile(3, "3g.40gb", 40),
    MigProfile(4, "4g.40gb", 40),
    MigProfile(7, "7g.80gb", 80),
)

_BY_NAME = {p.name: p for p in A100_LATTICE}
# short aliases like "3g" are accepted in scenario files
_BY_NAME.update({p.name.split(".")[0]: p for p in A100_LATTICE})


def profile_by_name(name: str) -> MigProfile:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ConfigError(f"unknown MIG profile {name!r}") from None


def profile_for_slices(slices: int) -> MigProfile:
    for p in A100_LATTICE:
        if p.slices == slices:
            return p
    raise ConfigError(f"no MIG profile with {slices} slices")


def mig_lattice_step(profile: MigProfile | str, direction: str) -> Optional[MigProfile]:
    """Adjacent profile in slice order, or None at the lattice boundary."""
    if isinstance(profile, str):
        profile = profile_by_name(profile)
    if profile not in A100_LATTICE:
        raise ConfigError(f"profile {profile!r} is not in the lattice")
    idx = A100_LATTICE.index(profile)
    if direction == "up":
        idx += 1
    elif direction == "down":
        idx -= 1
    else:
        raise ConfigError(f"direction must be 'up' or 'down', got {direction!r}")
    if 0 <= idx < len(A100_LATTICE):
        return A100_LATTICE[idx]
    return None


def effective_service_rate(profile: MigProfile, spec: "TenantSpec") -> float:
    """Requests/s a tenant can sustain on ``profile`` (linear in SM fraction)."""
    return profile.sm_fraction / (spec.base_compute_ms / 1000.0)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcieRootSpec:
    id: int
    capacity_Bps: float
    numa_id: int = 0

    def __post_init__(self):
        if not self.capacity_Bps > 0:
            raise ConfigError(f"PCIe root {self.id}: capacity must be > 0")


@dataclass(frozen=True)
class GpuSpec:
    id: int
    pcie_root_id: int
    numa_id: int
    total_slices: int = A100_TOTAL_SLICES


@dataclass(frozen=True)
class HostSpec:
    id: str
    gpus: tuple[GpuSpec, ...]
    pcie_roots: tuple[PcieRootSpec, ...]
    numa_domains: int = 1
    irq_hot_cores: frozenset[int] = frozenset()
    # block-I/O capacity of each NUMA domain's storage path
    host_io_capacity_MBps: float = 4000.0

    def __post_init__(self):
        roots = {r.id for r in self.pcie_roots}
        if len(roots) != len(self.pcie_roots):
            raise ConfigError(f"host {self.id}: duplicate PCIe root ids")
        seen = set()
        for g in self.gpus:
            if g.id in seen:
                raise ConfigError(f"host {self.id}: duplicate GPU id {g.id}")
            seen.add(g.id)
            if g.pcie_root_id not in roots:
                raise ConfigError(
                    f"host {self.id}: GPU {g.id} references unknown PCIe root {g.pcie_root_id}")
            if not 0 <= g.numa_id < self.numa_domains:
                raise ConfigError(
                    f"host {self.id}: GPU {g.id} references unknown NUMA domain {g.numa_id}")
            if g.total_slices != A100_TOTAL_SLICES:
                raise ConfigError(
                    f"host {self.id}: GPU {g.id} must expose {A100_TOTAL_SLICES} slices")
        for r in self.pcie_roots:
            if not 0 <= r.numa_id < self.numa_domains:
                raise ConfigError(f"host {self.id}: root {r.id} references unknown NUMA domain")
        if self.host_io_capacity_MBps <= 0:
            raise ConfigError(f"host {self.id}: host_io_capacity_MBps must be > 0")

    def gpu(self, gpu_id: int) -> GpuSpec:
        for g in self.gpus:
            if g.id == gpu_id:
                return g
        raise ConfigError(f"host {self.id}: no GPU {gpu_id}")

    def root(self, root_id: int) -> PcieRootSpec:
        for r in self.pcie_roots:
            if r.id == root_id:
                return r
        raise ConfigError(f"host {self.id}: no PCIe root {root_id}")


@dataclass(frozen=True)
class TopologySpec:
    hosts: tuple[HostSpec, ...]

    def __post_init__(self):
        ids = [h.id for h in self.hosts]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate host ids")
        if not self.hosts:
            raise ConfigError("topology needs at least one host")

    def host(self, host_id: str) -> HostSpec:
        for h in self.hosts:
            if h.id == host_id:
                return h
        raise ConfigError(f"no host {host_id!r}")


# ---------------------------------------------------------------------------
# Tenants
# ---------------------------------------------------------------------------


class TenantClass(str, enum.Enum):
    LATENCY_SENSITIVE = "latency_sensitive"
    BANDWIDTH_HEAVY = "bandwidth_heavy"
    COMPUTE_HEAVY = "compute_heavy"


@dataclass(frozen=True)
class TenantSpec:
    """Static description of a tenant workload.

    Latency-sensitive tenants are simulated request by request. Background
    tenants are fluid load sources: ``pcie_demand_Bps`` is the rate cap g of a
    PCIe burst, ``pcie_duty`` the fraction of time they burst when not
    throttled, ``host_io_MBps`` their block-I/O rate and ``sm_pressure`` the
    SM occupancy they impose on MPS co-tenants.
    """

    id: str
    tenant_class: TenantClass
    arrival_rate: float = 1.0
    arrival_cv: float = 1.0
    transfer_bytes: float = 0.0
    base_compute_ms: float = 1.0
    service_cv: float = 0.0
    slo_tail_ms: float = 15.0
    weight: float = 1.0
    pcie_demand_Bps: Optional[float] = None
    # (probability, bytes) pairs; empty means every request moves transfer_bytes
    transfer_mix: tuple[tuple[float, float], ...] = ()
    host_io_MBps: float = 0.0
    sm_pressure: float = 0.0
    pcie_duty: float = 1.0

    def __post_init__(self):
        if not self.arrival_rate > 0:
            raise ConfigError(f"tenant {self.id}: arrival_rate must be > 0")
        if self.transfer_bytes < 0:
            raise ConfigError(f"tenant {self.id}: transfer_bytes must be >= 0")
        if not self.base_compute_ms > 0:
            raise ConfigError(f"tenant {self.id}: base_compute_ms must be > 0")
        if not self.weight > 0:
            raise ConfigError(f"tenant {self.id}: weight must be > 0")
        if self.arrival_cv < 0 or self.service_cv < 0:
            raise ConfigError(f"tenant {self.id}: coefficients of variation must be >= 0")
        if self.pcie_demand_Bps is not None and self.pcie_demand_Bps < 0:
            raise ConfigError(f"tenant {self.id}: pcie_demand must be >= 0")
        if not 0 <= self.pcie_duty <= 1:
            raise ConfigError(f"tenant {self.id}: pcie_duty must lie in [0, 1]")
        if self.host_io_MBps < 0 or self.sm_pressure < 0:
            raise ConfigError(f"tenant {self.id}: host_io_MBps and sm_pressure must be >= 0")
        if self.transfer_mix:
            total = sum(p for p, _ in self.transfer_mix)
            if abs(total - 1.0) > 1e-9 or any(p < 0 or s < 0 for p, s in self.transfer_mix):
                raise ConfigError(f"tenant {self.id}: transfer_mix probabilities must sum to 1")

    @property
    def is_latency_sensitive(self) -> bool:
        return self.tenant_class is TenantClass.LATENCY_SENSITIVE

    @property
    def mean_transfer_bytes(self) -> float:
        if self.transfer_mix:
            return sum(p * s for p, s in self.transfer_mix)
        return self.transfer_bytes

    @property
    def pcie_cap_Bps(self) -> float:
        """Demand bound g used by admission: the burst cap, or the mean
        request load for tenants without one."""
        if self.pcie_demand_Bps is None:
            return self.arrival_rate * self.mean_transfer_bytes
        return self.pcie_demand_Bps

    def offered_pcie_Bps(self, io_throttle_MBps: Optional[float] = None) -> float:
        """Average PCIe load offered while active (the effective demand bound g).

        An I/O throttle slows the reads that feed the device, so a background
        tenant's offered PCIe load shrinks with the throttled fraction of its
        block-I/O rate.
        """
        if self.pcie_demand_Bps is None:
            return self.arrival_rate * self.mean_transfer_bytes
        offered = self.pcie_demand_Bps * self.pcie_duty
        if io_throttle_MBps is not None and self.host_io_MBps > 0:
            offered *= min(1.0, io_throttle_MBps / self.host_io_MBps)
        return offered


@dataclass(frozen=True)
class Placement:
    host: str
    gpu: int
    start: int
    slices: int

    @property
    def end(self) -> int:
        return self.start + self.slices

    @property
    def slot_id(self) -> str:
        return f"{self.host}/g{self.gpu}/s{self.start}"

    def overlaps(self, other: "Placement") -> bool:
        return (self.host == other.host and self.gpu == other.gpu
                and self.start < other.end and other.start < self.end)

    def sort_key(self):
        return (self.host, self.gpu, self.start, self.slices)


class AdmissionStatus(str, enum.Enum):
    ADMITTED = "admitted"
    QUEUED = "queued"
    REJECTED = "rejected"


MPS_QUOTA_BOUNDS = (50.0, 100.0)
IO_THROTTLE_BOUNDS_MBPS = (100.0, 500.0)


@dataclass
class TenantState:
    spec: TenantSpec
    placement: Optional[Placement] = None
    # tenant whose MIG instance this one shares through MPS (None = owns its slices)
    mps_host: Optional[str] = None
    mps_quota_pct: float = 100.0
    io_throttle_MBps: Optional[float] = None
    paused_until: Optional[float] = None
    status: AdmissionStatus = AdmissionStatus.ADMITTED
    cpu_affinity_pinned: bool = False

    def __post_init__(self):
        lo, hi = MPS_QUOTA_BOUNDS
        if not lo <= self.mps_quota_pct <= hi:
            raise ConfigError(f"tenant {self.spec.id}: mps_quota_pct outside [{lo}, {hi}]")
        if self.io_throttle_MBps is not None:
            lo, hi = IO_THROTTLE_BOUNDS_MBPS
            if not lo <= self.io_throttle_MBps <= hi:
                raise ConfigError(f"tenant {self.spec.id}: io_throttle_MBps outside [{lo}, {hi}]")

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def profile(self) -> Optional[MigProfile]:
        if self.placement is None:
            return None
        return profile_for_slices(self.placement.slices)

    def config(self) -> dict:
        """Serializable view of the mutable configuration."""
        p = self.placement
        return {
            "slot": p.slot_id if p else None,
            "profile": self.profile.name if p else None,
            "mps_host": self.mps_host,
            "mps_quota_pct": self.mps_quota_pct,
            "io_throttle_MBps": self.io_throttle_MBps,
            "cpu_affinity_pinned": self.cpu_affinity_pinned,
        }


def check_slice_packing(tenants) -> None:
    """Slice ranges of instance owners on one GPU must not overlap.

    MPS co-tenants ride inside their host tenant's instance and must report
    the identical range.
    """
    by_id = {t.id: t for t in tenants}
    owners = [t for t in tenants
              if t.placement is not None and t.mps_host is None
              and t.status is AdmissionStatus.ADMITTED]
    for i, a in enumerate(owners):
        if a.placement.end > A100_TOTAL_SLICES or a.placement.start < 0:
            raise ConfigError(f"tenant {a.id}: slice range exceeds the GPU")
        for b in owners[i + 1:]:
            if a.placement.overlaps(b.placement):
                raise ConfigError(f"tenants {a.id} and {b.id} overlap on {a.placement.slot_id}")
    for t in tenants:
        if t.mps_host is None:
            continue
        host = by_id.get(t.mps_host)
        if host is None or host.mps_host is not None:
            raise ConfigError(f"tenant {t.id}: MPS host {t.mps_host!r} must own an instance")
        if t.placement != host.placement:
            raise ConfigError(f"tenant {t.id}: must share the placement of {t.mps_host}")


# ---------------------------------------------------------------------------
# Controller configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Features:
    mig: bool = True
    placement: bool = True
    guardrails: bool = True

    @property
    def any(self) -> bool:
        return self.mig or self.placement or self.guardrails


@dataclass(frozen=True)
class ControllerConfig:
    enabled: bool = True
    features: Features = Features()
    tail_threshold_ms: float = 15.0
    persistence_windows: int = 3
    dwell_obs: int = 256
    cooldown_obs: int = 128
    sample_interval_s: float = 1.0
    throttle_duration_s: float = 30.0
    mps_duration_s: float = 30.0
    ema_alpha: float = 0.2
    hysteresis_clear_ratio: float = 0.9
    relax_stability_ratio: float = 0.8
    relax_score_threshold: float = 0.2
    validation_obs: int = 64
    rollback_regress_ratio: float = 0.05
    theta_pcie: float = 0.8
    theta_io: float = 0.8
    theta_sm: float = 0.7
    move_margin: float = 0.25
    penalty_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    penalty_lookback_obs: int = 256
    io_throttle_MBps: float = 100.0
    mps_quota_pct: float = 50.0
    queue_timeout_epochs: int = 10
    throughput_floor: float = 0.95

    def __post_init__(self):
        if not 1.0 <= self.sample_interval_s <= 5.0:
            raise ConfigError("sample_interval_s must lie in [1, 5] seconds")
        if self.persistence_windows < 1:
            raise ConfigError("persistence_windows must be >= 1")
        if self.dwell_obs < 0 or self.cooldown_obs < 0 or self.validation_obs < 1:
            raise ConfigError("dwell/cooldown must be >= 0 and validation_obs >= 1")
        if not 0 < self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must lie in (0, 1]")
        if not 0 < self.hysteresis_clear_ratio < 1:
            raise ConfigError("hysteresis_clear_ratio must lie in (0, 1)")
        if not 0 < self.relax_stability_ratio <= 1:
            raise ConfigError("relax_stability_ratio must lie in (0, 1]")
        lo, hi = IO_THROTTLE_BOUNDS_MBPS
        if not lo <= self.io_throttle_MBps <= hi:
            raise ConfigError(f"io_throttle_MBps must lie in [{lo}, {hi}]")
        lo, hi = MPS_QUOTA_BOUNDS
        if not lo <= self.mps_quota_pct <= hi:
            raise ConfigError(f"mps_quota_pct must lie in [{lo}, {hi}]")
        if self.throttle_duration_s <= 0 or self.mps_duration_s <= 0:
            raise ConfigError("guardrail durations must be > 0")

    def with_features(self, **flags) -> "ControllerConfig":
        return replace(self, features=replace(self.features, **flags))

    @property
    def window_epoch_s(self) -> float:
        return self.dwell_obs * self.sample_interval_s

