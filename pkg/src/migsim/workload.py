"""Seeded workload generators: tenant presets, renewal arrival streams and
interference on/off schedules."""

from __future__ import annotations

import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ConfigError, TenantClass, TenantSpec

MB = 1_000_000
GB = 1_000_000_000

# Field values for the named presets; scenario files may override any of them.
PRESETS: dict[str, dict] = {
    "t1-inference": dict(
        tenant_class=TenantClass.LATENCY_SENSITIVE,
        arrival_rate=40.0,
        arrival_cv=1.0,
        transfer_mix=((0.8, 1 * MB), (0.2, 16 * MB)),
        base_compute_ms=1.2,
        service_cv=0.1,
        slo_tail_ms=15.0,
        weight=1.0,
    ),
    "t2-etl": dict(
        tenant_class=TenantClass.BANDWIDTH_HEAVY,
        pcie_demand_Bps=14 * GB,
        weight=3.0,
        host_io_MBps=3000.0,
        sm_pressure=0.3,
        slo_tail_ms=1000.0,
    ),
    "t3-train": dict(
        tenant_class=TenantClass.COMPUTE_HEAVY,
        pcie_demand_Bps=8 * GB,
        pcie_duty=0.05,
        weight=1.0,
        host_io_MBps=100.0,
        sm_pressure=1.0,
        slo_tail_ms=1000.0,
    ),
    "llm-ttft": dict(
        tenant_class=TenantClass.LATENCY_SENSITIVE,
        arrival_rate=4.0,
        arrival_cv=1.0,
        transfer_mix=((0.8, 4 * MB), (0.2, 64 * MB)),
        base_compute_ms=16.0,
        service_cv=0.15,
        slo_tail_ms=200.0,
        weight=1.0,
    ),
}


def preset(name: str, tenant_id: str, **overrides) -> TenantSpec:
    try:
        fields = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown workload preset {name!r}") from None
    fields.update(overrides)
    return TenantSpec(id=tenant_id, **fields)


# ---------------------------------------------------------------------------
# Interference schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterferenceSchedule:
    """On/off activity of a background tenant.

    Either explicit ``phases`` of (on_time, off_time) or a square wave with
    ``period`` and ``duty`` (shifted by ``offset``). With neither, the tenant
    is active throughout unless ``always`` is False.
    """

    phases: tuple[tuple[float, float], ...] = ()
    period: Optional[float] = None
    duty: Optional[float] = None
    offset: float = 0.0
    always: bool = True

    def __post_init__(self):
        if self.phases and self.period is not None:
            raise ConfigError("schedule: give either phases or a square wave, not both")
        prev_off = -np.inf
        for on, off in self.phases:
            if not on < off:
                raise ConfigError(f"schedule: phase ({on}, {off}) must have on < off")
            if on < prev_off:
                raise ConfigError("schedule: phases must be sorted and non-overlapping")
            prev_off = off
        if self.period is not None:
            if not self.period > 0:
                raise ConfigError("schedule: period must be > 0")
            if self.duty is None or not 0 <= self.duty <= 1:
                raise ConfigError("schedule: duty must lie in [0, 1]")

    @classmethod
    def square(cls, period: float, duty: float, offset: float = 0.0):
        return cls(period=period, duty=duty, offset=offset)

    @classmethod
    def explicit(cls, phases):
        return cls(phases=tuple((float(a), float(b)) for a, b in phases))

    @classmethod
    def never(cls):
        return cls(always=False)

    def active(self, t: float) -> bool:
        return schedule_state(self, t)

    def transitions(self, horizon: float) -> list[tuple[float, bool]]:
        """(time, new_state) pairs in (0, horizon); state at t=0 is ``active(0)``."""
        out: list[tuple[float, bool]] = []
        if self.phases:
            for on, off in self.phases:
                if 0 < on < horizon:
                    out.append((on, True))
                if 0 < off < horizon:
                    out.append((off, False))
            return out
        if self.period is None:
            return out
        on_len = self.duty * self.period
        if on_len <= 0 or on_len >= self.period:
            return out
        k = int(np.floor(-self.offset / self.period)) - 1
        while True:
            start = self.offset + k * self.period
            if start >= horizon:
                break
            for t, state in ((start, True), (start + on_len, False)):
                if 0 < t < horizon:
                    out.append((t, state))
            k += 1
        return out


def schedule_state(schedule: InterferenceSchedule, t: float) -> bool:
    if t < 0:
        raise ValueError("time must be >= 0")
    if schedule.phases:
        return any(on <= t < off for on, off in schedule.phases)
    if schedule.period is not None:
        return ((t - schedule.offset) % schedule.period) < schedule.duty * schedule.period
    return schedule.always


# ---------------------------------------------------------------------------
# Arrival streams
# ---------------------------------------------------------------------------


def stream_rng(seed: int, tenant_id: str, purpose: str) -> np.random.Generator:
    """Independent, reproducible generator per (seed, tenant, purpose)."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(tenant_id.encode()), zlib.crc32(purpose.encode())]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class RequestEvent:
    tenant: str
    arrival: float
    transfer_bytes: float
    compute_ms: float  # demand at the full-GPU profile
    completion: Optional[float] = None


@dataclass(frozen=True)
class ArrivalStream(Sequence):
    tenant: str
    times: np.ndarray
    sizes: np.ndarray
    work_ms: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.times.size)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return RequestEvent(self.tenant, float(self.times[i]), float(self.sizes[i]),
                            float(self.work_ms[i]))


def _gamma_unit(rng: np.random.Generator, cv: float, n: int) -> np.ndarray:
    """``n`` positive draws with mean 1 and coefficient of variation ``cv``."""
    if cv < 1e-6:
        # gamma shape 1/cv^2 overflows; the draws are 1 to machine precision anyway
        return np.ones(n)
    shape = 1.0 / (cv * cv)
    return rng.gamma(shape, 1.0 / shape, size=n)


def generate_arrivals(spec: TenantSpec, horizon: float, seed: int) -> ArrivalStream:
    """Renewal arrivals with rate ``spec.arrival_rate`` and inter-arrival CV
    ``spec.arrival_cv`` (gamma distributed; CV 1 gives Poisson)."""
    if not horizon > 0:
        raise ConfigError("horizon must be > 0")
    if not spec.arrival_rate > 0:
        raise ConfigError(f"tenant {spec.id}: arrival_rate must be > 0")
    rng = stream_rng(seed, spec.id, "arrivals")
    lam = spec.arrival_rate
    expected = lam * horizon
    chunk = int(expected + 6 * np.sqrt(expected) + 16)
    parts = []
    t = 0.0
    while t < horizon:
        gaps = _gamma_unit(rng, spec.arrival_cv, chunk) / lam
        # guard against zero-length gaps from extreme shapes
        np.maximum(gaps, 1e-12, out=gaps)
        times = t + np.cumsum(gaps)
        parts.append(times)
        t = float(times[-1])
    times = np.concatenate(parts)
    times = times[times < horizon]
    n = times.size

    size_rng = stream_rng(seed, spec.id, "sizes")
    if spec.transfer_mix:
        probs = np.array([p for p, _ in spec.transfer_mix])
        values = np.array([s for _, s in spec.transfer_mix], dtype=float)
        sizes = values[size_rng.choice(values.size, size=n, p=probs)]
    else:
        sizes = np.full(n, float(spec.transfer_bytes))

    work_rng = stream_rng(seed, spec.id, "work")
    work = spec.base_compute_ms * _gamma_unit(work_rng, spec.service_cv, n)
    return ArrivalStream(spec.id, times, sizes, work)
