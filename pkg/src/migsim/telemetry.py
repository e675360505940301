"""Sliding-window tail statistics, EMA smoothing with hysteresis, and SLO
accounting."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np


class NoDataError(LookupError):
    """A statistic was requested from an empty window."""


def nearest_rank_index(q: float, n: int) -> int:
    """0-based index of the nearest-rank ``q``-quantile among ``n`` sorted values."""
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    if n <= 0:
        raise NoDataError("no samples")
    # rounding strips float noise such as 0.07 * 100 = 7.000000000000001
    return max(1, math.ceil(round(q * n, 9))) - 1


def nearest_rank(values, q: float) -> float:
    arr = np.asarray(values, dtype=float)
    k = nearest_rank_index(q, arr.size)
    return float(np.partition(arr, k)[k])


class TailWindow:
    """Ring of the most recent ``capacity`` latency samples (ms)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._buf = np.empty(self.capacity, dtype=float)
        self._n = 0
        self._head = 0  # next write position
        self._cache: dict[float, float] = {}

    def __len__(self) -> int:
        return self._n

    def clear(self) -> None:
        self._n = 0
        self._head = 0
        self._cache.clear()

    def push(self, sample: float) -> None:
        self._buf[self._head] = sample
        self._head = (self._head + 1) % self.capacity
        if self._n < self.capacity:
            self._n += 1
        self._cache.clear()

    def extend(self, samples) -> None:
        arr = np.asarray(samples, dtype=float).ravel()
        if arr.size == 0:
            return
        if arr.size >= self.capacity:
            self._buf[:] = arr[-self.capacity:]
            self._head = 0
            self._n = self.capacity
        else:
            end = self._head + arr.size
            if end <= self.capacity:
                self._buf[self._head:end] = arr
            else:
                cut = self.capacity - self._head
                self._buf[self._head:] = arr[:cut]
                self._buf[:end - self.capacity] = arr[cut:]
            self._head = end % self.capacity
            self._n = min(self.capacity, self._n + arr.size)
        self._cache.clear()

    def values(self) -> np.ndarray:
        """Samples in insertion order, oldest first."""
        if self._n < self.capacity:
            return self._buf[:self._n].copy()
        return np.concatenate((self._buf[self._head:], self._buf[:self._head]))

    def quantile(self, q: float) -> float:
        if self._n == 0:
            raise NoDataError("empty tail window")
        hit = self._cache.get(q)
        if hit is not None:
            return hit
        k = nearest_rank_index(q, self._n)
        live = self._buf[:self._n] if self._n < self.capacity else self._buf
        value = float(np.partition(live, k)[k])
        self._cache[q] = value
        return value

    def quantiles(self, qs: Iterable[float]) -> dict[float, float]:
        return {q: self.quantile(q) for q in qs}


def push_and_quantile(window: TailWindow, sample: float, q: float) -> float:
    window.push(sample)
    return window.quantile(q)


CLEAR = "clear"
TRIGGERED = "triggered"


@dataclass
class SmoothedSignal:
    """EMA of a signal plus a two-level hysteresis latch."""

    alpha: float
    trigger_level: float
    clear_level: float
    value: Optional[float] = None
    state: str = CLEAR

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.clear_level < self.trigger_level:
            raise ValueError("clear level must sit below the trigger level")

    @classmethod
    def with_ratio(cls, alpha: float, trigger_level: float, clear_ratio: float = 0.9):
        return cls(alpha, trigger_level, trigger_level * clear_ratio)

    def update(self, sample: float) -> "SmoothedSignal":
        if self.value is None:
            self.value = float(sample)
        else:
            self.value = self.alpha * sample + (1.0 - self.alpha) * self.value
        if self.state == CLEAR and self.value > self.trigger_level:
            self.state = TRIGGERED
        elif self.state == TRIGGERED and self.value < self.clear_level:
            self.state = CLEAR
        return self

    @property
    def triggered(self) -> bool:
        return self.state == TRIGGERED


def ema_update(signal: SmoothedSignal, sample: float) -> SmoothedSignal:
    """Pure variant of :meth:`SmoothedSignal.update`."""
    return replace(signal).update(sample)


class SloAccount:
    """Latency samples of one tenant with miss-rate and throughput views."""

    def __init__(self, capacity: Optional[int] = None):
        self._lat: deque = deque(maxlen=capacity)
        self.completed = 0

    def __len__(self) -> int:
        return len(self._lat)

    def record(self, latency_ms: float) -> None:
        self._lat.append(latency_ms)
        self.completed += 1

    def extend(self, latencies) -> None:
        for x in latencies:
            self.record(x)

    def miss_rate(self, tau_ms: float) -> float:
        return slo_miss_rate(self._lat, tau_ms)

    def throughput(self, elapsed_s: float) -> float:
        return self.completed / elapsed_s if elapsed_s > 0 else 0.0

    def normalized_throughput(self, elapsed_s: float, baseline_rps: float) -> float:
        """Completion rate relative to the static-baseline rate."""
        if not baseline_rps > 0:
            raise ValueError("baseline rate must be > 0")
        return self.throughput(elapsed_s) / baseline_rps


def slo_miss_rate(latencies, tau_ms: float) -> float:
    """Fraction of samples strictly above ``tau_ms``."""
    if isinstance(latencies, SloAccount):
        return latencies.miss_rate(tau_ms)
    arr = np.asarray(list(latencies) if isinstance(latencies, deque) else latencies, dtype=float)
    if arr.size == 0:
        raise NoDataError("no samples for miss-rate")
    return float(np.count_nonzero(arr > tau_ms)) / arr.size
