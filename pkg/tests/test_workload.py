from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from migsim.model import ConfigError, TenantClass, TenantSpec
from migsim.workload import (
    MB,
    PRESETS,
    InterferenceSchedule,
    generate_arrivals,
    preset,
    schedule_state,
    stream_rng,
)


def spec(rate=100.0, cv=1.0, **kw):
    return TenantSpec("T1", TenantClass.LATENCY_SENSITIVE, arrival_rate=rate, arrival_cv=cv,
                      **kw)


def test_poisson_count():
    n = len(generate_arrivals(spec(), 100.0, seed=3))
    assert abs(n - 10_000) <= 300


def test_deterministic_renewal():
    s = generate_arrivals(spec(rate=20, cv=0.0), 5.0, seed=1)
    gaps = np.diff(s.times)
    assert np.allclose(gaps, 1 / 20)
    assert s.times[0] == pytest.approx(1 / 20)


def test_same_seed_same_stream():
    a = generate_arrivals(spec(transfer_mix=((0.8, MB), (0.2, 16 * MB))), 50, seed=9)
    b = generate_arrivals(spec(transfer_mix=((0.8, MB), (0.2, 16 * MB))), 50, seed=9)
    c = generate_arrivals(spec(transfer_mix=((0.8, MB), (0.2, 16 * MB))), 50, seed=10)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.sizes, b.sizes)
    assert not np.array_equal(a.times[:10], c.times[:10])


@given(st.floats(0.5, 200), st.floats(0, 3), st.integers(0, 2**31))
def test_arrivals_strictly_increase_within_horizon(rate, cv, seed):
    s = generate_arrivals(spec(rate, cv), 10.0, seed)
    assert np.all(np.diff(s.times) > 0)
    assert s.times.size == 0 or (s.times[0] > 0 and s.times[-1] < 10.0)


def test_interarrival_cv():
    s = generate_arrivals(spec(rate=50, cv=2.0), 2000.0, seed=5)
    gaps = np.diff(s.times)
    assert gaps.std() / gaps.mean() == pytest.approx(2.0, rel=0.1)


def test_transfer_mixture_proportions():
    s = generate_arrivals(spec(transfer_mix=((0.8, MB), (0.2, 16 * MB))), 200, seed=2)
    assert np.mean(s.sizes == 16 * MB) == pytest.approx(0.2, abs=0.02)


def test_request_events():
    s = generate_arrivals(spec(rate=5, transfer_bytes=3.0), 10, seed=1)
    ev = s[0]
    assert ev.tenant == "T1" and ev.transfer_bytes == 3.0 and ev.completion is None
    assert [e.arrival for e in s[:3]] == list(s.times[:3])


def test_arrivals_reject_bad_inputs():
    with pytest.raises(ConfigError):
        generate_arrivals(spec(), 0.0, seed=1)


@pytest.mark.parametrize("sched, t, expected", [
    (InterferenceSchedule.square(120, 0.5), 30, True),
    (InterferenceSchedule.square(120, 0.5), 90, False),
    (InterferenceSchedule.explicit([(0, 60), (120, 180)]), 100, False),
    (InterferenceSchedule.explicit([(0, 60), (120, 180)]), 150, True),
    (InterferenceSchedule(), 1e6, True),
    (InterferenceSchedule.never(), 5, False),
    (InterferenceSchedule.square(300, 0.5, offset=150), 100, False),
])
def test_schedule_state(sched, t, expected):
    assert schedule_state(sched, t) is expected


@pytest.mark.parametrize("kw", [
    {"phases": ((10.0, 5.0),)}, {"phases": ((0.0, 10.0), (5.0, 20.0))},
    {"period": 0.0, "duty": 0.5}, {"period": 10.0, "duty": 1.5},
    {"phases": ((0.0, 1.0),), "period": 5.0, "duty": 0.5},
])
def test_schedule_validation(kw):
    with pytest.raises(ConfigError):
        InterferenceSchedule(**kw)


@given(st.floats(1, 500), st.floats(0.05, 0.95), st.floats(0, 500), st.floats(10, 3000))
def test_transitions_replay_the_schedule(period, duty, offset, horizon):
    sched = InterferenceSchedule.square(period, duty, offset)
    state = sched.active(0.0)
    for t, new in sched.transitions(horizon):
        assert new != state
        state = new
        assert schedule_state(sched, t + 1e-6 * period) is new


def test_presets():
    assert set(PRESETS) == {"t1-inference", "t2-etl", "t3-train", "llm-ttft"}
    t1 = preset("t1-inference", "T1")
    assert t1.is_latency_sensitive and t1.slo_tail_ms == 15.0
    assert t1.transfer_mix == ((0.8, MB), (0.2, 16 * MB))
    assert preset("llm-ttft", "L").slo_tail_ms == 200.0
    assert preset("t2-etl", "T2", weight=9.0).weight == 9.0
    with pytest.raises(ConfigError):
        preset("nope", "x")


def test_stream_rng_independent_by_purpose():
    a = stream_rng(1, "T1", "arrivals").random(4)
    b = stream_rng(1, "T1", "sizes").random(4)
    assert not np.allclose(a, b)
    assert np.array_equal(a, stream_rng(1, "T1", "arrivals").random(4))
