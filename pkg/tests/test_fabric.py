from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from migsim.fabric import (
    FABRIC_OVERSUBSCRIBED,
    TENANT_OVERLOAD,
    QueueDivergenceError,
    StarvationError,
    allocate_bandwidth,
    background_duty,
    check_stability,
    kingman_wait,
    transfer_latency,
)
from migsim.model import TenantClass, TenantSpec

GB = 1e9
MB = 1e6


def test_equal_weights_split_evenly():
    g = allocate_bandwidth([("a", 1, None), ("b", 1, None)], 16 * GB)
    assert g["a"] == g["b"] == 8 * GB
    assert g.residual == 0


def test_cap_is_not_redistributed():
    g = allocate_bandwidth([("a", 1, 2 * GB), ("b", 1, None)], 16 * GB)
    assert (g["a"], g["b"], g.residual) == (2 * GB, 8 * GB, 6 * GB)


def test_weighted_shares():
    g = allocate_bandwidth([("a", 2, None), ("b", 1, None), ("c", 1, None)], 16.0)
    assert (g["a"], g["b"], g["c"]) == (8.0, 4.0, 4.0)


def test_empty_active_set():
    g = allocate_bandwidth([], 16 * GB)
    assert g.shares == {} and g.residual == 16 * GB


def test_water_filling_redistributes():
    g = allocate_bandwidth([("a", 1, 2 * GB), ("b", 1, None)], 16 * GB, water_filling=True)
    assert g["a"] == 2 * GB
    assert g["b"] == pytest.approx(14 * GB)
    assert g.residual == pytest.approx(0, abs=1e-3)


@pytest.mark.parametrize("active, cap", [
    ([("a", 0, None)], 1.0), ([("a", 1, -1.0)], 1.0), ([("a", 1, None)], 0.0),
])
def test_allocate_rejects_bad_inputs(active, cap):
    with pytest.raises(ValueError):
        allocate_bandwidth(active, cap)


flows = st.lists(
    st.tuples(st.floats(0.01, 100), st.one_of(st.none(), st.floats(0, 50 * GB))),
    min_size=1, max_size=8)


@given(flows, st.floats(1 * GB, 64 * GB), st.booleans())
def test_conservation_and_caps(fl, cap, wf):
    active = [(i, w, g) for i, (w, g) in enumerate(fl)]
    grant = allocate_bandwidth(active, cap, water_filling=wf)
    total = grant.total
    assert total <= cap * (1 + 1e-9)
    assert math.isclose(total + grant.residual, cap, rel_tol=1e-9)
    wsum = sum(w for _, w, _ in active)
    for i, w, g in active:
        b = grant[i]
        assert b >= 0
        if g is not None:
            assert b <= g * (1 + 1e-12)
        if not wf:
            assert math.isclose(b, min(cap * w / wsum, g if g is not None else math.inf),
                                rel_tol=1e-9)


@given(st.integers(2, 8), st.floats(1 * GB, 64 * GB), st.booleans())
def test_equal_weights_uncapped_get_equal_share(n, cap, wf):
    grant = allocate_bandwidth([(i, 1.0, None) for i in range(n)], cap, water_filling=wf)
    vals = list(grant.shares.values())
    assert max(vals) - min(vals) <= 1e-9 * cap


@given(flows, st.floats(1 * GB, 64 * GB), st.booleans(), st.data())
def test_removing_a_tenant_never_hurts_the_others(fl, cap, wf, data):
    active = [(i, w, g) for i, (w, g) in enumerate(fl)]
    drop = data.draw(st.integers(0, len(active) - 1))
    before = allocate_bandwidth(active, cap, water_filling=wf)
    after = allocate_bandwidth([a for a in active if a[0] != drop], cap, water_filling=wf)
    for i, _, _ in active:
        if i != drop:
            assert after[i] >= before[i] * (1 - 1e-9)


def _spec(s=0.0):
    return TenantSpec("T1", TenantClass.LATENCY_SENSITIVE, transfer_bytes=s)


@pytest.mark.parametrize("s, b, c, eps, expected", [
    (8 * MB, 8 * GB, 5.0, 0.0, 6.0),
    (0.0, 1.0, 5.0, 0.0, 5.0),
    (8 * MB, 2 * GB, 5.0, 0.5, 9.5),
])
def test_transfer_latency(s, b, c, eps, expected):
    sample = transfer_latency(_spec(s), b, c, eps)
    assert sample.total_ms == pytest.approx(expected)
    assert sample.total_ms == sample.compute_ms + sample.transfer_ms + sample.noise_ms


def test_transfer_latency_zero_bandwidth_starves():
    with pytest.raises(StarvationError):
        transfer_latency(_spec(8 * MB), 0.0, 5.0)
    with pytest.raises(ValueError):
        transfer_latency(_spec(), 1.0, 5.0, noise_ms=-1)


@pytest.mark.parametrize("rho, ca, cs, es, expected", [
    (0.5, 1, 1, 1.0, 1.0),
    (0.0, 3, 2, 4.0, 0.0),
    (0.9, 2, 0, 2.0, 36.0),
])
def test_kingman(rho, ca, cs, es, expected):
    assert kingman_wait(rho, ca, cs, es) == pytest.approx(expected, rel=1e-12, abs=1e-12)


@given(st.floats(0, 0.999), st.floats(1e-3, 1e3))
def test_kingman_reduces_to_mm1(rho, es):
    assert kingman_wait(rho, 1, 1, es) == rho / (1 - rho) * es


def test_kingman_diverges():
    with pytest.raises(QueueDivergenceError):
        kingman_wait(1.0, 1, 1, 1.0)
    with pytest.raises(ValueError):
        kingman_wait(0.5, 1, 1, 0.0)


def test_stability_examples():
    assert check_stability([4 * GB] * 3, 16 * GB, 50, 100)
    v = check_stability([10 * GB, 10 * GB], 16 * GB)
    assert not v and v.reason == FABRIC_OVERSUBSCRIBED
    v = check_stability([4 * GB], 16 * GB, 120, 100)
    assert not v and v.reason == TENANT_OVERLOAD


@given(st.lists(st.floats(0, 10), max_size=6), st.floats(0.1, 40), st.floats(0, 10),
       st.floats(0.01, 10))
def test_stability_is_the_conjunction(caps, b, lam, mu):
    v = check_stability(caps, b, lam, mu)
    assert bool(v) == (sum(caps) < b and lam < mu)


def test_background_duty_rules():
    # offered below reachable rate: bursts for offered/reach of the time
    d = background_duty({"a": (4.0, 8.0)}, 16.0)
    assert d["a"] == pytest.approx(0.5)
    # others leave less room than the flow needs: always on
    d = background_duty({"a": (6.0, None), "b": (12.0, None)}, 16.0)
    assert d["a"] == 1.0 and d["b"] == 1.0
    assert background_duty({"a": (0.0, 8.0)}, 16.0)["a"] == 0.0


@given(st.dictionaries(st.integers(0, 5), st.tuples(st.floats(0, 20), st.floats(0.1, 20)),
                       max_size=5), st.floats(1, 32))
def test_background_duty_in_unit_interval(fl, cap):
    for v in background_duty(fl, cap).values():
        assert 0.0 <= v <= 1.0
