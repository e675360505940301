from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from migsim.controller import (
    ActionKind,
    Diagnosis,
    GuardrailRejected,
    HostController,
    Observation,
    Outcome,
    RawCounters,
    SignalMonitor,
    TenantSignals,
    apply_guardrail,
    diagnose,
    free_ranges,
    placement_score,
    select_relax,
    select_upgrade,
    validate_or_rollback,
)
from migsim.model import (
    A100_LATTICE,
    AdmissionStatus,
    ControllerConfig,
    Features,
    GpuSpec,
    HostSpec,
    PcieRootSpec,
    Placement,
    TenantClass,
    TenantSpec,
    TenantState,
    effective_service_rate,
    profile_by_name,
)
from migsim.telemetry import TailWindow

GB = 1e9
CFG = ControllerConfig()


def make_host():
    # roots 0 and 1 on NUMA 0, root 2 on NUMA 1; two GPUs on root 0
    return HostSpec(
        "h0",
        (GpuSpec(0, 0, 0), GpuSpec(1, 0, 0), GpuSpec(2, 1, 0), GpuSpec(3, 2, 1)),
        (PcieRootSpec(0, 16 * GB, 0), PcieRootSpec(1, 16 * GB, 0), PcieRootSpec(2, 16 * GB, 1)),
        numa_domains=2, irq_hot_cores=frozenset({0}))


def t1_spec(rate=40.0):
    return TenantSpec("T1", TenantClass.LATENCY_SENSITIVE, arrival_rate=rate,
                      base_compute_ms=1.0, transfer_bytes=1e6, slo_tail_ms=15.0)


def bg(tid, cls=TenantClass.BANDWIDTH_HEAVY, g=14 * GB, **kw):
    return TenantSpec(tid, cls, pcie_demand_Bps=g, **kw)


def state(spec, gpu, start, slices, **kw):
    return TenantState(spec, Placement("h0", gpu, start, slices), **kw)


def raw(t=0.0, heavy=None, io=None, coloc=None, irq=()):
    heavy = heavy or {}
    return RawCounters(t, dict(heavy), dict(heavy), io or {}, {}, coloc or {}, frozenset(irq))


def monitor_with(host, ticks=5, **kw):
    m = SignalMonitor(host, CFG)
    for i in range(ticks):
        m.update(raw(float(i), **kw))
    return m


# -- diagnosis ---------------------------------------------------------------


@pytest.mark.parametrize("sig, expected", [
    (TenantSignals(0.9, 0.1, 0.3), Diagnosis.IO_PRESSURE),
    (TenantSignals(0.2, 0.1, 0.95), Diagnosis.COMPUTE_CONTENTION),
    (TenantSignals(0.0, 0.0, 0.0), Diagnosis.NONE),
    (TenantSignals(0.1, 0.85, 0.0), Diagnosis.IO_PRESSURE),
    (TenantSignals(None, 0.9, 0.9), Diagnosis.NONE),
])
def test_diagnose(sig, expected):
    assert diagnose(sig, CFG) is expected


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_diagnose_rule(p, io, sm):
    d = diagnose(TenantSignals(p, io, sm), CFG)
    if p > 0.8 or io > 0.8:
        assert d is Diagnosis.IO_PRESSURE
    elif sm > 0.7:
        assert d is Diagnosis.COMPUTE_CONTENTION
    else:
        assert d is Diagnosis.NONE


# -- placement ---------------------------------------------------------------


def test_idle_cluster_scores_zero():
    host = make_host()
    for gpu in (0, 2, 3):
        assert placement_score(Placement("h0", gpu, 0, 1), host, None, CFG).total == 0
        assert placement_score(Placement("h0", gpu, 0, 1), host, monitor_with(host),
                               CFG).total == 0


def test_saturated_root_scores_worse():
    host = make_host()
    m = monitor_with(host, heavy={0: 15 * GB})
    s0 = placement_score(Placement("h0", 0, 0, 1), host, m, CFG)
    s1 = placement_score(Placement("h0", 2, 0, 1), host, m, CFG)
    assert s1.total < s0.total
    assert s0.pcie_penalty == pytest.approx(15 / 16)


def test_penalties_cover_numa_and_irq():
    host = make_host()
    m = monitor_with(host, io={0: 2000.0}, irq=(0,))
    s = placement_score(Placement("h0", 2, 0, 1), host, m, CFG)
    assert s.numa_io_penalty == pytest.approx(0.5)
    assert s.irq_penalty == 1.0
    assert placement_score(Placement("h0", 3, 0, 1), host, m, CFG).total == 0
    assert not placement_score(Placement("h0", 3, 0, 1), host, m, CFG, feasible=False).feasible


def test_free_ranges():
    host = make_host()
    ts = [state(t1_spec(), 0, 0, 1), state(bg("B"), 0, 3, 4)]
    on0 = free_ranges(host, ts, 2, gpu_id=0)
    assert [p.start for p in on0] == [1]
    assert [p.start for p in free_ranges(host, ts, 1, gpu_id=0)] == [1, 2]
    assert [p.start for p in free_ranges(host, ts, 1, gpu_id=0, ignore="T1")] == [0, 1, 2]


def test_move_to_clean_root():
    host = make_host()
    t1 = state(t1_spec(), 0, 0, 1)
    t2 = state(bg("T2"), 1, 0, 7)
    fill3 = state(bg("F", TenantClass.COMPUTE_HEAVY, None), 3, 0, 7)
    m = monitor_with(host, heavy={0: 15 * GB})
    cfg = ControllerConfig(features=Features(mig=False))
    d = select_upgrade(t1, [t1, t2, fill3], host, m, cfg)
    assert d.kind is ActionKind.MOVE
    assert d.placement == Placement("h0", 2, 0, 1)  # lowest slot id among equals


def test_move_with_mig_sizes_the_new_instance():
    host = make_host()
    t1 = state(t1_spec(), 0, 0, 1)
    others = [state(bg("T2"), 1, 0, 7), state(bg("F", TenantClass.COMPUTE_HEAVY, None), 3, 0, 7)]
    m = monitor_with(host, heavy={0: 15 * GB})
    d = select_upgrade(t1, [t1] + others, host, m, CFG)
    assert d.kind is ActionKind.MOVE
    assert (d.placement.gpu, d.placement.slices) == (2, 7)


def test_equal_pressure_upgrades_to_max_gain_profile():
    host = make_host()
    t1 = state(t1_spec(), 0, 0, 1)
    # slices 1..6 of GPU 0 are free; every other GPU is full
    others = [state(bg(f"F{g}", TenantClass.COMPUTE_HEAVY, None), g, 0, 7) for g in (1, 2, 3)]
    d = select_upgrade(t1, [t1] + others, host, monitor_with(host), CFG)
    assert d.kind is ActionKind.MIG_UP
    # oracle: enumerate profiles that fit on GPU 0 once T1's own slice is reused
    feasible = [p for p in A100_LATTICE if p.slices > 1 and p.slices <= 7]
    best = max(feasible, key=lambda p: effective_service_rate(p, t1.spec))
    assert d.placement.slices == best.slices


def test_upgrade_respects_neighbours():
    host = make_host()
    t1 = state(t1_spec(), 0, 0, 1)
    others = [state(bg("N", TenantClass.COMPUTE_HEAVY, None), 0, 3, 4)]
    others += [state(bg(f"F{g}", TenantClass.COMPUTE_HEAVY, None), g, 0, 7) for g in (1, 2, 3)]
    d = select_upgrade(t1, [t1] + others, host, monitor_with(host), CFG)
    assert d.kind is ActionKind.MIG_UP and d.placement == Placement("h0", 0, 0, 3)


def test_top_of_lattice_exhausted():
    host = make_host()
    t1 = state(t1_spec(), 0, 0, 7)
    others = [state(bg(f"F{g}", TenantClass.COMPUTE_HEAVY, None), g, 0, 7) for g in (1, 2, 3)]
    d = select_upgrade(t1, [t1] + others, host, monitor_with(host), CFG)
    assert d.kind is ActionKind.EXHAUSTED


def test_relax_examples():
    host = make_host()
    t1 = state(t1_spec(), 2, 0, 2)
    d = select_relax(t1, [t1], host, monitor_with(host), CFG)
    assert d.kind is ActionKind.MIG_DOWN and d.placement.slices == 1
    hot = monitor_with(host, heavy={1: 15 * GB})
    assert select_relax(t1, [t1], host, hot, CFG) is None
    bottom = state(t1_spec(), 2, 0, 1)
    assert select_relax(bottom, [bottom], host, monitor_with(host), CFG) is None


# -- guardrails and validation ----------------------------------------------


def test_guardrail_bounds():
    t2 = state(bg("T2"), 1, 0, 7)
    pre = apply_guardrail(t2, ActionKind.THROTTLE_IO, 100)
    assert pre["io_throttle_MBps"] is None and t2.io_throttle_MBps == 100
    with pytest.raises(GuardrailRejected):
        apply_guardrail(t2, ActionKind.THROTTLE_IO, 50)
    assert t2.io_throttle_MBps == 100
    n = state(bg("N"), 1, 0, 7)
    apply_guardrail(n, ActionKind.MPS_QUOTA, 50)
    assert n.mps_quota_pct == 50
    with pytest.raises(GuardrailRejected):
        apply_guardrail(n, ActionKind.MPS_QUOTA, 101)


def window_of(values):
    w = TailWindow(len(values))
    w.extend(values)
    return w


@pytest.mark.parametrize("pre, post, expected", [
    (20.0, 16.0, Outcome.KEPT),
    (16.0, 18.0, Outcome.ROLLED_BACK),
    (16.0, 16.0, Outcome.KEPT),
    (16.0, 16.8, Outcome.KEPT),
])
def test_validate_or_rollback(pre, post, expected):
    assert validate_or_rollback(pre, window_of([post] * 100), CFG) is expected


def test_relax_validation_uses_floor():
    assert validate_or_rollback(3.0, window_of([10.0] * 50), CFG, floor_ms=12.0) is Outcome.KEPT
    assert validate_or_rollback(3.0, window_of([13.0] * 50), CFG,
                                floor_ms=12.0) is Outcome.ROLLED_BACK


# -- observation loop ----------------------------------------------------------


def loop(features=Features(placement=False), coloc=0.95, cfg_kw=None):
    host = make_host()
    cfg = ControllerConfig(features=features, **(cfg_kw or {}))
    tenants = {"T1": state(t1_spec(), 0, 0, 1)}
    for g in (1, 2, 3):
        tenants[f"F{g}"] = state(bg(f"F{g}", TenantClass.COMPUTE_HEAVY, None), g, 0, 7)
    ctl = HostController(host, cfg, tenants)
    ctl.track(tenants["T1"])

    def step(i, p99):
        obs = Observation("T1", float(i), np.full(40, p99), 40)
        return ctl.tick(raw(float(i), coloc={"T1": coloc}), {"T1": obs})
    return ctl, step


def test_two_breaching_windows_do_nothing():
    ctl, step = loop()
    assert step(1, 16.0) == [] and step(2, 16.0) == []
    assert ctl.ctl["T1"].consecutive_breach == 2


def test_three_breaching_windows_upgrade():
    ctl, step = loop()
    out = [a for i in range(1, 4) for a in step(i, 16.0)]
    assert [a.action for a in out] == [ActionKind.MIG_UP]
    rec = out[0]
    assert rec.outcome is Outcome.PENDING and rec.reason.startswith("compute_contention")
    assert rec.signals["p99_ms"] == 16.0
    assert ctl.tenants["T1"].cpu_affinity_pinned


def test_cooldown_blocks_action():
    ctl, step = loop()
    ctl.ctl["T1"].cooldown_remaining = 10
    assert [a for i in range(1, 6) for a in step(i, 16.0)] == []


def test_dwell_blocks_action():
    ctl, step = loop(cfg_kw={"dwell_obs": 20})
    ctl.ctl["T1"].since_change = 0
    acts = [(i, a) for i in range(1, 40) for a in step(i, 16.0)]
    assert [i for i, _ in acts] == [20]


def test_disabled_controller_is_silent():
    ctl, step = loop(features=Features(False, False, False))
    assert [a for i in range(1, 10) for a in step(i, 99.0)] == []


def test_exhausted_record_when_nothing_helps():
    ctl, step = loop(features=Features(mig=False, placement=False, guardrails=True))
    out = [a for i in range(1, 4) for a in step(i, 16.0)]
    assert [a.action for a in out] == [ActionKind.EXHAUSTED]
    assert out[0].outcome is Outcome.EXHAUSTED


def test_validation_rolls_back_regression():
    ctl, step = loop(cfg_kw={"validation_obs": 4})
    for i in range(1, 4):
        step(i, 16.0)
    assert ctl.tenants["T1"].placement.slices > 1
    ctl.on_resume("T1")
    out = [a for i in range(4, 9) for a in step(i, 30.0)]
    assert [a.action for a in out] == [ActionKind.ROLLBACK]
    assert out[0].reverts == 0
    assert ctl.records[0].outcome is Outcome.ROLLED_BACK
    assert ctl.tenants["T1"].placement == Placement("h0", 0, 0, 1)


def test_validation_keeps_improvement():
    ctl, step = loop(cfg_kw={"validation_obs": 4})
    for i in range(1, 4):
        step(i, 16.0)
    ctl.on_resume("T1")
    assert [a for i in range(4, 9) for a in step(i, 5.0)] == []
    assert ctl.records[0].outcome is Outcome.KEPT


def test_guardrail_throttles_offender_first():
    host = make_host()
    tenants = {"T1": state(t1_spec(), 0, 0, 1),
               "T2": state(bg("T2", host_io_MBps=3000), 1, 0, 7)}
    ctl = HostController(host, CFG, tenants)
    ctl.track(tenants["T1"])
    out = []
    for i in range(1, 5):
        obs = Observation("T1", float(i), np.full(40, 16.0), 40)
        out += ctl.tick(raw(float(i), heavy={0: 15 * GB}), {"T1": obs})
    assert [a.action for a in out] == [ActionKind.THROTTLE_IO]
    rec = out[0]
    assert rec.tenant == "T2" and rec.trigger == "T1"
    assert rec.until == pytest.approx(3.0 + CFG.throttle_duration_s)
    assert tenants["T2"].io_throttle_MBps == CFG.io_throttle_MBps


def test_audit_record_is_json_line():
    ctl, step = loop()
    rec = [a for i in range(1, 4) for a in step(i, 16.0)][0]
    line = rec.to_json()
    assert "\n" not in line
    d = json.loads(line)
    assert d["action"] == "mig_up" and d["pre"]["profile"] == "1g.10gb"
    assert line == json.dumps(d, sort_keys=True, separators=(",", ":")) or \
        list(d) == sorted(d)


# -- admission -----------------------------------------------------------------


def test_admit_on_empty_host():
    host = make_host()
    ctl = HostController(host, CFG, {})
    rec = ctl.admit(t1_spec(), 1)
    assert rec.action is ActionKind.ADMIT and rec.reason == "score 0.000"
    assert ctl.tenants["T1"].placement == Placement("h0", 0, 0, 1)


def test_admission_queues_when_fabric_would_saturate():
    host = HostSpec("h0", (GpuSpec(0, 0, 0), GpuSpec(1, 0, 0)), (PcieRootSpec(0, 16 * GB),))
    tenants = {"T1": state(t1_spec(), 0, 0, 1),
               "A": state(bg("A", g=0.95 * 16 * GB - 40e6), 1, 0, 3)}
    ctl = HostController(host, CFG, tenants)
    ctl.track(tenants["T1"])
    rec = ctl.admit(bg("B", g=1 * GB), 2)
    assert rec.action is ActionKind.QUEUE
    assert ctl.tenants["B"].status is AdmissionStatus.QUEUED
    # a tenant with no PCIe demand fits
    assert ctl.admit(bg("C", TenantClass.COMPUTE_HEAVY, None), 2).action is ActionKind.ADMIT
    # the queue times out after the configured number of epochs
    ctl.now = CFG.queue_timeout_epochs * CFG.window_epoch_s
    out = ctl.retry_queue()
    assert [a.action for a in out] == [ActionKind.REJECT]
    assert ctl.tenants["B"].status is AdmissionStatus.REJECTED


def test_queued_tenant_admitted_when_room_appears():
    host = HostSpec("h0", (GpuSpec(0, 0, 0),), (PcieRootSpec(0, 16 * GB),))
    tenants = {"F": state(bg("F", TenantClass.COMPUTE_HEAVY, None), 0, 0, 7)}
    ctl = HostController(host, CFG, tenants)
    assert ctl.admit(t1_spec(), 1).action is ActionKind.QUEUE
    assert ctl.retry_queue() == []
    tenants["F"].placement = Placement("h0", 0, 0, 4)
    out = ctl.retry_queue()
    assert [a.action for a in out] == [ActionKind.ADMIT]
    assert ctl.tenants["T1"].placement.start == 4


def test_overloaded_tenant_never_admitted():
    host = make_host()
    ctl = HostController(host, CFG, {})
    heavy = TenantSpec("T1", TenantClass.LATENCY_SENSITIVE, arrival_rate=500,
                       base_compute_ms=10.0)
    assert ctl.admit(heavy, 1).action is ActionKind.QUEUE
