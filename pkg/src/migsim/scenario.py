"""Scenario files: a YAML document describing topology, tenants, interference
schedules, fabric options and controller configuration.

Every file must declare ``schema: scenario-v1``. Unknown keys are rejected
with the line they appear on, so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import (
    AdmissionStatus,
    ConfigError,
    ControllerConfig,
    Features,
    GpuSpec,
    HostSpec,
    PcieRootSpec,
    Placement,
    TenantClass,
    TenantSpec,
    TenantState,
    TopologySpec,
    check_slice_packing,
    profile_by_name,
)
from .workload import GB, MB, PRESETS, InterferenceSchedule

SCHEMA = "scenario-v1"


@dataclass(frozen=True)
class FabricOptions:
    water_filling: bool = False
    noise_mean_ms: float = 0.2
    # multiplier on the noise mean per unit of block-I/O utilization on T1's NUMA domain
    numa_io_sensitivity: float = 0.0
    # extra multiplier while T1's unpinned core group handles an IRQ burst
    irq_sensitivity: float = 0.0
    irq_io_threshold: float = 0.5
    interference_kappa: float = 0.5
    burst_on_mean_s: float = 0.05
    pause_mean_s: float = 18.0
    pause_sd_s: float = 6.0
    pause_min_s: float = 5.0
    pause_max_s: float = 30.0

    def __post_init__(self):
        if self.noise_mean_ms < 0 or self.interference_kappa < 0:
            raise ConfigError("fabric: noise_mean_ms and interference_kappa must be >= 0")
        if self.numa_io_sensitivity < 0 or self.irq_sensitivity < 0:
            raise ConfigError("fabric: sensitivities must be >= 0")
        if not self.burst_on_mean_s > 0:
            raise ConfigError("fabric: burst_on_mean_s must be > 0")
        if not 0 < self.pause_min_s <= self.pause_mean_s <= self.pause_max_s:
            raise ConfigError("fabric: need 0 < pause_min_s <= pause_mean_s <= pause_max_s")


@dataclass(frozen=True)
class DeferredTenant:
    """A tenant that arrives mid-run and goes through admission control."""

    spec: TenantSpec
    at_s: float
    slices: int
    mps_host: Optional[str] = None


@dataclass
class Scenario:
    name: str
    topology: TopologySpec
    tenants: list  # initial TenantState objects (copied per run)
    schedules: dict = field(default_factory=dict)  # tenant id -> InterferenceSchedule
    controller: ControllerConfig = ControllerConfig()
    fabric: FabricOptions = FabricOptions()
    horizon_s: float = 3600.0
    guard_limit: int = 100_000
    deferred: list = field(default_factory=list)
    source: Optional[str] = None

    def fresh_tenants(self) -> dict:
        return {t.id: dataclasses.replace(t) for t in self.tenants}

    def with_controller(self, **changes) -> "Scenario":
        feats = changes.pop("features", None)
        cfg = dataclasses.replace(self.controller, **changes)
        if feats is not None:
            cfg = dataclasses.replace(cfg, features=feats)
        return dataclasses.replace(self, controller=cfg)

    def with_fabric(self, **changes) -> "Scenario":
        return dataclasses.replace(self, fabric=dataclasses.replace(self.fabric, **changes))

    @property
    def latency_sensitive(self) -> list:
        ids = [t.id for t in self.tenants if t.spec.is_latency_sensitive]
        ids += [d.spec.id for d in self.deferred if d.spec.is_latency_sensitive]
        return ids


# ---------------------------------------------------------------------------
# YAML with line numbers
# ---------------------------------------------------------------------------


class _Map(dict):
    line: int = 0
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    m = _Map()
    m.line = node.start_mark.line + 1
    m.key_lines = {}
    for knode, vnode in node.value:
        key = loader.construct_object(knode, deep=True)
        if key in m:
            raise ConfigError(f"line {knode.start_mark.line + 1}: duplicate key {key!r}")
        m[key] = loader.construct_object(vnode, deep=True)
        m.key_lines[key] = knode.start_mark.line + 1
    return m


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


def _line(m, key=None) -> int:
    if isinstance(m, _Map):
        if key is not None and key in m.key_lines:
            return m.key_lines[key]
        return m.line
    return 0


def _err(m, key, msg) -> ConfigError:
    return ConfigError(f"line {_line(m, key)}: {msg}")


def _check_keys(m, allowed, where: str, required=()) -> None:
    if not isinstance(m, dict):
        raise ConfigError(f"{where}: expected a mapping")
    for k in m:
        if k not in allowed:
            raise _err(m, k, f"unknown key {k!r} in {where}")
    for k in required:
        if k not in m:
            raise _err(m, None, f"{where}: missing required key {k!r}")


def _num(m, key, default=None, where=""):
    if key not in m:
        return default
    v = m[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _err(m, key, f"{where}{key} must be a number, got {v!r}")
    return float(v)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

_ROOT_KEYS = {"schema", "name", "horizon_s", "guard_limit", "topology", "fabric", "tenants",
              "controller"}
_HOST_KEYS = {"id", "numa_domains", "host_io_capacity_MBps", "irq_hot_cores", "pcie_roots",
              "gpus"}
_PCIE_KEYS = {"id", "capacity_GBps", "numa"}
_GPU_KEYS = {"id", "root", "numa"}
# scenario key -> (TenantSpec field, scale)
_TENANT_FIELDS = {
    "arrival_rate": ("arrival_rate", 1.0),
    "arrival_cv": ("arrival_cv", 1.0),
    "transfer_MB": ("transfer_bytes", MB),
    "base_compute_ms": ("base_compute_ms", 1.0),
    "service_cv": ("service_cv", 1.0),
    "slo_tail_ms": ("slo_tail_ms", 1.0),
    "weight": ("weight", 1.0),
    "pcie_demand_GBps": ("pcie_demand_Bps", GB),
    "pcie_duty": ("pcie_duty", 1.0),
    "host_io_MBps": ("host_io_MBps", 1.0),
    "sm_pressure": ("sm_pressure", 1.0),
}
_TENANT_KEYS = {"id", "preset", "class", "transfer_mix_MB", "placement", "mps_host",
                "admit_at_s", "profile", "schedule"} | set(_TENANT_FIELDS)
_PLACEMENT_KEYS = {"host", "gpu", "start", "profile"}
_SCHEDULE_KEYS = {"period_s", "duty", "offset_s", "phases", "always"}
_FABRIC_KEYS = {f.name for f in dataclasses.fields(FabricOptions)}
_CONTROLLER_KEYS = ({f.name for f in dataclasses.fields(ControllerConfig)} - {"features"}) \
    | {"features"}


def _topology(doc) -> TopologySpec:
    _check_keys(doc, {"hosts"}, "topology", required=("hosts",))
    hosts = []
    for h in doc["hosts"]:
        _check_keys(h, _HOST_KEYS, "host", required=("id", "pcie_roots", "gpus"))
        roots = []
        for r in h["pcie_roots"]:
            _check_keys(r, _PCIE_KEYS, "pcie_roots", required=("id", "capacity_GBps"))
            roots.append(PcieRootSpec(int(r["id"]), _num(r, "capacity_GBps") * GB,
                                      int(r.get("numa", 0))))
        root_numa = {r.id: r.numa_id for r in roots}
        gpus = []
        for g in h["gpus"]:
            _check_keys(g, _GPU_KEYS, "gpus", required=("id", "root"))
            rid = int(g["root"])
            gpus.append(GpuSpec(int(g["id"]), rid, int(g.get("numa", root_numa.get(rid, 0)))))
        try:
            hosts.append(HostSpec(
                id=str(h["id"]), gpus=tuple(gpus), pcie_roots=tuple(roots),
                numa_domains=int(h.get("numa_domains", 1)),
                irq_hot_cores=frozenset(int(c) for c in h.get("irq_hot_cores", [])),
                host_io_capacity_MBps=_num(h, "host_io_capacity_MBps", 4000.0)))
        except ConfigError as e:
            raise _err(h, None, str(e)) from None
    return TopologySpec(tuple(hosts))


def _schedule(m) -> InterferenceSchedule:
    if m in ("always", True):
        return InterferenceSchedule()
    if m in ("never", False):
        return InterferenceSchedule.never()
    _check_keys(m, _SCHEDULE_KEYS, "schedule")
    try:
        if "phases" in m:
            return InterferenceSchedule.explicit(m["phases"])
        if "period_s" in m:
            return InterferenceSchedule.square(_num(m, "period_s"), _num(m, "duty"),
                                               _num(m, "offset_s", 0.0))
        return InterferenceSchedule(always=bool(m.get("always", True)))
    except (ConfigError, TypeError, ValueError) as e:
        raise _err(m, None, str(e)) from None


def _tenant_spec(m) -> TenantSpec:
    fields: dict[str, Any] = {}
    if "preset" in m:
        name = m["preset"]
        if name not in PRESETS:
            raise _err(m, "preset", f"unknown preset {name!r}")
        fields.update(PRESETS[name])
    if "class" in m:
        try:
            fields["tenant_class"] = TenantClass(m["class"])
        except ValueError:
            raise _err(m, "class", f"unknown tenant class {m['class']!r}") from None
    if "tenant_class" not in fields:
        raise _err(m, None, f"tenant {m.get('id')!r} needs a preset or a class")
    for key, (attr, scale) in _TENANT_FIELDS.items():
        v = _num(m, key, where=f"tenant {m.get('id')}: ")
        if v is not None:
            fields[attr] = v * scale
    if "transfer_mix_MB" in m:
        try:
            fields["transfer_mix"] = tuple((float(p), float(s) * MB)
                                           for p, s in m["transfer_mix_MB"])
        except (TypeError, ValueError):
            raise _err(m, "transfer_mix_MB", "transfer_mix_MB must be [[p, MB], ...]") from None
    try:
        return TenantSpec(id=str(m["id"]), **fields)
    except ConfigError as e:
        raise _err(m, None, str(e)) from None


def _controller(m, default_tau) -> ControllerConfig:
    if m is None:
        m = {}
    _check_keys(m, _CONTROLLER_KEYS, "controller")
    kw: dict[str, Any] = {}
    for f in dataclasses.fields(ControllerConfig):
        if f.name == "features" or f.name not in m:
            continue
        v = m[f.name]
        if f.name == "penalty_weights":
            kw[f.name] = tuple(float(x) for x in v)
        elif f.name == "enabled":
            kw[f.name] = bool(v)
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            kw[f.name] = int(v)
        else:
            kw[f.name] = float(v)
    if "features" in m:
        feats = m["features"]
        _check_keys(feats, {"mig", "placement", "guardrails"}, "controller.features")
        kw["features"] = Features(**{k: bool(v) for k, v in feats.items()})
    if "tail_threshold_ms" not in kw and default_tau is not None:
        kw["tail_threshold_ms"] = default_tau
    try:
        return ControllerConfig(**kw)
    except ConfigError as e:
        raise _err(m, None, f"controller: {e}") from None


def parse_scenario(text: str, source: Optional[str] = None) -> Scenario:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a mapping")
    _check_keys(doc, _ROOT_KEYS, "scenario", required=("schema", "topology", "tenants"))
    if doc["schema"] != SCHEMA:
        raise _err(doc, "schema", f"unsupported schema {doc['schema']!r}, expected {SCHEMA!r}")
    topo = _topology(doc["topology"])

    fab = doc.get("fabric") or {}
    _check_keys(fab, _FABRIC_KEYS, "fabric")
    try:
        fabric = FabricOptions(**{k: (bool(v) if k == "water_filling" else float(v))
                                  for k, v in fab.items()})
    except ConfigError as e:
        raise _err(fab, None, str(e)) from None

    tenants: list[TenantState] = []
    deferred: list[DeferredTenant] = []
    schedules = {}
    seen = set()
    for m in doc["tenants"]:
        _check_keys(m, _TENANT_KEYS, "tenant", required=("id",))
        spec = _tenant_spec(m)
        if spec.id in seen:
            raise _err(m, "id", f"duplicate tenant id {spec.id!r}")
        seen.add(spec.id)
        if "schedule" in m:
            schedules[spec.id] = _schedule(m["schedule"])
        mps_host = m.get("mps_host")
        if "admit_at_s" in m:
            prof = profile_by_name(str(m.get("profile", "1g")))
            deferred.append(DeferredTenant(spec, _num(m, "admit_at_s"), prof.slices,
                                           None if mps_host is None else str(mps_host)))
            continue
        if mps_host is not None:
            tenants.append(TenantState(spec, mps_host=str(mps_host)))
            continue
        if "placement" not in m:
            raise _err(m, None, f"tenant {spec.id}: needs placement, mps_host or admit_at_s")
        p = m["placement"]
        _check_keys(p, _PLACEMENT_KEYS, "placement", required=("gpu", "profile"))
        try:
            prof = profile_by_name(str(p["profile"]))
            host = str(p.get("host", topo.hosts[0].id))
            topo.host(host).gpu(int(p["gpu"]))
        except ConfigError as e:
            raise _err(p, None, str(e)) from None
        tenants.append(TenantState(spec, Placement(host, int(p["gpu"]), int(p.get("start", 0)),
                                                   prof.slices)))

    by_id = {t.id: t for t in tenants}
    for t in tenants:
        if t.mps_host is not None:
            host_t = by_id.get(t.mps_host)
            if host_t is None or host_t.placement is None:
                raise ConfigError(f"tenant {t.id}: mps_host {t.mps_host!r} has no placement")
            t.placement = host_t.placement
    check_slice_packing(tenants)
    for t in tenants:
        if t.status is not AdmissionStatus.ADMITTED:
            continue
        if t.placement.end > topo.host(t.placement.host).gpu(t.placement.gpu).total_slices:
            raise ConfigError(f"tenant {t.id}: slice range exceeds the GPU")

    taus = [t.spec.slo_tail_ms for t in tenants if t.spec.is_latency_sensitive]
    taus += [d.spec.slo_tail_ms for d in deferred if d.spec.is_latency_sensitive]
    controller = _controller(doc.get("controller"), min(taus) if taus else None)
    horizon = _num(doc, "horizon_s", 3600.0)
    if not horizon > 0:
        raise _err(doc, "horizon_s", "horizon_s must be > 0")
    return Scenario(
        name=str(doc.get("name", "scenario")), topology=topo, tenants=tenants,
        schedules=schedules, controller=controller, fabric=fabric, horizon_s=horizon,
        guard_limit=int(doc.get("guard_limit", 100_000)), deferred=deferred, source=source)


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a shipped scenario by bare name (``default``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and p.parent == Path("."):
        shipped = resources.files("migsim") / "scenarios" / f"{p.name}.yaml"
        if shipped.is_file():
            return parse_scenario(shipped.read_text(), source=f"{p.name}.yaml")
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from None
    return parse_scenario(text, source=str(p))


def shipped_scenarios() -> list[str]:
    d = resources.files("migsim") / "scenarios"
    return sorted(f.name[:-5] for f in d.iterdir() if f.name.endswith(".yaml"))
