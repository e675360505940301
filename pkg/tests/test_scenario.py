from __future__ import annotations

import json

import pytest

from migsim.cli import main
from migsim.model import ConfigError, TenantClass
from migsim.scenario import load_scenario, parse_scenario, shipped_scenarios

MINIMAL = """\
schema: scenario-v1
topology:
  hosts:
    - id: h0
      pcie_roots:
        - {id: 0, capacity_GBps: 16}
      gpus:
        - {id: 0, root: 0}
tenants:
  - id: T1
    preset: t1-inference
    placement: {gpu: 0, profile: 1g}
"""


def test_minimal_scenario_defaults():
    sc = parse_scenario(MINIMAL)
    assert sc.horizon_s == 3600
    assert sc.controller.tail_threshold_ms == 15.0
    (t1,) = sc.tenants
    assert t1.spec.tenant_class is TenantClass.LATENCY_SENSITIVE
    assert t1.placement.slices == 1


@pytest.mark.parametrize("text, line", [
    (MINIMAL + "colour: blue\n", 13),
    (MINIMAL.replace("    preset: t1-inference\n", "    preset: t1-inference\n    rat: 3\n"), 12),
    (MINIMAL.replace("{id: 0, root: 0}", "{id: 0, root: 0, nmua: 1}"), 8),
])
def test_unknown_key_reports_line(text, line):
    with pytest.raises(ConfigError, match=rf"^line {line}: unknown key"):
        parse_scenario(text)


def test_schema_is_required():
    with pytest.raises(ConfigError, match="schema"):
        parse_scenario(MINIMAL.replace("schema: scenario-v1\n", ""))
    with pytest.raises(ConfigError, match="unsupported schema"):
        parse_scenario(MINIMAL.replace("scenario-v1", "scenario-v0"))


@pytest.mark.parametrize("bad", [
    MINIMAL.replace("profile: 1g", "profile: 5g"),
    MINIMAL.replace("gpu: 0, profile", "gpu: 9, profile"),
    MINIMAL + "horizon_s: -1\n",
    MINIMAL + "horizon_s: soon\n",
    MINIMAL.replace("    preset: t1-inference\n", "    preset: t1-inference\n    weight: 0\n"),
    MINIMAL + "  - {id: T1, preset: t2-etl, placement: {gpu: 0, start: 1, profile: 1g}}\n",
    MINIMAL + "  - {id: X, preset: t2-etl, placement: {gpu: 0, profile: 2g}}\n",
    MINIMAL + "  - {id: Y, preset: t2-etl}\n",
    "- just a list\n",
    "schema: [unclosed\n",
])
def test_invalid_scenarios_rejected(bad):
    with pytest.raises(ConfigError):
        parse_scenario(bad)


@pytest.mark.parametrize("name", shipped_scenarios())
def test_shipped_scenarios_load(name):
    sc = load_scenario(name)
    assert sc.name == name
    assert any(t.spec.is_latency_sensitive for t in sc.tenants)


def test_shipped_set():
    assert {"default", "llm-ttft", "stability-bounded",
            "stability-oversubscribed"} <= set(shipped_scenarios())


def test_mps_cotenant_shares_placement():
    sc = load_scenario("default")
    by_id = {t.id: t for t in sc.tenants}
    assert by_id["T3"].mps_host == "T1"
    assert by_id["T3"].placement == by_id["T1"].placement


def test_deferred_tenants(data_dir):
    sc = load_scenario(data_dir / "admission.yaml")
    assert [d.spec.id for d in sc.deferred] == ["A", "B", "C", "D"]
    assert [d.at_s for d in sc.deferred] == [50, 100, 150, 200]


def test_validate_cli(data_dir, capsys):
    assert main(["validate", "--scenario", str(data_dir / "pair.yaml")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"valid": True, "scenario": "pair", "tenants": 2, "deferred": 0,
                   "horizon_s": 300.0}


def test_validate_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL + "colour: blue\n")
    assert main(["validate", "--scenario", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "line 13" in err["message"]
    assert main(["validate", "--scenario", str(tmp_path / "missing.yaml")]) == 2
