"""Discrete-event simulator of multi-tenant A100 hosts sharing a PCIe fabric,
with an SLO-driven controller for MIG sizing, placement and host guardrails."""

from __future__ import annotations

from .engine import SimTrace, SimulationAborted, apply_reconfig_pause, run_scenario
from .experiments import ExperimentPlan, SummaryReport, aggregate_ci, make_plan, run_experiment
from .model import ConfigError, ControllerConfig, Features
from .scenario import Scenario, load_scenario, parse_scenario

__all__ = [
    "ConfigError", "ControllerConfig", "ExperimentPlan", "Features", "Scenario", "SimTrace",
    "SimulationAborted", "SummaryReport", "aggregate_ci", "apply_reconfig_pause",
    "load_scenario", "make_plan", "parse_scenario", "run_experiment", "run_scenario",
]

__version__ = "0.1.0"
