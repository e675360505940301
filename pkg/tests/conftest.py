from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record the verdict of one acceptance criterion for the end-of-run summary."""
    results = request.config.stash[_ACCEPTANCE]

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        results[number] = (title, bool(ok), detail)
        print(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
