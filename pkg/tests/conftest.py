import copy
import functools
from pathlib import Path

import pytest

from limitsim import parse_scenario, parse_scenario_dict, run

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def minimal(**overrides) -> dict:
    """A small valid scenario document: one 1-core node, one deployment, Poisson load."""
    raw = {
        "schema": "limitsim/1",
        "name": "minimal",
        "seed": 1,
        "duration_s": 5,
        "control": {"sync_period_s": 1, "warmup_s": 0},
        "nodes": [{"id": "n1", "cores": 1}],
        "deployments": [{"id": "app", "pod": {"creq": 500}, "slo": {"latency_ms": 100}}],
        "workloads": [
            {"id": "load", "deployment": "app", "arrival": {"kind": "poisson", "rate": 20},
             "demand": {"kind": "constant", "us": 5000}}
        ],
    }
    raw.update(copy.deepcopy(overrides))
    return raw


def run_dict(raw: dict):
    return run(parse_scenario_dict(raw, SCENARIOS))


@functools.lru_cache(maxsize=None)
def run_ref(ref: str):
    """Run a shipped scenario (``file.scn`` or ``file.scn#variant``) once per session."""
    return run(parse_scenario(str(SCENARIOS / ref)))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS
