"""Parameter sweeps (minimum allocation meeting an SLO target) and run comparison."""

from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError
from .metrics import MetricsReport
from .scenario import ScenarioConfig, get_path, parse_scenario_dict, set_path
from .simulator import run

KNOBS = ("clim", "creq", "cputhresh", "t-cong")


class SweepInfeasible(Exception):
    """No grid point reached the SLO-attainment target."""


@dataclass
class SweepPoint:
    value: float
    creq_seconds: float
    slo_attainment: Optional[float]
    p99_ms: Optional[float]
    meets: bool


@dataclass
class SweepReport:
    knob: str
    deployment: str
    slo_target: float
    points: list[SweepPoint] = field(default_factory=list)
    best: Optional[SweepPoint] = None

    def rows(self) -> list[dict]:
        return [
            {
                "value": f"{p.value:g}", "creq_seconds": f"{p.creq_seconds:.6f}",
                "slo_attainment": "" if p.slo_attainment is None else f"{p.slo_attainment:.6f}",
                "p99_ms": "" if p.p99_ms is None else f"{p.p99_ms:.3f}",
                "meets": str(p.meets).lower(),
            }
            for p in self.points
        ]


def _knob_overrides(raw: dict, dep_id: str, knob: str, value) -> dict[str, object]:
    dep = get_path(raw, f"deployments.{dep_id}")
    pol_id = dep.get("policy")
    pol = None
    if pol_id is not None:
        pol = get_path(raw, f"policies.{pol_id}")
    kind = pol.get("kind", "none") if pol else "none"
    pod = dep.get("pod", {})
    if knob in ("clim", "creq"):
        v = int(round(value))
        if knob == "clim" and kind == "yaas":
            raise ConfigError("the clim knob does not apply to a YAAS deployment")
        out = {f"deployments.{dep_id}.pod.{knob}": v}
        # clim = creq deployments keep the two tied (the limit-equals-request setup)
        if pod.get("clim") is not None and pod.get("clim") == pod.get("creq"):
            other = "creq" if knob == "clim" else "clim"
            out[f"deployments.{dep_id}.pod.{other}"] = v
        return out
    if knob == "cputhresh":
        if kind != "hpa":
            raise ConfigError(f"cputhresh needs an HPA policy on {dep_id}")
        return {f"policies.{pol_id}.hpa.threshold": float(value)}
    if knob == "t-cong":
        if kind != "yaas":
            raise ConfigError(f"t-cong needs a YAAS policy on {dep_id}")
        return {f"policies.{pol_id}.yaas.t_cong": float(value)}
    raise ConfigError(f"unknown knob {knob!r}; choose from {KNOBS}")


def _run_point(raw: dict, base_dir: Path, dep_id: str) -> tuple[float, Optional[float], Optional[float]]:
    report = run(parse_scenario_dict(raw, base_dir))
    s = report.deployments[dep_id]
    return s.creq_seconds, s.slo_attainment, s.p99_ms


def sweep(config: ScenarioConfig, knob: str, grid: Sequence[float], slo_target: float,
          deployment: Optional[str] = None, jobs: int = 1) -> SweepReport:
    """Run every grid point with the same seed; pick the cheapest point meeting the target.

    Raises SweepInfeasible (carrying the report) if none does.
    """
    if knob not in KNOBS:
        raise ConfigError(f"unknown knob {knob!r}; choose from {KNOBS}")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid must not be empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("sweep grid must be sorted ascending")
    if not 0 < slo_target <= 1:
        raise ConfigError("slo target is an attainment fraction in (0, 1]")
    dep_id = deployment or config.deployments[0].id
    raws = []
    for v in grid:
        raw = copy.deepcopy(config.raw)
        raw["seed"] = config.seed
        for path, val in _knob_overrides(raw, dep_id, knob, v).items():
            set_path(raw, path, val)
        raws.append(raw)
    # validate every point up front so a bad grid fails before any run
    for raw in raws:
        parse_scenario_dict(raw, config.base_dir)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_point, raws, [config.base_dir] * len(raws), [dep_id] * len(raws)))
    else:
        results = [_run_point(raw, config.base_dir, dep_id) for raw in raws]

    rep = SweepReport(knob, dep_id, slo_target)
    for v, (creq_s, att, p99) in zip(grid, results):
        rep.points.append(SweepPoint(v, creq_s, att, p99, att is not None and att >= slo_target))
    feasible = [p for p in rep.points if p.meets]
    if feasible:
        rep.best = min(feasible, key=lambda p: p.creq_seconds)
    else:
        raise SweepInfeasible(rep)
    return rep


COMPARE_METRICS = ("p99_ms", "slo_attainment", "creq_seconds", "util_seconds",
                   "bill_resource", "bill_utilization", "bill_performance", "replicas_final")


def _workload_signature(cfg: ScenarioConfig):
    return (cfg.seed, cfg.raw.get("workloads"), cfg.raw.get("chains"))


def compare(a: ScenarioConfig, b: ScenarioConfig,
            reports: Optional[tuple[MetricsReport, MetricsReport]] = None) -> list[dict]:
    """Side-by-side metrics of two runs sharing workloads and seed."""
    if _workload_signature(a) != _workload_signature(b):
        raise ConfigError("compare needs identical workloads, chains and seed in both scenarios")
    ra, rb = reports or (run(a), run(b))
    rows = []
    for dep_id in sorted(set(ra.deployments) | set(rb.deployments)):
        da, db = ra.deployments.get(dep_id), rb.deployments.get(dep_id)
        for metric in COMPARE_METRICS:
            va = getattr(da, metric) if da else None
            vb = getattr(db, metric) if db else None
            rows.append({"deployment": dep_id, "metric": metric, "a": _cell(va), "b": _cell(vb),
                         "delta": _cell(vb - va) if va is not None and vb is not None else ""})
        na = len(ra.scaling_actions(dep_id))
        nb = len(rb.scaling_actions(dep_id))
        rows.append({"deployment": dep_id, "metric": "actions", "a": str(na), "b": str(nb), "delta": str(nb - na)})
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return f"{v:.6f}"
