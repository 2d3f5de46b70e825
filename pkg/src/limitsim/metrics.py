"""Latency recording, nearest-rank percentiles, run report and its CSV/JSON export."""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

SUMMARY_COLUMNS = (
    "deployment", "replicas_final", "p50_ms", "p95_ms", "p99_ms", "slo_ms", "slo_attainment",
    "throughput_rps", "throttle_events", "creq_seconds", "util_seconds",
    "bill_resource", "bill_utilization", "bill_performance",
)
TIMESERIES_COLUMNS = ("t_s", "deployment", "replicas", "total_creq_m", "util_m", "p99_ms_window", "node_id", "node_util")
ACTION_COLUMNS = ("t_s", "deployment", "action", "reason")

UNMET = "unmet"


def percentile(samples: Sequence[int], p: float) -> Optional[int]:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    if not samples:
        return None
    ordered = sorted(samples)
    rank = math.ceil(p / 100 * len(ordered))
    return ordered[max(rank, 1) - 1]


class LatencyRecorder:
    """Per-key latencies in completion order."""

    def __init__(self, warmup_us: int = 0):
        self.warmup_us = warmup_us
        self._done: dict[str, list[int]] = {}
        self._lat: dict[str, list[int]] = {}
        self._arr: dict[str, list[int]] = {}

    def record(self, key: str, arrival: int, completion: int) -> None:
        self._done.setdefault(key, []).append(completion)
        self._lat.setdefault(key, []).append(completion - arrival)
        self._arr.setdefault(key, []).append(arrival)

    def keys(self) -> list[str]:
        return sorted(self._lat)

    def window(self, key: str, start: int, end: int) -> list[int]:
        """Latencies of requests completed in ``(start, end]``."""
        done = self._done.get(key)
        if not done:
            return []
        lo = bisect.bisect_right(done, start)
        hi = bisect.bisect_right(done, end)
        return self._lat[key][lo:hi]

    def post_warmup(self, key: str) -> list[int]:
        return [lat for arr, lat in zip(self._arr.get(key, ()), self._lat.get(key, ())) if arr >= self.warmup_us]

    def count(self, key: str) -> int:
        return len(self._lat.get(key, ()))


@dataclass
class DeploymentSummary:
    deployment: str
    replicas_final: int
    p50_ms: Optional[float]
    p95_ms: Optional[float]
    p99_ms: Optional[float]
    slo_ms: float
    slo_attainment: Optional[float]
    throughput_rps: float
    throttle_events: int
    creq_seconds: float
    util_seconds: float
    bill_resource: Optional[float]
    bill_utilization: Optional[float]
    bill_performance: Optional[float]
    mean_ms: Optional[float] = None
    completed: int = 0
    slo_percentile: float = 99.0


@dataclass
class MetricsReport:
    scenario: str = ""
    seed: int = 0
    duration_s: float = 0.0
    warmup_s: float = 0.0
    sync_period_s: float = 0.0
    deployments: dict[str, DeploymentSummary] = field(default_factory=dict)
    chains: dict[str, dict] = field(default_factory=dict)
    timeseries: list[dict] = field(default_factory=list)
    actions: list[dict] = field(default_factory=list)
    windows: dict[str, list] = field(default_factory=dict)  # dep -> [t_end_s, pctl_ms|None, compliant]
    time_to_meet: dict[str, list] = field(default_factory=dict)
    period_log: list[dict] = field(default_factory=list)
    requests: list[dict] = field(default_factory=list)
    allocations: list[dict] = field(default_factory=list)
    accounting: dict = field(default_factory=dict)
    exploit: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        data = dict(data)
        data["deployments"] = {k: DeploymentSummary(**v) for k, v in data.get("deployments", {}).items()}
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def summary_rows(self) -> list[dict]:
        rows = []
        for dep_id in sorted(self.deployments):
            d = self.deployments[dep_id]
            rows.append({
                "deployment": d.deployment,
                "replicas_final": str(d.replicas_final),
                "p50_ms": _fmt(d.p50_ms, 3),
                "p95_ms": _fmt(d.p95_ms, 3),
                "p99_ms": _fmt(d.p99_ms, 3),
                "slo_ms": _fmt(d.slo_ms, 3),
                "slo_attainment": _fmt(d.slo_attainment, 6),
                "throughput_rps": _fmt(d.throughput_rps, 6),
                "throttle_events": str(d.throttle_events),
                "creq_seconds": _fmt(d.creq_seconds, 6),
                "util_seconds": _fmt(d.util_seconds, 6),
                "bill_resource": _fmt(d.bill_resource, 9),
                "bill_utilization": _fmt(d.bill_utilization, 9),
                "bill_performance": _fmt(d.bill_performance, 9),
            })
        return rows

    def timeseries_rows(self) -> list[dict]:
        out = []
        for r in self.timeseries:
            out.append({
                "t_s": _fmt(r["t_s"], 3),
                "deployment": r.get("deployment") or "",
                "replicas": "" if r.get("replicas") is None else str(r["replicas"]),
                "total_creq_m": "" if r.get("total_creq_m") is None else str(r["total_creq_m"]),
                "util_m": _fmt(r.get("util_m"), 3),
                "p99_ms_window": _fmt(r.get("p99_ms_window"), 3),
                "node_id": r.get("node_id") or "",
                "node_util": _fmt(r.get("node_util"), 6),
            })
        return out

    def action_rows(self) -> list[dict]:
        return [
            {"t_s": _fmt(a["t_s"], 3), "deployment": a["deployment"], "action": a["action"], "reason": a["reason"]}
            for a in self.actions
        ]

    def scaling_actions(self, deployment: Optional[str] = None, applied_only: bool = True) -> list[dict]:
        return [
            a for a in self.actions
            if (deployment is None or a["deployment"] == deployment) and (a["applied"] or not applied_only)
        ]


def _fmt(value, digits: int) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return f"{value:.{digits}f}"


def window_compliance(report: MetricsReport, deployment: str) -> list[tuple[float, Optional[float], bool]]:
    return [tuple(w) for w in report.windows.get(deployment, [])]


def time_to_meet_slo(report: MetricsReport, step_s: float, deployment: Optional[str] = None) -> Union[float, str]:
    """Seconds after ``step_s`` until the windowed percentile is back under SLO
    for at least two consecutive windows; ``"unmet"`` if that never happens.
    """
    if deployment is None:
        deployment = sorted(report.deployments)[0]
    sync = report.sync_period_s
    wins = [w for w in report.windows.get(deployment, []) if w[0] - sync >= step_s - 1e-9]
    for i in range(len(wins) - 1):
        if wins[i][2] and wins[i + 1][2]:
            if i == 0:
                return 0.0
            return round(wins[i][0] - sync - step_s, 6)
    return UNMET


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def read_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export(report: MetricsReport, fmt: str, path: Union[str, Path]) -> list[Path]:
    """Write the report under directory ``path``.

    ``csv`` writes summary.csv, timeseries.csv and actions.log (plus
    periods.csv / requests.csv when those traces were recorded); ``json``
    writes the whole report as report.json.  Raises OSError when the
    directory cannot be written.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "csv":
        files = {
            "summary.csv": _csv_text(SUMMARY_COLUMNS, report.summary_rows()),
            "timeseries.csv": _csv_text(TIMESERIES_COLUMNS, report.timeseries_rows()),
            "actions.log": _csv_text(ACTION_COLUMNS, report.action_rows()),
        }
        if report.period_log:
            files["periods.csv"] = _csv_text(("node", "period_start_us", "pod", "consumed_us"), report.period_log)
        if report.requests:
            cols = ("id", "deployment", "workload", "arrival_us", "service_start_us", "completion_us")
            files["requests.csv"] = _csv_text(cols, report.requests)
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
    elif fmt == "json":
        target = out / "report.json"
        target.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(target)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return written


def load_json(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
