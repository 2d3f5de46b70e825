"""Bills under resource-, utilization- and performance-based schemes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import ConfigError


class Scheme(enum.Enum):
    RESOURCE = "resource"
    UTILIZATION = "utilization"
    PERFORMANCE = "performance"


def inverse_rate(n_target: float) -> float:
    """Default performance multiplier: a node kept at N costs 1/N per creq."""
    return 1.0 / n_target


def flat_rate(n_target: float) -> float:
    return 1.0


def table_rate(points: Sequence[tuple[float, float]]) -> Callable[[float], float]:
    """Piecewise-linear multiplier through ``(N, multiplier)`` points, clamped at the ends."""
    pts = sorted((float(n), float(m)) for n, m in points)

    def fn(n_target: float) -> float:
        if n_target <= pts[0][0]:
            return pts[0][1]
        for (n0, m0), (n1, m1) in zip(pts, pts[1:]):
            if n_target <= n1:
                return m0 + (m1 - m0) * (n_target - n0) / (n1 - n0)
        return pts[-1][1]

    return fn


@dataclass
class RateCard:
    base_rate: float = 1.0  # currency per core-hour
    perf_rate_fn: Callable[[float], float] = inverse_rate

    def __post_init__(self):
        problems = []
        if self.base_rate < 0:
            problems.append("base_rate must be >= 0")
        grid = [k / 100 for k in range(1, 101)]
        values = [self.perf_rate_fn(n) for n in grid]
        if abs(values[-1] - 1.0) > 1e-12:
            problems.append("perf_rate_fn(1.0) must equal 1")
        if any(b > a + 1e-12 for a, b in zip(values, values[1:])):
            problems.append("perf_rate_fn must be non-increasing in N")
        if any(v < 1.0 - 1e-12 for v in values):
            problems.append("perf_rate_fn must be >= 1 on (0, 1]")
        if problems:
            raise ConfigError(problems)


@dataclass
class Snapshot:
    creq_m: float  # total creq over the interval
    util_m: float  # average utilization over the interval
    n_target: Optional[float] = None  # t_cong of the deployment's YAAS policy


@dataclass
class BillRecord:
    deployment: str
    scheme: Scheme
    accrued: float = 0.0
    creq_seconds: float = 0.0  # millicore-seconds
    util_seconds: float = 0.0


def accrue(record: BillRecord, interval_s: float, snap: Snapshot, card: RateCard) -> None:
    if not interval_s > 0:
        raise ConfigError("billing interval must be > 0")
    record.creq_seconds += snap.creq_m * interval_s
    record.util_seconds += snap.util_m * interval_s
    core_hours = interval_s / 3600.0 / 1000.0
    if record.scheme is Scheme.RESOURCE:
        record.accrued += snap.creq_m * core_hours * card.base_rate
    elif record.scheme is Scheme.UTILIZATION:
        record.accrued += snap.util_m * core_hours * card.base_rate
    else:
        if snap.n_target is None:
            raise ConfigError(f"performance billing for {record.deployment} needs a YAAS policy")
        record.accrued += snap.creq_m * core_hours * card.base_rate * card.perf_rate_fn(snap.n_target)


@dataclass
class Ledger:
    """All bill records of a run, keyed by (deployment, scheme)."""

    card: RateCard
    records: dict[tuple[str, Scheme], BillRecord] = field(default_factory=dict)

    def bind(self, deployment: str, scheme: Scheme) -> BillRecord:
        key = (deployment, scheme)
        if key not in self.records:
            self.records[key] = BillRecord(deployment, scheme)
        return self.records[key]

    def accrue(self, deployment: str, interval_s: float, snap: Snapshot) -> None:
        for (dep, _), rec in self.records.items():
            if dep == deployment:
                accrue(rec, interval_s, snap, self.card)

    def get(self, deployment: str, scheme: Scheme) -> Optional[BillRecord]:
        return self.records.get((deployment, scheme))


def exploit_gap(consumed_cost: float, resource_bill: float, performance_bill: Optional[float] = None) -> dict:
    """How far actual CPU (priced at the base rate) outruns what each scheme bills.

    ``consumed_cost`` is the utilization-scheme bill.  A resource ratio above
    1 means pods burst beyond what they pay for.
    """
    out = {
        "consumed_cost": consumed_cost,
        "resource_bill": resource_bill,
        "resource_ratio": consumed_cost / resource_bill if resource_bill > 0 else float("inf"),
        "under_billed": consumed_cost > resource_bill,
        "performance_bill": performance_bill,
        "performance_ratio": None,
    }
    if performance_bill is not None:
        out["performance_ratio"] = consumed_cost / performance_bill if performance_bill > 0 else float("inf")
    return out
