"""Open-loop request generation: arrival processes, service demands, service chains."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .engine import US_PER_S, RngStream, sample_exponential
from .errors import ConfigError

ARRIVAL_KINDS = ("poisson", "deterministic", "trace", "step")
DEMAND_KINDS = ("constant", "exponential", "empirical")


def load_trace(path: str | Path) -> list[int]:
    """One microsecond timestamp per line; blank lines and ``#`` comments ignored."""
    times = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            times.append(int(line))
    return times


@dataclass
class ArrivalProcess:
    kind: str
    stream: RngStream = field(repr=False)
    rate: float = 0.0  # poisson, events/s
    interval_us: int = 0  # deterministic
    times: Sequence[int] = ()  # trace
    segments: Sequence[tuple[int, float]] = ()  # step: (start us, rate/s)
    batch: int = 1  # requests per arrival instant
    stop_us: Optional[int] = None
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        problems = []
        if self.kind not in ARRIVAL_KINDS:
            problems.append(f"unknown arrival kind {self.kind!r}")
        elif self.kind == "poisson" and not self.rate > 0:
            problems.append("poisson rate must be > 0")
        elif self.kind == "deterministic" and not (isinstance(self.interval_us, int) and self.interval_us > 0):
            problems.append("deterministic interval_us must be a positive integer")
        elif self.kind == "trace":
            if any(b <= a for a, b in zip(self.times, self.times[1:])):
                problems.append("trace times must be strictly increasing")
            if any(t < 0 for t in self.times):
                problems.append("trace times must be >= 0")
        elif self.kind == "step":
            if not self.segments:
                problems.append("step process needs at least one segment")
            starts = [s for s, _ in self.segments]
            if starts and starts[0] != 0:
                problems.append("step segments must start at t=0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                problems.append("step segment starts must be strictly increasing")
            if any(r < 0 for _, r in self.segments):
                problems.append("step rates must be >= 0")
        if not isinstance(self.batch, int) or self.batch < 1:
            problems.append("batch must be an integer >= 1")
        if problems:
            raise ConfigError(problems)
        self._starts = [s for s, _ in self.segments]

    def rate_at(self, t: int) -> float:
        if self.kind == "poisson":
            return self.rate
        if self.kind == "deterministic":
            return US_PER_S / self.interval_us
        if self.kind == "step":
            i = bisect.bisect_right(self._starts, t) - 1
            return self.segments[max(i, 0)][1]
        return 0.0

    def next_arrival(self, now: int) -> Optional[int]:
        """Next arrival instant after ``now``; ``None`` once the process has ended.

        Trace entries are returned in order even if equal to ``now`` (the
        first entry may sit at t=0).  A Step gap that would cross a segment
        boundary is redrawn from the boundary at the new rate.
        """
        t = self._next(now)
        if t is not None and self.stop_us is not None and t > self.stop_us:
            return None
        return t

    def _next(self, now: int) -> Optional[int]:
        if self.kind == "poisson":
            return now + sample_exponential(self.stream, self.rate)
        if self.kind == "deterministic":
            return now + self.interval_us
        if self.kind == "trace":
            while self._cursor < len(self.times) and self.times[self._cursor] < now:
                self._cursor += 1
            if self._cursor >= len(self.times):
                return None
            t = self.times[self._cursor]
            self._cursor += 1
            return t
        # step: piecewise-constant Poisson
        t = now
        while True:
            i = max(bisect.bisect_right(self._starts, t) - 1, 0)
            rate = self.segments[i][1]
            seg_end = self._starts[i + 1] if i + 1 < len(self._starts) else None
            if rate > 0:
                cand = t + sample_exponential(self.stream, rate)
                if seg_end is None or cand < seg_end:
                    return cand
            if seg_end is None:
                return None
            t = seg_end

    def step_times(self) -> list[int]:
        """Instants where the offered rate changes (excluding t=0)."""
        if self.kind != "step":
            return []
        return [s for s, _ in self.segments[1:]]


@dataclass
class ServiceDemand:
    kind: str
    stream: RngStream = field(repr=False)
    value_us: int = 0
    mean_us: float = 0.0
    values: Sequence[int] = ()

    def __post_init__(self):
        problems = []
        if self.kind not in DEMAND_KINDS:
            problems.append(f"unknown demand kind {self.kind!r}")
        elif self.kind == "constant" and not (isinstance(self.value_us, int) and self.value_us > 0):
            problems.append("constant demand must be a positive integer number of us")
        elif self.kind == "exponential" and not self.mean_us > 0:
            problems.append("exponential mean_us must be > 0")
        elif self.kind == "empirical" and (not self.values or any(v <= 0 for v in self.values)):
            problems.append("empirical demand needs a non-empty list of positive values")
        if problems:
            raise ConfigError(problems)

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return float(self.value_us)
        if self.kind == "exponential":
            return float(self.mean_us)
        return sum(self.values) / len(self.values)

    def sample(self) -> int:
        if self.kind == "constant":
            return self.value_us
        if self.kind == "exponential":
            u = self.stream.random()
            return max(1, round(-math.log1p(-u) * self.mean_us))
        return self.values[self.stream.randrange(len(self.values))]


@dataclass
class ServiceChain:
    id: str
    stages: list[str]
    demands: list[ServiceDemand]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError(f"chain {self.id}: needs at least one stage")
        if len(self.demands) != len(self.stages):
            raise ConfigError(f"chain {self.id}: one demand per stage required")


@dataclass
class RouteTag:
    """Routing state a request carries through a chain."""

    workload: str
    chain: Optional[ServiceChain]
    stage: int
    origin: int  # arrival at the first stage
    deployment: str


class Router:
    """Round-robin dispatch of requests to replicas, stage by stage.

    ``deployments`` maps id -> :class:`~limitsim.cluster.DeploymentState`;
    ``enqueue(pod_id, request, now)`` hands a request to a pod.
    """

    def __init__(self, deployments, enqueue):
        self.deployments = deployments
        self.enqueue = enqueue

    def dispatch(self, request, now: int) -> str:
        dep = self.deployments[request.tag.deployment]
        pod_id = dep.next_replica()
        self.enqueue(pod_id, request, now)
        return pod_id

    def forward(self, request, now: int, new_request) -> Optional[object]:
        """After a stage completes, build and dispatch the next-stage request.

        Returns the new request, or ``None`` when the chain is finished.
        """
        tag = request.tag
        chain = tag.chain
        if chain is None or tag.stage + 1 >= len(chain.stages):
            return None
        stage = tag.stage + 1
        nxt = new_request(
            arrival=now,
            demand=chain.demands[stage].sample(),
            tag=RouteTag(tag.workload, chain, stage, tag.origin, chain.stages[stage]),
        )
        self.dispatch(nxt, now)
        return nxt
