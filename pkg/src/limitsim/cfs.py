"""Fluid proportional-share CPU model with CFS quota/period throttling.

Each node runs a water-filling allocation over the shares weights (creq) of
its runnable pods.  A pod's cap is ``min(parallelism, queued requests)``
cores, so a single-threaded pod never takes more than one core.  Inside a
pod, the first ``min(queue, parallelism)`` requests are served together at
equal speed and the rest wait FIFO.

CPU amounts and the node's internal clock are exact rationals: a node
moves from one fluid breakpoint (a completion or a quota exhaustion) to the
next at the exact instant it occurs, so the schedule is the fluid one.  Only
observable instants are rounded, up to the next whole microsecond: request
completion stamps and the times the event loop is asked to wake the node.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Optional, Sequence

from .errors import ConfigError, SimulationError

DEFAULT_PERIOD_US = 100_000


@dataclass(frozen=True)
class PodSpec:
    creq: int  # millicores, shares weight
    clim: Optional[int] = None  # millicores, quota; None = unlimited
    parallelism: int = 1
    deployment: str = ""

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.creq, int) or self.creq < 1:
            out.append(f"creq must be an integer >= 1 m, got {self.creq!r}")
        if self.clim is not None:
            if not isinstance(self.clim, int):
                out.append(f"clim must be an integer number of millicores, got {self.clim!r}")
            elif isinstance(self.creq, int) and self.clim < self.creq:
                out.append(f"clim ({self.clim} m) must be >= creq ({self.creq} m)")
        if not isinstance(self.parallelism, int) or self.parallelism < 1:
            out.append(f"parallelism must be an integer >= 1, got {self.parallelism!r}")
        return out

    def quota_us(self, period_us: int = DEFAULT_PERIOD_US) -> Optional[int]:
        if self.clim is None:
            return None
        return self.clim * period_us // 1000

    def with_creq(self, creq: int) -> "PodSpec":
        return replace(self, creq=creq)


@dataclass(eq=False)
class Request:
    id: int
    arrival: int
    demand: int
    remaining: Any = -1  # us of work left; a Fraction mid-service
    service_start: Optional[int] = None
    completion: Optional[int] = None
    tag: Any = field(default=None, repr=False)

    def __post_init__(self):
        if self.demand <= 0:
            raise ConfigError(f"request demand must be > 0 us, got {self.demand}")
        if self.remaining < 0:
            self.remaining = self.demand

    @property
    def latency(self) -> Optional[int]:
        if self.completion is None:
            return None
        return self.completion - self.arrival

    @property
    def execution_time(self) -> Optional[int]:
        if self.completion is None or self.service_start is None:
            return None
        return self.completion - self.service_start


class PodRuntime:
    """Mutable per-pod scheduler state: FIFO queue and quota accounting."""

    def __init__(self, pod_id: str, spec: PodSpec, period_us: int = DEFAULT_PERIOD_US):
        self.id = pod_id
        self.queue: deque[Request] = deque()
        self.consumed = 0  # CPU us in the current period (int or Fraction)
        self.throttled = False
        self.cumulative = 0  # CPU us since creation
        self.throttle_events = 0
        self.paused_until = 0
        self.set_spec(spec, period_us)

    def set_spec(self, spec: PodSpec, period_us: int = DEFAULT_PERIOD_US) -> None:
        self.spec = spec
        self.quota = spec.quota_us(period_us)

    @property
    def active_count(self) -> int:
        return min(len(self.queue), self.spec.parallelism)

    @property
    def exhausted(self) -> bool:
        return self.quota is not None and self.consumed >= self.quota

    def runnable(self, now: int) -> bool:
        return bool(self.queue) and not self.throttled and self.paused_until <= now

    def __repr__(self):
        return f"PodRuntime({self.id}, creq={self.spec.creq}, clim={self.spec.clim}, q={len(self.queue)})"


def allocate_rates(runnable: Sequence[tuple[int, Any]], cores: int) -> list[Fraction]:
    """Water-fill ``cores`` over ``(weight, cap)`` pairs.

    Free cores are split in proportion to weight among pods not yet at their
    cap; any pod whose proportional share reaches its cap is frozen there and
    the excess goes round again.
    """
    n = len(runnable)
    rates = [Fraction(0)] * n
    if n == 0:
        return rates
    caps = [Fraction(c) for _, c in runnable]
    if sum(caps) <= cores:
        return caps
    free = Fraction(cores)
    open_ = list(range(n))
    while open_ and free > 0:
        total = sum(runnable[i][0] for i in open_)
        capped = [i for i in open_ if caps[i] * total <= runnable[i][0] * free]
        if not capped:
            for i in open_:
                rates[i] = free * runnable[i][0] / total
            break
        for i in capped:
            rates[i] = caps[i]
            free -= caps[i]
        frozen = set(capped)
        open_ = [i for i in open_ if i not in frozen]
    return rates


def _ceil(t) -> int:
    """Smallest whole microsecond at or after ``t``."""
    return -(-t.numerator // t.denominator) if isinstance(t, Fraction) else t


def next_breakpoint(
    pods: Sequence[PodRuntime],
    rates: Sequence[Fraction],
    now,
    period_end: Optional[int] = None,
    next_arrival: Optional[int] = None,
    exact: bool = False,
):
    """Earliest instant at which the runnable set or some rate must change.

    Candidates: period end, next arrival, each pod's quota exhaustion and each
    pod's first in-service completion.  With ``exact`` the fluid instant is
    returned as a Fraction; otherwise it is rounded up to a whole microsecond.
    The result is always strictly after ``now``.
    """
    best = None
    for t in (period_end, next_arrival):
        if t is not None and t > now and (best is None or t < best):
            best = t
    for pod, rate in zip(pods, rates):
        if rate <= 0 or not pod.queue:
            continue
        k = pod.active_count
        dt = min(pod.queue[j].remaining for j in range(k)) * k / rate
        if pod.quota is not None:
            dt = min(dt, (pod.quota - pod.consumed) / rate)
        if dt <= 0:
            raise SimulationError(f"{pod.id} is runnable with nothing left to serve")
        t = now + dt
        if best is None or t < best:
            best = t
    if best is None or exact:
        return best
    return max(_ceil(best), _ceil(now) + (1 if _ceil(now) == now else 0))


def _serve(pod: PodRuntime, budget, stamp: int, done: list) -> None:
    """Split ``budget`` us equally among the pod's in-service requests.

    Requests whose work reaches zero complete at ``stamp``.
    """
    queue = pod.queue
    k = min(len(queue), pod.spec.parallelism)
    share = Fraction(budget) / k if k > 1 else budget
    finished = False
    for j in range(k):
        req = queue[j]
        req.remaining -= share
        if req.remaining < 0:
            raise SimulationError(f"negative remaining work on {pod.id}")
        if req.remaining == 0:
            finished = True
    if finished:
        head = [queue.popleft() for _ in range(k)]
        keep = []
        for req in head:
            if req.remaining == 0:
                req.remaining = 0
                req.completion = stamp
                done.append((pod, req))
            else:
                keep.append(req)
        queue.extendleft(reversed(keep))
        for j in range(min(len(queue), pod.spec.parallelism)):
            if queue[j].service_start is None:
                queue[j].service_start = stamp
    pod.consumed += budget
    pod.cumulative += budget
    if pod.quota is not None and pod.consumed > pod.quota:
        raise SimulationError(f"{pod.id} exceeded its quota")


def _norm(x):
    """Collapse a whole-valued Fraction to int so integer paths stay fast."""
    if isinstance(x, Fraction) and x.denominator == 1:
        return x.numerator
    return x


def advance(pods: Sequence[PodRuntime], rates: Sequence[Fraction], now, dt) -> tuple[list, Fraction]:
    """Serve ``pods`` at constant ``rates`` for ``dt`` us ending at ``now``.

    Amounts are exact.  Completions are stamped at ``now`` rounded up to a
    whole microsecond.  Returns the completed ``(pod, request)`` pairs and the
    CPU us handed out.
    """
    if dt <= 0 or not pods:
        return [], 0
    stamp = _ceil(now)
    done: list = []
    served = 0
    for pod, rate in zip(pods, rates):
        budget = _norm(rate * dt)
        if budget <= 0:
            continue
        _serve(pod, budget, stamp, done)
        for j in range(min(len(pod.queue), pod.spec.parallelism)):
            pod.queue[j].remaining = _norm(pod.queue[j].remaining)
        pod.consumed = _norm(pod.consumed)
        pod.cumulative = _norm(pod.cumulative)
        served += budget
        if pod.queue and pod.exhausted and not pod.throttled:
            pod.throttled = True
            pod.throttle_events += 1
    return done, _norm(served)


class CpuScheduler:
    """One node's CPU: shares, quota and period bookkeeping for its pods.

    Advanced lazily with :meth:`sync`.  Internally the node moves between
    exact fluid breakpoints (rational instants); externally it is only ever
    synced to whole microseconds, and :attr:`breakpoint` is the next fluid
    breakpoint rounded up.  Every mutator requires the scheduler to be synced
    to ``now`` first so that rates only change at known instants.
    """

    def __init__(self, cores: int, period_us: int = DEFAULT_PERIOD_US, record_periods: bool = False):
        if cores < 1:
            raise ConfigError(f"a node needs >= 1 core, got {cores}")
        self.cores = cores
        self.period_us = period_us
        self.pods: dict[str, PodRuntime] = {}
        self.last = 0
        self.busy = 0
        self.period_log: Optional[list[tuple[int, str, Any]]] = [] if record_periods else None
        self._t = 0  # exact internal time, >= last only between a fluid breakpoint and the next sync
        self._runnable: list[PodRuntime] = []
        self._rates: list[Fraction] = []
        self._bp = None  # exact

    @property
    def breakpoint(self) -> Optional[int]:
        if self._bp is None:
            return None
        return _ceil(self._bp)

    @property
    def rates(self) -> dict[str, Fraction]:
        return {p.id: r for p, r in zip(self._runnable, self._rates)}

    def _require(self, now: int) -> None:
        if now != self.last or self._t != now:
            raise SimulationError(f"scheduler mutated at {now} but synced to {self.last}")

    def _step(self, t) -> list:
        done: list = []
        if t > self._t and self._runnable:
            done, served = advance(self._runnable, self._rates, t, t - self._t)
            self.busy = _norm(self.busy + served)
        self._t = t
        return done

    def sync(self, t: int) -> list[tuple[PodRuntime, Request]]:
        """Advance to ``t``; returns requests completed on the way."""
        if t < self.last:
            raise SimulationError(f"sync to {t} behind {self.last}")
        if self._bp is not None and t > _ceil(self._bp):
            raise SimulationError(f"sync to {t} skips breakpoint {self._bp}")
        done: list = []
        while self._bp is not None and self._bp <= t:
            bp = self._bp
            done.extend(self._step(bp))
            self._refresh(bp)
            if self._bp is not None and self._bp <= bp:
                raise SimulationError(f"breakpoint stalled at {bp}")
        # between fluid breakpoints rates are constant, so no refresh is needed
        done.extend(self._step(t))
        self.last = t
        return done

    def _refresh(self, now) -> None:
        runnable = [p for p in self.pods.values() if p.runnable(now)]
        rates = allocate_rates([(p.spec.creq, p.active_count) for p in runnable], self.cores)
        self._runnable = runnable
        self._rates = rates
        bp = next_breakpoint(runnable, rates, now, exact=True)
        for p in self.pods.values():
            if p.paused_until > now and p.queue and (bp is None or p.paused_until < bp):
                bp = p.paused_until
        self._bp = bp

    def add_pod(self, pod: PodRuntime, now: int) -> None:
        self._require(now)
        if pod.id in self.pods:
            raise SimulationError(f"pod {pod.id} already on node")
        self.pods[pod.id] = pod
        if pod.queue and pod.exhausted and not pod.throttled:
            pod.throttled = True
            pod.throttle_events += 1
        self._refresh(now)

    def remove_pod(self, pod_id: str, now: int) -> PodRuntime:
        self._require(now)
        pod = self.pods.pop(pod_id)
        self._refresh(now)
        return pod

    def set_spec(self, pod_id: str, spec: PodSpec, now: int) -> None:
        self._require(now)
        pod = self.pods[pod_id]
        pod.set_spec(spec, self.period_us)
        if pod.queue and pod.exhausted and not pod.throttled:
            pod.throttled = True
            pod.throttle_events += 1
        elif pod.throttled and not pod.exhausted:
            pod.throttled = False
        self._refresh(now)

    def enqueue(self, pod_id: str, request: Request, now: int) -> None:
        self._require(now)
        pod = self.pods[pod_id]
        pod.queue.append(request)
        changed = False
        if len(pod.queue) <= pod.spec.parallelism:
            request.service_start = now
            changed = True
        if pod.exhausted and not pod.throttled:
            pod.throttled = True
            pod.throttle_events += 1
            changed = True
        if changed:
            self._refresh(now)

    def on_period_boundary(self, now: int) -> None:
        """Reset every pod's period quota; throttled pods with work rejoin."""
        self._require(now)
        if self.period_log is not None:
            start = now - self.period_us
            for p in self.pods.values():
                self.period_log.append((start, p.id, p.consumed))
        changed = False
        for p in self.pods.values():
            if p.consumed or p.throttled:
                # a quota reset moves the pod's exhaustion breakpoint even if it wasn't throttled
                changed = changed or p.throttled or (p.quota is not None and bool(p.queue))
                p.consumed = 0
                p.throttled = False
        if changed:
            self._refresh(now)

    def outstanding(self) -> int:
        return sum(len(p.queue) for p in self.pods.values())
