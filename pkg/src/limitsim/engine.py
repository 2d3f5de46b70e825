"""Integer-microsecond clock, deterministic event queue and seeded random streams."""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

from .errors import ConfigError, SimulationError

US_PER_MS = 1_000
US_PER_S = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


class EventKind(enum.Enum):
    ARRIVAL = "Arrival"
    BREAKPOINT = "Breakpoint"
    CONTROL_TICK = "ControlTick"
    PERIOD_BOUNDARY = "PeriodBoundary"
    END = "End"


@dataclass(order=True)
class EventRecord:
    due: int
    seq: int
    kind: EventKind = field(compare=False)
    target: Any = field(default=None, compare=False)
    handler: Optional[Callable[["EventRecord"], None]] = field(default=None, compare=False, repr=False)


class ContinuousModel(Protocol):
    """State that evolves between events (the fluid CPU model)."""

    def next_breakpoint(self) -> Optional[int]: ...

    def on_breakpoint(self, now: int) -> None: ...


class Engine:
    """Discrete-event loop interleaved with a continuous model's breakpoints.

    Events with equal ``due`` fire in ``seq`` order.  A model breakpoint that
    falls at the same instant as an event is handled first, so handlers always
    see state that is current at their due time.
    """

    def __init__(self, model: Optional[ContinuousModel] = None):
        self.now = 0
        self.model = model
        self.processed = 0
        self._pending: list[EventRecord] = []
        self._seq = itertools.count()

    @property
    def pending(self) -> int:
        return len(self._pending)

    def make_event(self, due: int, kind: EventKind, target=None, handler=None) -> EventRecord:
        return EventRecord(due, next(self._seq), kind, target, handler)

    def at(self, due: int, kind: EventKind, target=None, handler=None) -> EventRecord:
        ev = self.make_event(due, kind, target, handler)
        self.schedule(ev)
        return ev

    def schedule(self, event: EventRecord) -> None:
        if event.due < self.now:
            raise SimulationError(
                f"event {event.kind.value} scheduled at {event.due} us, clock already at {self.now} us"
            )
        heapq.heappush(self._pending, event)

    def run_until(self, end: int) -> None:
        if end < self.now:
            raise SimulationError(f"cannot run backwards to {end} from {self.now}")
        pending = self._pending
        model = self.model
        while True:
            t_ev = pending[0].due if pending else None
            t_bp = model.next_breakpoint() if model is not None else None
            if t_bp is not None and t_bp <= end and (t_ev is None or t_bp <= t_ev):
                if t_bp < self.now:
                    raise SimulationError(f"breakpoint {t_bp} behind clock {self.now}")
                self.now = t_bp
                model.on_breakpoint(t_bp)
                continue
            if t_ev is None or t_ev > end:
                break
            ev = heapq.heappop(pending)
            if ev.due < self.now:
                raise SimulationError(f"clock went backwards: {ev.due} < {self.now}")
            self.now = ev.due
            self.processed += 1
            if ev.handler is not None:
                ev.handler(ev)
        self.now = end


class RngStream:
    """One deterministic random stream per (seed, stream id).

    Streams are keyed by name, so adding a workload never shifts the draws
    of an existing one.
    """

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = seed
        self.stream = stream
        # str seeds hash through sha512: stable across runs and platforms
        self._rng = random.Random(f"limitsim:{seed}:{stream}")

    def random(self) -> float:
        return self._rng.random()

    def randrange(self, n: int) -> int:
        return self._rng.randrange(n)


def sample_exponential(stream: RngStream, rate: float) -> int:
    """Inverse-CDF exponential gap for ``rate`` events/s, in whole microseconds (>= 1)."""
    if not rate > 0:
        raise ConfigError(f"exponential rate must be > 0, got {rate}")
    u = stream.random()
    return max(1, round(-math.log1p(-u) / rate * US_PER_S))
