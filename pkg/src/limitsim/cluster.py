"""Nodes, request-sum gate-keeping, placement, migration and utilization windows."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .cfs import DEFAULT_PERIOD_US, CpuScheduler, PodRuntime, PodSpec
from .errors import ConfigError, NoFit, SimulationError

STRATEGIES = ("FirstFit", "LeastAllocated", "LeastUtilized")


@dataclass(frozen=True)
class NodeSpec:
    id: str
    cores: int

    @property
    def capacity(self) -> int:
        return self.cores * 1000


class NodeState:
    def __init__(self, spec: NodeSpec, period_us: int = DEFAULT_PERIOD_US, record_periods: bool = False):
        if spec.cores < 1:
            raise ConfigError(f"node {spec.id}: cores must be >= 1")
        self.spec = spec
        self.cpu = CpuScheduler(spec.cores, period_us, record_periods)
        self.allocated = 0
        # (time, cumulative busy us) samples for windowed utilization
        self._sample_t: list[int] = [0]
        self._sample_busy: list[int] = [0]

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def capacity(self) -> int:
        return self.spec.capacity

    @property
    def placed(self) -> set[str]:
        return set(self.cpu.pods)

    @property
    def spare(self) -> int:
        return self.capacity - self.allocated

    def sample(self, now: int) -> None:
        if now == self._sample_t[-1]:
            self._sample_busy[-1] = self.cpu.busy
        else:
            self._sample_t.append(now)
            self._sample_busy.append(self.cpu.busy)

    def busy_at_or_before(self, t: int) -> tuple[int, int]:
        i = bisect.bisect_right(self._sample_t, t) - 1
        i = max(i, 0)
        return self._sample_t[i], self._sample_busy[i]

    def __repr__(self):
        return f"NodeState({self.id}, {self.allocated}/{self.capacity} m, pods={sorted(self.cpu.pods)})"


def admit_pod(node: NodeState, spec: PodSpec) -> bool:
    """Reserve ``spec.creq`` on ``node`` iff the request sum stays within capacity."""
    if node.allocated + spec.creq <= node.capacity:
        node.allocated += spec.creq
        return True
    return False


def node_utilization(node: NodeState, window: int, now: Optional[int] = None) -> float:
    """Busy CPU over the trailing ``window`` us divided by core capacity.

    Uses the latest sample at or before ``now - window``; if the history is
    shorter, the span actually covered.  The node must be synced to ``now``.
    """
    if window <= 0:
        raise ConfigError("utilization window must be > 0")
    if now is None:
        now = node.cpu.last
    t0, b0 = node.busy_at_or_before(now - window)
    span = now - t0
    if span <= 0:
        return 0.0
    return float((node.cpu.busy - b0) / (node.spec.cores * span))


@dataclass
class SLO:
    latency_ms: float
    percentile: float = 99.0


@dataclass
class DeploymentState:
    id: str
    template: PodSpec
    slo: SLO
    policy: Optional[object] = None
    replicas: list[str] = field(default_factory=list)
    # latest windowed observations, refreshed at each control tick
    util_m: float = 0.0
    latency_ms: Optional[float] = None
    cpu_retired: int = 0
    last_action_tick: Optional[int] = None
    _rr: int = 0
    _next_index: int = 0

    @property
    def total_creq(self) -> int:
        return self.template.creq * len(self.replicas)

    @property
    def overage(self) -> float:
        return self.util_m - self.total_creq

    def new_pod_id(self) -> str:
        pid = f"{self.id}-{self._next_index}"
        self._next_index += 1
        return pid

    def next_replica(self) -> str:
        if not self.replicas:
            raise SimulationError(f"deployment {self.id} has no replicas")
        pid = self.replicas[self._rr % len(self.replicas)]
        self._rr += 1
        return pid


class Cluster:
    """Orchestrator state.  Every mutation syncs the touched node first.

    ``touch(node, now)`` brings a node's scheduler to ``now``; the simulator
    supplies one that also routes completed requests.  The default keeps
    completions in :attr:`completed`.
    """

    def __init__(
        self,
        nodes: list[NodeSpec],
        period_us: int = DEFAULT_PERIOD_US,
        strategy: str = "LeastAllocated",
        util_window: int = 15_000_000,
        record_periods: bool = False,
        touch: Optional[Callable[[NodeState, int], None]] = None,
    ):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown placement strategy {strategy!r}")
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate node ids")
        self.period_us = period_us
        self.strategy = strategy
        self.util_window = util_window
        self.nodes: dict[str, NodeState] = {
            n.id: NodeState(n, period_us, record_periods) for n in sorted(nodes, key=lambda n: n.id)
        }
        self.pods: dict[str, PodRuntime] = {}
        self.pod_node: dict[str, str] = {}
        self.completed: list = []
        self.node_util: dict[str, float] = {nid: 0.0 for nid in self.nodes}
        self._touch = touch

    def touch(self, node: NodeState, now: int) -> None:
        if self._touch is not None:
            self._touch(node, now)
        else:
            self.completed.extend(node.cpu.sync(now))

    def candidates(self, strategy: Optional[str] = None) -> list[NodeState]:
        strategy = strategy or self.strategy
        nodes = list(self.nodes.values())
        if strategy == "FirstFit":
            return nodes
        if strategy == "LeastAllocated":
            return sorted(nodes, key=lambda n: (Fraction(n.allocated, n.capacity), n.id))
        if strategy == "LeastUtilized":
            return sorted(nodes, key=lambda n: (self.node_util.get(n.id, 0.0), n.id))
        raise ConfigError(f"unknown placement strategy {strategy!r}")

    def place_pod(
        self, pod: PodRuntime, now: int, strategy: Optional[str] = None, node_id: Optional[str] = None
    ) -> str:
        """Put ``pod`` on the first node, in strategy order, that admits it."""
        order = [self.nodes[node_id]] if node_id is not None else self.candidates(strategy)
        for node in order:
            if admit_pod(node, pod.spec):
                self.touch(node, now)
                node.cpu.add_pod(pod, now)
                self.pods[pod.id] = pod
                self.pod_node[pod.id] = node.id
                return node.id
        raise NoFit(f"no node admits {pod.id} ({pod.spec.creq} m)")

    def remove_pod(self, pod_id: str, now: int) -> PodRuntime:
        node = self.nodes[self.pod_node[pod_id]]
        self.touch(node, now)
        pod = node.cpu.remove_pod(pod_id, now)
        node.allocated -= pod.spec.creq
        del self.pods[pod_id]
        del self.pod_node[pod_id]
        return pod

    def migrate_pod(self, pod_id: str, dest: str, now: int, downtime: int = 0) -> None:
        """Move a pod with its queue and in-flight work; aborts if ``dest`` is full."""
        src = self.nodes[self.pod_node[pod_id]]
        dst = self.nodes[dest]
        if src is dst:
            raise NoFit(f"{pod_id} already on {dest}")
        pod = self.pods[pod_id]
        if not admit_pod(dst, pod.spec):
            raise NoFit(f"{dest} cannot admit {pod_id} ({pod.spec.creq} m)")
        self.touch(src, now)
        self.touch(dst, now)
        src.cpu.remove_pod(pod_id, now)
        src.allocated -= pod.spec.creq
        if downtime > 0:
            pod.paused_until = now + downtime
        dst.cpu.add_pod(pod, now)
        self.pod_node[pod_id] = dest

    def resize_pod(self, pod_id: str, creq: int, now: int) -> bool:
        node = self.nodes[self.pod_node[pod_id]]
        pod = self.pods[pod_id]
        delta = creq - pod.spec.creq
        if node.allocated + delta > node.capacity:
            return False
        self.touch(node, now)
        node.allocated += delta
        node.cpu.set_spec(pod_id, pod.spec.with_creq(creq), now)
        return True

    def node_of(self, pod_id: str) -> NodeState:
        return self.nodes[self.pod_node[pod_id]]

    def node_utilization(self, node_id: str, window: Optional[int] = None, now: Optional[int] = None) -> float:
        return node_utilization(self.nodes[node_id], window or self.util_window, now)

    def gatekeeping_violations(self) -> list[str]:
        out = []
        for node in self.nodes.values():
            placed = sum(p.spec.creq for p in node.cpu.pods.values())
            if placed != node.allocated:
                out.append(f"{node.id}: allocated {node.allocated} != placed {placed}")
            if placed > node.capacity:
                out.append(f"{node.id}: placed {placed} m > capacity {node.capacity} m")
        return out
