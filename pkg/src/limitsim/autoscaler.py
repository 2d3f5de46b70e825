"""Control policies evaluated at control ticks: threshold HPA and YAAS.

YAAS works limit-free with two knobs, a pod's overage (U - creq) and the
utilization N of the node it sits on.  It lets overage grow while the SLO
holds, zeroes it when the SLO is slightly violated (vertically, or by adding
replicas and splitting the same total creq), moves replicas off congested
nodes, and shrinks creq eagerly when utilization falls well below it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

from .cfs import PodRuntime
from .cluster import Cluster, DeploymentState
from .errors import ConfigError, NoFit, SimulationError


@dataclass
class HPAConfig:
    threshold: float = 0.7  # fraction of creq (cputhresh)
    max_replicas: int = 10
    min_replicas: int = 1
    scale_down_factor: float = 0.8
    mode: str = "step"  # or "k8s-ratio"

    def problems(self) -> list[str]:
        out = []
        if not self.threshold > 0:
            out.append("hpa.threshold must be > 0")
        if self.min_replicas < 1 or self.max_replicas < self.min_replicas:
            out.append("hpa needs 1 <= min_replicas <= max_replicas")
        if not 0 < self.scale_down_factor < 1:
            out.append("hpa.scale_down_factor must be in (0, 1)")
        if self.mode not in ("step", "k8s-ratio"):
            out.append(f"hpa.mode must be 'step' or 'k8s-ratio', got {self.mode!r}")
        return out


@dataclass
class YAASConfig:
    slo_margin: float = 0.05
    t_cong: float = 0.8
    downscale_factor: float = 0.7
    cooldown: int = 4  # control ticks
    min_creq: int = 10
    max_replicas: int = 10

    def problems(self) -> list[str]:
        out = []
        if self.slo_margin < 0:
            out.append("yaas.slo_margin must be >= 0")
        if not 0 < self.t_cong <= 1:
            out.append("yaas.t_cong must be in (0, 1]")
        if not 0 < self.downscale_factor < 1:
            out.append("yaas.downscale_factor must be in (0, 1)")
        if self.cooldown < 1:
            out.append("yaas.cooldown must be >= 1")
        if self.min_creq < 1:
            out.append("yaas.min_creq must be >= 1")
        if self.max_replicas < 1:
            out.append("yaas.max_replicas must be >= 1")
        return out


@dataclass
class PolicyConfig:
    id: str
    kind: str = "none"  # hpa | yaas | none
    sync_period_s: float = 15.0
    window_s: float = 15.0
    hpa: HPAConfig = field(default_factory=HPAConfig)
    yaas: YAASConfig = field(default_factory=YAASConfig)

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("hpa", "yaas", "none"):
            out.append(f"policy {self.id}: unknown kind {self.kind!r}")
        if not self.sync_period_s > 0:
            out.append(f"policy {self.id}: sync_period_s must be > 0")
        if not self.window_s > 0:
            out.append(f"policy {self.id}: window_s must be > 0")
        if self.kind == "hpa":
            out += [f"policy {self.id}: {p}" for p in self.hpa.problems()]
        if self.kind == "yaas":
            out += [f"policy {self.id}: {p}" for p in self.yaas.problems()]
        return out


class ActionKind(enum.Enum):
    ADD_REPLICA = "AddReplica"
    REMOVE_REPLICA = "RemoveReplica"
    SET_CREQ = "SetCreq"
    MIGRATE = "Migrate"
    NOOP = "NoOp"


@dataclass
class ScalingAction:
    kind: ActionKind
    reason: str = ""
    creq: Optional[int] = None  # SetCreq target; creq of new replicas for AddReplica
    count: int = 1
    pod: Optional[str] = None
    dest: Optional[str] = None
    slo_triggered: bool = False

    def label(self) -> str:
        k = self.kind.value
        if self.kind is ActionKind.SET_CREQ:
            return f"{k}({self.creq})"
        if self.kind is ActionKind.MIGRATE:
            return f"{k}({self.pod}->{self.dest})"
        if self.kind in (ActionKind.ADD_REPLICA, ActionKind.REMOVE_REPLICA) and self.count != 1:
            return f"{k}(x{self.count})"
        return k


def noop(reason: str = "") -> ScalingAction:
    return ScalingAction(ActionKind.NOOP, reason)


def hpa_decide(dep: DeploymentState, cfg: PolicyConfig) -> ScalingAction:
    """One HPA step on the windowed per-replica utilization.

    ``step`` mode adds or removes one replica per trigger; ``k8s-ratio`` jumps
    to ``ceil(U / (threshold * creq))`` replicas.  Scale-in happens only when
    the remaining replicas would sit at or below the hysteresis band.
    """
    h = cfg.hpa
    n = len(dep.replicas)
    target = h.threshold * dep.template.creq
    if n == 0:
        return ScalingAction(ActionKind.ADD_REPLICA, "no replicas")
    if h.mode == "k8s-ratio":
        desired = min(h.max_replicas, max(h.min_replicas, math.ceil(dep.util_m / target)))
        if desired > n:
            return ScalingAction(ActionKind.ADD_REPLICA, f"util {dep.util_m:.0f} m needs {desired}", count=desired - n)
        if desired < n and dep.util_m / desired <= target * h.scale_down_factor:
            return ScalingAction(ActionKind.REMOVE_REPLICA, f"util {dep.util_m:.0f} m fits {desired}", count=n - desired)
        return noop()
    per = dep.util_m / n
    if per >= target:
        if n >= h.max_replicas:
            return noop(f"at max_replicas {h.max_replicas}")
        return ScalingAction(ActionKind.ADD_REPLICA, f"per-replica util {per:.0f} m >= {target:.0f} m")
    if n > h.min_replicas and dep.util_m / (n - 1) <= target * h.scale_down_factor:
        return ScalingAction(ActionKind.REMOVE_REPLICA, f"util {dep.util_m:.0f} m fits {n - 1} replicas")
    return noop()


def _ceil_m(x: float) -> int:
    # tolerate float noise just above an integer
    return max(1, math.ceil(x - 1e-9))


def _split_plan(dep: DeploymentState, cluster: Cluster, total: float, max_replicas: int,
                reason: str, slo: bool) -> Optional[list[ScalingAction]]:
    """Fewest extra replicas such that ``total`` creq split equally fits the cluster."""
    n = len(dep.replicas)
    for m in range(n + 1, max_replicas + 1):
        per = _ceil_m(total / m)
        plan = [
            ScalingAction(ActionKind.SET_CREQ, reason, creq=per, slo_triggered=slo),
            ScalingAction(ActionKind.ADD_REPLICA, reason, creq=per, count=m - n, slo_triggered=slo),
        ]
        if dry_run(cluster, dep, plan) is None:
            return plan
    return None


def _migration(dep: DeploymentState, cluster: Cluster, cfg: YAASConfig,
               node_util: dict[str, float], slo: bool) -> Optional[ScalingAction]:
    """Move the replica on the most congested node to the least-utilized admitting node."""
    congested = [
        (node_util.get(cluster.pod_node[pid], 0.0), pid)
        for pid in dep.replicas
        if node_util.get(cluster.pod_node[pid], 0.0) > cfg.t_cong
    ]
    if not congested:
        return None
    congested.sort(key=lambda x: (-x[0], dep.replicas.index(x[1])))
    n_src, victim = congested[0]
    src = cluster.pod_node[victim]
    per_pod = dep.util_m / max(1, len(dep.replicas))
    creq = cluster.pods[victim].spec.creq
    dests = sorted(
        (node_util.get(nid, 0.0), nid) for nid, node in cluster.nodes.items()
        if nid != src and node.allocated + creq <= node.capacity
    )
    for n_dst, nid in dests:
        # only move if the destination stays uncongested after taking the pod
        if n_dst + per_pod / cluster.nodes[nid].capacity <= cfg.t_cong:
            return ScalingAction(ActionKind.MIGRATE, f"node {src} N={n_src:.2f} > {cfg.t_cong}",
                                 pod=victim, dest=nid, slo_triggered=slo)
    return None


def yaas_decide(dep: DeploymentState, cluster: Cluster, cfg: PolicyConfig,
                node_util: Optional[dict[str, float]] = None) -> list[ScalingAction]:
    """YAAS decision ladder; the first matching rung wins.

    On an SLO breach (windowed percentile above SLO * (1 + margin)):
      * positive overage -> raise per-replica creq to U / replicas, or, if a
        hosting node cannot take the increase, add replicas and split U;
      * overage <= 0 -> move off a congested node, else add a replica and
        split the current total creq across the larger replica set.
    Without a breach: relieve congestion, then shrink creq to U when
    U < downscale_factor * total creq, removing a replica when per-replica
    creq would fall below ``min_creq``.
    """
    y = cfg.yaas
    node_util = cluster.node_util if node_util is None else node_util
    n = len(dep.replicas)
    creq = dep.template.creq
    total = creq * n
    util = dep.util_m
    limit = dep.slo.latency_ms * (1 + y.slo_margin)
    breach = dep.latency_ms is not None and dep.latency_ms > limit

    if breach:
        why = f"p{dep.slo.percentile:g} {dep.latency_ms:.1f} ms > {limit:.1f} ms"
        if util > total:
            per = _ceil_m(util / n)
            plan = [ScalingAction(ActionKind.SET_CREQ, f"{why}; overage {util - total:+.0f} m -> 0",
                                  creq=per, slo_triggered=True)]
            if dry_run(cluster, dep, plan) is None:
                return plan
            plan = _split_plan(dep, cluster, util, y.max_replicas, f"{why}; split {util:.0f} m", True)
            return plan or [noop("capacity exhausted")]
        mig = _migration(dep, cluster, y, node_util, slo=True)
        if mig is not None:
            return [mig]
        plan = _split_plan(dep, cluster, total, y.max_replicas, f"{why}; split {total} m", True)
        return plan or [noop("capacity exhausted")]

    mig = _migration(dep, cluster, y, node_util, slo=False)
    if mig is not None:
        return [mig]
    if util < y.downscale_factor * total:
        actions = []
        m = n
        if n > 1 and util / n < y.min_creq:
            actions.append(ScalingAction(ActionKind.REMOVE_REPLICA, f"util {util:.0f} m below min creq per replica"))
            m = n - 1
        per = max(y.min_creq, _ceil_m(util / m))
        if per != creq:
            actions.append(ScalingAction(ActionKind.SET_CREQ, f"util {util:.0f} m < {y.downscale_factor:g} x {total} m",
                                         creq=per))
        return actions or [noop()]
    return [noop()]


_APPLY_ORDER = {
    ActionKind.REMOVE_REPLICA: 0,
    ActionKind.SET_CREQ: 1,
    ActionKind.MIGRATE: 2,
    ActionKind.ADD_REPLICA: 3,
    ActionKind.NOOP: 4,
}


def dry_run(cluster: Cluster, dep: DeploymentState, actions: list[ScalingAction],
            strategy: Optional[str] = None) -> Optional[str]:
    """Check gate-keeping for ``actions`` without touching state.  Returns a rejection reason or None."""
    alloc = {nid: node.allocated for nid, node in cluster.nodes.items()}
    replicas = list(dep.replicas)
    where = {pid: cluster.pod_node[pid] for pid in replicas}
    creqs = {pid: cluster.pods[pid].spec.creq for pid in replicas}
    per = dep.template.creq
    for a in sorted(actions, key=lambda a: _APPLY_ORDER[a.kind]):
        if a.kind is ActionKind.REMOVE_REPLICA:
            if len(replicas) - a.count < 1:
                return "would leave no replicas"
            for _ in range(a.count):
                pid = replicas.pop()
                alloc[where[pid]] -= creqs.pop(pid)
        elif a.kind is ActionKind.SET_CREQ:
            per = a.creq
            for pid in replicas:
                alloc[where[pid]] += a.creq - creqs[pid]
                creqs[pid] = a.creq
            for nid, used in alloc.items():
                if used > cluster.nodes[nid].capacity:
                    return f"SetCreq({a.creq}) exceeds spare on {nid}"
        elif a.kind is ActionKind.MIGRATE:
            if a.pod not in creqs:
                return f"unknown pod {a.pod}"
            if alloc[a.dest] + creqs[a.pod] > cluster.nodes[a.dest].capacity:
                return f"{a.dest} cannot admit {a.pod}"
            alloc[where[a.pod]] -= creqs[a.pod]
            alloc[a.dest] += creqs[a.pod]
            where[a.pod] = a.dest
        elif a.kind is ActionKind.ADD_REPLICA:
            size = a.creq if a.creq is not None else per
            for k in range(a.count):
                order = _ordered_nodes(cluster, alloc, strategy)
                for nid in order:
                    if alloc[nid] + size <= cluster.nodes[nid].capacity:
                        alloc[nid] += size
                        break
                else:
                    return f"no node fits a {size} m replica"
    return None


def _ordered_nodes(cluster: Cluster, alloc: dict[str, int], strategy: Optional[str]) -> list[str]:
    strategy = strategy or cluster.strategy
    ids = list(cluster.nodes)
    if strategy == "FirstFit":
        return ids
    if strategy == "LeastAllocated":
        return sorted(ids, key=lambda nid: (alloc[nid] / cluster.nodes[nid].capacity, nid))
    return sorted(ids, key=lambda nid: (cluster.node_util.get(nid, 0.0), nid))


@dataclass
class ApplyResult:
    applied: bool
    reason: Optional[str] = None
    orphans: list = field(default_factory=list)  # requests left by removed replicas


def apply_actions(cluster: Cluster, dep: DeploymentState, actions: list[ScalingAction], now: int,
                  downtime: int = 0) -> ApplyResult:
    """Apply a decision atomically: either every action lands or none does."""
    real = [a for a in actions if a.kind is not ActionKind.NOOP]
    if not real:
        return ApplyResult(False, actions[0].reason if actions else None)
    reason = dry_run(cluster, dep, real)
    if reason is not None:
        return ApplyResult(False, reason)
    orphans = []
    for a in sorted(real, key=lambda a: _APPLY_ORDER[a.kind]):
        if a.kind is ActionKind.REMOVE_REPLICA:
            for _ in range(a.count):
                pid = dep.replicas.pop()
                pod = cluster.remove_pod(pid, now)
                dep.cpu_retired += pod.cumulative
                orphans.extend(pod.queue)
                pod.queue.clear()
        elif a.kind is ActionKind.SET_CREQ:
            # shrink first so growth elsewhere never sees a transiently full node
            for pid in sorted(dep.replicas, key=lambda p: cluster.pods[p].spec.creq - a.creq, reverse=True):
                if not cluster.resize_pod(pid, a.creq, now):
                    raise SimulationError(f"resize of {pid} to {a.creq} m passed dry run but failed")
            dep.template = dep.template.with_creq(a.creq)
        elif a.kind is ActionKind.MIGRATE:
            try:
                cluster.migrate_pod(a.pod, a.dest, now, downtime)
            except NoFit as exc:  # pragma: no cover - dry run rules this out
                raise SimulationError(str(exc)) from exc
        elif a.kind is ActionKind.ADD_REPLICA:
            spec = dep.template if a.creq is None else dep.template.with_creq(a.creq)
            for _ in range(a.count):
                pod = PodRuntime(dep.new_pod_id(), spec, cluster.period_us)
                try:
                    cluster.place_pod(pod, now)
                except NoFit as exc:  # pragma: no cover - dry run rules this out
                    raise SimulationError(str(exc)) from exc
                dep.replicas.append(pod.id)
    violations = cluster.gatekeeping_violations()
    if violations:
        raise SimulationError("; ".join(violations))
    return ApplyResult(True, orphans=orphans)


def apply_action(cluster: Cluster, dep: DeploymentState, action: ScalingAction, now: int,
                 downtime: int = 0) -> ApplyResult:
    return apply_actions(cluster, dep, [action], now, downtime)


def decide(dep: DeploymentState, cluster: Cluster, cfg: PolicyConfig,
           node_util: Optional[dict[str, float]] = None) -> list[ScalingAction]:
    if cfg.kind == "hpa":
        return [hpa_decide(dep, cfg)]
    if cfg.kind == "yaas":
        return yaas_decide(dep, cluster, cfg, node_util)
    return [noop()]
