"""Run a scenario: wire workloads, the cluster and the policies onto one event loop."""

from __future__ import annotations

import bisect
import itertools
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Optional

from .autoscaler import ActionKind, apply_actions, decide
from .billing import Ledger, Scheme, Snapshot, exploit_gap
from .cfs import PodRuntime, Request
from .cluster import Cluster, DeploymentState, NodeState, node_utilization
from .engine import US_PER_MS, US_PER_S, Engine, EventKind, RngStream, to_us
from .errors import SimulationError
from .metrics import (
    DeploymentSummary, LatencyRecorder, MetricsReport, percentile, time_to_meet_slo,
)
from .scenario import ScenarioConfig, build_arrival, build_demand
from .workload import RouteTag, Router, ServiceChain


class CpuHistory:
    """Cumulative CPU samples of one deployment, for windowed utilization U."""

    def __init__(self):
        self.t = [0]
        self.cpu = [0]

    def add(self, t: int, cpu: int) -> None:
        if t == self.t[-1]:
            self.cpu[-1] = cpu
        else:
            self.t.append(t)
            self.cpu.append(cpu)

    def rate_m(self, now: int, window: int) -> float:
        """Average millicores over the trailing window (or the history covered)."""
        i = max(bisect.bisect_right(self.t, now - window) - 1, 0)
        span = now - self.t[i]
        if span <= 0:
            return 0.0
        return float((self.cpu[-1] - self.cpu[i]) * 1000 / span)


@dataclass
class _DepBook:
    """Per-deployment counters kept by the simulator."""

    history: CpuHistory = field(default_factory=CpuHistory)
    created: int = 0
    completed: int = 0
    creq_us: int = 0  # integral of total creq (m * us)
    throttles_retired: int = 0
    tick_util: float = 0.0  # millicores over the last tick interval
    last_eval: Optional[int] = None


class Simulation:
    """One run of a :class:`ScenarioConfig`.  Acts as the engine's continuous model."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        ctl = config.control
        self.period_us = ctl.period_us
        self.sync_us = to_us(ctl.sync_period_s)
        self.end = to_us(config.duration_s)
        self.warmup = to_us(ctl.warmup_s)
        self.downtime = int(round(ctl.migration_downtime_ms * US_PER_MS))
        self.engine = Engine(self)
        self.cluster = Cluster(
            config.nodes, ctl.period_us, ctl.placement, to_us(ctl.util_window_s),
            config.record_periods, touch=self._touch,
        )
        self.latency = LatencyRecorder(self.warmup)
        self.ledger = Ledger(config.billing.card)
        self.deps: dict[str, DeploymentState] = {}
        self.books: dict[str, _DepBook] = {}
        self.router = Router(self.deps, self._enqueue)
        self._req_ids = itertools.count()
        self.report = MetricsReport(
            scenario=config.name, seed=config.seed, duration_s=config.duration_s,
            warmup_s=ctl.warmup_s, sync_period_s=ctl.sync_period_s,
        )
        self._last_tick = 0
        self._tick_index = 0
        self._node_busy_at_tick = {nid: 0 for nid in self.cluster.nodes}
        self._dep_cpu_at_tick: dict[str, int] = {}
        self._step_times: dict[str, set[int]] = {}
        self._setup()

    # -- construction -------------------------------------------------------

    def _setup(self) -> None:
        cfg = self.config
        for d in cfg.deployments:
            dep = DeploymentState(d.id, d.pod, d.slo, cfg.policy(d.policy))
            self.deps[d.id] = dep
            self.books[d.id] = _DepBook()
            self._dep_cpu_at_tick[d.id] = 0
            for k in range(d.replicas):
                pod = PodRuntime(dep.new_pod_id(), d.pod, self.period_us)
                self.cluster.place_pod(pod, 0, node_id=d.nodes[k] if d.nodes else None)
                dep.replicas.append(pod.id)
            for scheme in cfg.billing.schemes.get(d.id, ()):
                self.ledger.bind(d.id, scheme)

        chains = {c.id: c for c in cfg.chains}
        self._chain_workloads = {w.id for w in cfg.workloads if w.chain is not None}
        for w in cfg.workloads:
            proc = build_arrival(w.arrival, RngStream(cfg.seed, f"arrival:{w.id}"), cfg.base_dir)
            if w.chain is not None:
                c = chains[w.chain]
                chain = ServiceChain(
                    c.id, list(c.stages),
                    [build_demand(dm, RngStream(cfg.seed, f"demand:{w.id}:{k}")) for k, dm in enumerate(c.demands)],
                )
            else:
                chain = ServiceChain(w.deployment, [w.deployment],
                                     [build_demand(w.demand, RngStream(cfg.seed, f"demand:{w.id}"))])
            if proc.kind == "step":
                for s in chain.stages[:1]:
                    self._step_times.setdefault(s, set()).update(proc.step_times())
            self._schedule_arrival(w.id, proc, chain, proc.next_arrival(0))

        if self.period_us <= self.end:
            self.engine.at(self.period_us, EventKind.PERIOD_BOUNDARY, None, self._on_period)
        if self.sync_us <= self.end:
            self.engine.at(self.sync_us, EventKind.CONTROL_TICK, None, self._on_tick)

    def _schedule_arrival(self, wid: str, proc, chain: ServiceChain, t: Optional[int]) -> None:
        if t is None or t > self.end:
            return
        self.engine.at(t, EventKind.ARRIVAL, wid, lambda ev: self._on_arrival(ev, proc, chain))

    # -- continuous model ---------------------------------------------------

    def next_breakpoint(self) -> Optional[int]:
        best = None
        for node in self.cluster.nodes.values():
            bp = node.cpu.breakpoint
            if bp is not None and (best is None or bp < best):
                best = bp
        return best

    def on_breakpoint(self, now: int) -> None:
        for node in self.cluster.nodes.values():
            if node.cpu.breakpoint == now:
                self._touch(node, now)

    def _touch(self, node: NodeState, now: int) -> None:
        for pod, req in node.cpu.sync(now):
            self._complete(pod, req, now)

    # -- request flow -------------------------------------------------------

    def _new_request(self, arrival: int, demand: int, tag: RouteTag) -> Request:
        self.books[tag.deployment].created += 1
        return Request(next(self._req_ids), arrival, demand, tag=tag)

    def _enqueue(self, pod_id: str, req: Request, now: int) -> None:
        node = self.cluster.node_of(pod_id)
        self._touch(node, now)
        node.cpu.enqueue(pod_id, req, now)

    def _on_arrival(self, ev, proc, chain: ServiceChain) -> None:
        now = ev.due
        for _ in range(proc.batch):
            tag = RouteTag(ev.target, chain, 0, now, chain.stages[0])
            req = self._new_request(now, chain.demands[0].sample(), tag)
            self.router.dispatch(req, now)
        self._schedule_arrival(ev.target, proc, chain, proc.next_arrival(now))

    def _complete(self, pod: PodRuntime, req: Request, now: int) -> None:
        tag = req.tag
        self.books[tag.deployment].completed += 1
        self.latency.record(tag.deployment, req.arrival, now)
        if self.config.record_requests:
            self.report.requests.append({
                "id": req.id, "deployment": tag.deployment, "workload": tag.workload,
                "arrival_us": req.arrival, "service_start_us": req.service_start, "completion_us": now,
            })
        nxt = self.router.forward(req, now, self._new_request)
        if nxt is None and tag.workload in self._chain_workloads:
            self.latency.record(f"chain:{tag.chain.id}", tag.origin, now)

    # -- periodic events ----------------------------------------------------

    def _on_period(self, ev) -> None:
        now = ev.due
        for node in self.cluster.nodes.values():
            self._touch(node, now)
            node.cpu.on_period_boundary(now)
        nxt = now + self.period_us
        if nxt <= self.end:
            self.engine.at(nxt, EventKind.PERIOD_BOUNDARY, None, self._on_period)

    def _dep_cpu(self, dep: DeploymentState) -> int:
        return dep.cpu_retired + sum(self.cluster.pods[p].cumulative for p in dep.replicas)

    def _sync_all(self, now: int) -> None:
        for node in self.cluster.nodes.values():
            self._touch(node, now)
            node.sample(now)

    def _accrue(self, now: int) -> None:
        interval = now - self._last_tick
        if interval <= 0:
            return
        for dep_id, dep in self.deps.items():
            book = self.books[dep_id]
            cpu = self._dep_cpu(dep)
            book.history.add(now, cpu)
            util = float((cpu - self._dep_cpu_at_tick[dep_id]) * 1000 / interval)
            self._dep_cpu_at_tick[dep_id] = cpu
            book.creq_us += dep.total_creq * interval
            n_target = dep.policy.yaas.t_cong if dep.policy is not None and dep.policy.kind == "yaas" else None
            self.ledger.accrue(dep_id, interval / US_PER_S, Snapshot(dep.total_creq, util, n_target))
            book.tick_util = util

    def _on_tick(self, ev) -> None:
        now = ev.due
        prev = self._last_tick
        self._sync_all(now)
        self._accrue(now)
        t_s = now / US_PER_S
        cluster = self.cluster

        for nid, node in cluster.nodes.items():
            cluster.node_util[nid] = node_utilization(node, cluster.util_window, now)

        for dep_id, dep in self.deps.items():
            book = self.books[dep_id]
            pol = dep.policy
            window = to_us(pol.window_s) if pol is not None else cluster.util_window
            dep.util_m = book.history.rate_m(now, window)
            dep.latency_ms = self._window_latency(dep, now - window, now)
            tick_lat = self._window_latency(dep, prev, now)
            compliant = tick_lat is None or tick_lat <= dep.slo.latency_ms
            if prev >= self.warmup:
                self.report.windows.setdefault(dep_id, []).append([t_s, tick_lat, compliant])
            self.report.timeseries.append({
                "t_s": t_s, "deployment": dep_id, "replicas": len(dep.replicas),
                "total_creq_m": dep.total_creq, "util_m": book.tick_util,
                "p99_ms_window": tick_lat, "node_id": None, "node_util": None,
            })
        for nid, node in cluster.nodes.items():
            busy = node.cpu.busy - self._node_busy_at_tick[nid]
            self._node_busy_at_tick[nid] = node.cpu.busy
            self.report.timeseries.append({
                "t_s": t_s, "deployment": None, "replicas": None, "total_creq_m": None, "util_m": None,
                "p99_ms_window": None, "node_id": nid, "node_util": float(busy / (node.spec.cores * (now - prev))),
            })
            self.report.allocations.append({
                "t_s": t_s, "node": nid, "allocated": node.allocated, "capacity": node.capacity,
                "placed_creq": sum(p.spec.creq for p in node.cpu.pods.values()),
            })
        violations = cluster.gatekeeping_violations()
        if violations:
            raise SimulationError("gate-keeping violated: " + "; ".join(violations))

        if now < self.end:
            self._control(now, t_s)
        self._last_tick = now
        self._tick_index += 1
        nxt = now + self.sync_us
        if nxt <= self.end:
            self.engine.at(nxt, EventKind.CONTROL_TICK, None, self._on_tick)

    def _window_latency(self, dep: DeploymentState, start: int, end: int) -> Optional[float]:
        lats = self.latency.window(dep.id, start, end)
        if not lats:
            outstanding = sum(len(self.cluster.pods[p].queue) for p in dep.replicas)
            return float("inf") if outstanding else None
        return percentile(lats, dep.slo.percentile) / US_PER_MS

    def _control(self, now: int, t_s: float) -> None:
        for dep_id in sorted(self.deps):
            dep = self.deps[dep_id]
            pol = dep.policy
            if pol is None or pol.kind == "none":
                continue
            book = self.books[dep_id]
            if book.last_eval is not None and now - book.last_eval < to_us(pol.sync_period_s):
                continue
            if pol.kind == "yaas" and dep.last_action_tick is not None \
                    and self._tick_index - dep.last_action_tick < pol.yaas.cooldown:
                continue
            book.last_eval = now
            actions = decide(dep, self.cluster, pol)
            real = [a for a in actions if a.kind is not ActionKind.NOOP]
            if not real:
                if actions and actions[0].reason:
                    self._log(t_s, dep_id, actions, False, actions[0].reason)
                continue
            throttles = {p: self.cluster.pods[p].throttle_events for p in dep.replicas}
            result = apply_actions(self.cluster, dep, actions, now, self.downtime)
            if not result.applied:
                self._log(t_s, dep_id, actions, False, f"rejected: {result.reason}")
                continue
            for pid, count in throttles.items():
                if pid not in self.cluster.pods:
                    book.throttles_retired += count
            dep.last_action_tick = self._tick_index
            slo = any(a.slo_triggered for a in real)
            entry = self._log(t_s, dep_id, actions, True, "; ".join(dict.fromkeys(a.reason for a in real)))
            entry["slo_triggered"] = slo
            entry["util_m"] = dep.util_m
            entry["overage_after"] = dep.util_m - dep.total_creq
            for req in result.orphans:
                self.router.dispatch(req, now)

    def _log(self, t_s: float, dep_id: str, actions, applied: bool, reason: str) -> dict:
        entry = {
            "t_s": t_s, "deployment": dep_id, "action": "+".join(a.label() for a in actions),
            "reason": reason, "applied": applied, "slo_triggered": False, "util_m": None, "overage_after": None,
        }
        self.report.actions.append(entry)
        return entry

    # -- run ----------------------------------------------------------------

    def run(self) -> MetricsReport:
        self.engine.run_until(self.end)
        self._sync_all(self.end)
        if self._last_tick < self.end:
            self._accrue(self.end)
        self._finish()
        return self.report

    def _finish(self) -> None:
        cfg = self.config
        rep = self.report
        duration = self.end / US_PER_S
        span = (self.end - self.warmup) / US_PER_S if self.end > self.warmup else duration
        cpu_total = 0
        for dep_id, dep in sorted(self.deps.items()):
            book = self.books[dep_id]
            pods = [self.cluster.pods[p] for p in dep.replicas]
            cpu_total += self._dep_cpu(dep)
            outstanding = sum(len(p.queue) for p in pods)
            if book.created != book.completed + outstanding:
                raise SimulationError(
                    f"{dep_id}: {book.created} requests created but {book.completed} completed + {outstanding} queued"
                )
            post = self.latency.post_warmup(dep_id) if self.end > self.warmup else []
            wins = rep.windows.get(dep_id, [])
            bills = {s: self.ledger.get(dep_id, s) for s in Scheme}
            rep.deployments[dep_id] = DeploymentSummary(
                deployment=dep_id,
                replicas_final=len(dep.replicas),
                p50_ms=_ms(percentile(post, 50)),
                p95_ms=_ms(percentile(post, 95)),
                p99_ms=_ms(percentile(post, 99)),
                slo_ms=dep.slo.latency_ms,
                slo_attainment=(sum(1 for w in wins if w[2]) / len(wins)) if wins else None,
                throughput_rps=(len(post) / span) if span > 0 else 0.0,
                throttle_events=book.throttles_retired + sum(p.throttle_events for p in pods),
                creq_seconds=book.creq_us / US_PER_S,
                util_seconds=float(self._dep_cpu(dep) * 1000 / US_PER_S),
                bill_resource=_accrued(bills[Scheme.RESOURCE]),
                bill_utilization=_accrued(bills[Scheme.UTILIZATION]),
                bill_performance=_accrued(bills[Scheme.PERFORMANCE]),
                mean_ms=(sum(post) / len(post) / US_PER_MS) if post else None,
                completed=book.completed,
                slo_percentile=dep.slo.percentile,
            )
            if bills[Scheme.RESOURCE] is not None and bills[Scheme.UTILIZATION] is not None:
                perf = bills[Scheme.PERFORMANCE]
                rep.exploit[dep_id] = exploit_gap(
                    bills[Scheme.UTILIZATION].accrued, bills[Scheme.RESOURCE].accrued,
                    perf.accrued if perf is not None else None,
                )
            steps = sorted(self._step_times.get(dep_id, ()))
            if steps:
                rep.time_to_meet[dep_id] = [
                    [s / US_PER_S, time_to_meet_slo(rep, s / US_PER_S, dep_id)] for s in steps if s < self.end
                ]
        busy = sum(n.cpu.busy for n in self.cluster.nodes.values())
        if busy != cpu_total:
            raise SimulationError(f"CPU conservation broken: pods {cpu_total} us vs nodes {busy} us")
        arrivals = sum(b.created for b in self.books.values())
        completed = sum(b.completed for b in self.books.values())
        rep.accounting = {
            "requests_created": arrivals, "requests_completed": completed,
            "requests_outstanding": arrivals - completed, "pod_cpu_us": _num(cpu_total), "node_busy_us": _num(busy),
        }
        for key in self.latency.keys():
            if key.startswith("chain:"):
                post = self.latency.post_warmup(key) if self.end > self.warmup else []
                rep.chains[key[len("chain:"):]] = {
                    "completed": self.latency.count(key),
                    "p50_ms": _ms(percentile(post, 50)), "p99_ms": _ms(percentile(post, 99)),
                    "mean_ms": (sum(post) / len(post) / US_PER_MS) if post else None,
                }
        if cfg.record_periods:
            for nid, node in self.cluster.nodes.items():
                for start, pod_id, consumed in node.cpu.period_log:
                    rep.period_log.append({"node": nid, "period_start_us": start, "pod": pod_id, "consumed_us": _num(consumed)})


def _num(x):
    """Exact CPU amounts as plain numbers: int when whole, else float."""
    if isinstance(x, Fraction):
        return x.numerator if x.denominator == 1 else float(x)
    return x


def _ms(us: Optional[int]) -> Optional[float]:
    return None if us is None else us / US_PER_MS


def _accrued(record) -> Optional[float]:
    return None if record is None else record.accrued


def run(config: ScenarioConfig) -> MetricsReport:
    """Simulate ``config`` start to finish.  Raises SimulationError on an invariant breach."""
    return Simulation(config).run()
