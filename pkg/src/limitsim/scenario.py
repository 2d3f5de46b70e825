"""Scenario documents: JSON parsing, validation and named variants.

A scenario file may carry a ``variants`` table mapping a name to a set of
path overrides, e.g. ``{"limited": {"deployments.p1.pod.clim": 300}}``.
Load a variant with ``path#name``.  Path segments index lists by element
``id`` or by position; the value ``"$delete"`` removes the element.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .autoscaler import HPAConfig, PolicyConfig, YAASConfig
from .billing import RateCard, Scheme, flat_rate, inverse_rate, table_rate
from .cfs import DEFAULT_PERIOD_US, PodRuntime, PodSpec
from .cluster import STRATEGIES, Cluster, NodeSpec, SLO
from .engine import RngStream, to_us
from .errors import ConfigError, NoFit
from .workload import ArrivalProcess, ServiceDemand, load_trace

SCHEMA = "limitsim/1"
DELETE = "$delete"


@dataclass
class ControlConfig:
    sync_period_s: float = 15.0
    placement: str = "LeastAllocated"
    warmup_s: float = 10.0
    period_us: int = DEFAULT_PERIOD_US
    migration_downtime_ms: float = 0.0
    util_window_s: float = 15.0


@dataclass
class DeploymentConfig:
    id: str
    pod: PodSpec
    replicas: int = 1
    slo: SLO = field(default_factory=lambda: SLO(100.0))
    policy: Optional[str] = None
    nodes: Optional[list[str]] = None  # pinned nodes for the initial replicas


@dataclass
class ChainConfig:
    id: str
    stages: list[str]
    demands: list[dict]


@dataclass
class WorkloadConfig:
    id: str
    arrival: dict
    deployment: Optional[str] = None
    chain: Optional[str] = None
    demand: Optional[dict] = None


@dataclass
class BillingConfig:
    card: RateCard = field(default_factory=RateCard)
    schemes: dict[str, list[Scheme]] = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    nodes: list[NodeSpec]
    deployments: list[DeploymentConfig]
    workloads: list[WorkloadConfig]
    chains: list[ChainConfig] = field(default_factory=list)
    policies: list[PolicyConfig] = field(default_factory=list)
    billing: BillingConfig = field(default_factory=BillingConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    record_periods: bool = False
    record_requests: bool = False
    raw: dict = field(default_factory=dict, repr=False)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def policy(self, policy_id: Optional[str]) -> Optional[PolicyConfig]:
        for p in self.policies:
            if p.id == policy_id:
                return p
        return None

    def deployment(self, dep_id: str) -> DeploymentConfig:
        for d in self.deployments:
            if d.id == dep_id:
                return d
        raise KeyError(dep_id)


# -- path overrides -----------------------------------------------------------

def _child(container, key: str, create: bool):
    if isinstance(container, list):
        for i, item in enumerate(container):
            if isinstance(item, dict) and item.get("id") == key:
                return i
        if key.lstrip("-").isdigit():
            return int(key)
        raise ConfigError(f"no element with id {key!r}")
    if isinstance(container, dict):
        if key not in container and create:
            container[key] = {}
        return key
    raise ConfigError(f"cannot index into {type(container).__name__} with {key!r}")


def set_path(doc: dict, path: str, value: Any) -> None:
    parts = path.split(".")
    node = doc
    for part in parts[:-1]:
        node = node[_child(node, part, create=True)]
    last = parts[-1]
    key = _child(node, last, create=False)
    if value == DELETE:
        if isinstance(node, list):
            node.pop(key)
        else:
            node.pop(key, None)
    else:
        node[key] = copy.deepcopy(value)


def get_path(doc: dict, path: str) -> Any:
    node = doc
    for part in path.split("."):
        node = node[_child(node, part, create=False)]
    return node


def apply_overrides(raw: dict, overrides: dict[str, Any]) -> dict:
    doc = copy.deepcopy(raw)
    for path, value in overrides.items():
        try:
            set_path(doc, path, value)
        except (KeyError, IndexError) as exc:
            raise ConfigError(f"override {path!r}: no such path ({exc})") from exc
    return doc


# -- parsing ------------------------------------------------------------------

def build_arrival(spec: dict, stream: RngStream, base_dir: Path = Path(".")) -> ArrivalProcess:
    kind = spec.get("kind")
    batch = spec.get("batch", 1)
    stop = spec.get("stop_s")
    stop_us = to_us(stop) if stop is not None else None
    if kind == "poisson":
        return ArrivalProcess("poisson", stream, rate=float(spec.get("rate", 0)), batch=batch, stop_us=stop_us)
    if kind == "deterministic":
        return ArrivalProcess("deterministic", stream, interval_us=spec.get("interval_us", 0), batch=batch,
                              stop_us=stop_us)
    if kind == "trace":
        if "file" in spec:
            try:
                times = load_trace(base_dir / spec["file"])
            except (OSError, ValueError) as exc:
                raise ConfigError(f"trace file {spec['file']}: {exc}") from exc
        else:
            times = list(spec.get("times_us", []))
        return ArrivalProcess("trace", stream, times=times, batch=batch, stop_us=stop_us)
    if kind == "step":
        segs = [(to_us(s), float(r)) for s, r in spec.get("segments", [])]
        return ArrivalProcess("step", stream, segments=segs, batch=batch, stop_us=stop_us)
    raise ConfigError(f"unknown arrival kind {kind!r}")


def build_demand(spec: dict, stream: RngStream) -> ServiceDemand:
    kind = spec.get("kind")
    if kind == "constant":
        return ServiceDemand("constant", stream, value_us=spec.get("us", 0))
    if kind == "exponential":
        return ServiceDemand("exponential", stream, mean_us=float(spec.get("mean_us", 0)))
    if kind == "empirical":
        return ServiceDemand("empirical", stream, values=list(spec.get("values_us", [])))
    raise ConfigError(f"unknown demand kind {kind!r}")


def _perf_rate(value):
    if value in (None, "inverse"):
        return inverse_rate
    if value == "flat":
        return flat_rate
    if isinstance(value, list):
        return table_rate(value)
    raise ConfigError(f"billing.perf_rate must be 'inverse', 'flat' or a list of [N, multiplier], got {value!r}")


def _collect(errors: list[str], where: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        errors.extend(f"{where}: {e}" for e in exc.errors)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
    return None


def _dataclass_from(cls, data: dict, where: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{where}: expected an object")
        return cls()
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        errors.append(f"{where}: unknown keys {unknown}")
    return cls(**{k: v for k, v in data.items() if k in known})


def parse_scenario_dict(raw: dict, base_dir: Optional[Path] = None) -> ScenarioConfig:
    """Validate a scenario document; raises ConfigError listing every problem."""
    base_dir = Path(base_dir or Path.cwd())
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a JSON object")
    if raw.get("schema") != SCHEMA:
        errors.append(f"schema must be {SCHEMA!r}, got {raw.get('schema')!r}")
    name = str(raw.get("name", ""))
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        errors.append("seed must be a non-negative integer")
        seed = 0
    duration = raw.get("duration_s")
    if not isinstance(duration, (int, float)) or duration < 0:
        errors.append("duration_s must be a number >= 0")
        duration = 0.0

    control = _dataclass_from(ControlConfig, raw.get("control", {}), "control", errors)
    if control.placement not in STRATEGIES:
        errors.append(f"control.placement must be one of {STRATEGIES}")
    if not control.sync_period_s > 0:
        errors.append("control.sync_period_s must be > 0")
    if not (isinstance(control.period_us, int) and control.period_us > 0):
        errors.append("control.period_us must be a positive integer")
    if control.warmup_s < 0 or control.migration_downtime_ms < 0 or not control.util_window_s > 0:
        errors.append("control: warmup and downtime must be >= 0, util_window_s > 0")

    trace = raw.get("trace", {})

    nodes = []
    for i, n in enumerate(raw.get("nodes", [])):
        nid = n.get("id", f"#{i}")
        cores = n.get("cores")
        if not isinstance(cores, int) or cores < 1:
            errors.append(f"node {nid}: cores must be an integer >= 1")
            continue
        nodes.append(NodeSpec(str(nid), cores))
    if not nodes:
        errors.append("at least one node is required")
    node_ids = {n.id for n in nodes}
    if len(node_ids) != len(nodes):
        errors.append("node ids must be unique")

    policies = []
    for i, p in enumerate(raw.get("policies", [])):
        pid = p.get("id", f"#{i}")
        where = f"policy {pid}"
        rest = {k: v for k, v in p.items() if k not in ("hpa", "yaas")}
        cfg = _dataclass_from(PolicyConfig, rest, where, errors)
        cfg.hpa = _dataclass_from(HPAConfig, p.get("hpa", {}), f"{where}.hpa", errors)
        cfg.yaas = _dataclass_from(YAASConfig, p.get("yaas", {}), f"{where}.yaas", errors)
        errors.extend(cfg.problems())
        policies.append(cfg)
    policy_kinds = {p.id: p.kind for p in policies}
    if len(policy_kinds) != len(policies):
        errors.append("policy ids must be unique")

    deployments = []
    for i, d in enumerate(raw.get("deployments", [])):
        did = str(d.get("id", f"#{i}"))
        where = f"deployment {did}"
        pod = d.get("pod", {})
        spec = _collect(errors, where, PodSpec, creq=pod.get("creq"), clim=pod.get("clim"),
                        parallelism=pod.get("parallelism", 1), deployment=did)
        slo_raw = d.get("slo", {})
        slo = SLO(float(slo_raw.get("latency_ms", 100.0)), float(slo_raw.get("percentile", 99.0)))
        if not slo.latency_ms > 0 or not 0 < slo.percentile <= 100:
            errors.append(f"{where}: slo needs latency_ms > 0 and 0 < percentile <= 100")
        replicas = d.get("replicas", 1)
        if not isinstance(replicas, int) or replicas < 1:
            errors.append(f"{where}: replicas must be an integer >= 1")
            replicas = 1
        policy = d.get("policy")
        if policy is not None and policy not in policy_kinds:
            errors.append(f"{where}: unknown policy {policy!r}")
        if spec is not None and policy_kinds.get(policy) == "yaas" and spec.clim is not None:
            errors.append(f"{where}: YAAS manages limit-free pods; remove clim")
        pins = d.get("nodes")
        if pins is not None:
            if len(pins) != replicas:
                errors.append(f"{where}: 'nodes' must list one node per initial replica")
            for nid in pins:
                if nid not in node_ids:
                    errors.append(f"{where}: unknown node {nid!r}")
        if spec is not None:
            deployments.append(DeploymentConfig(did, spec, replicas, slo, policy, pins))
    dep_ids = [d.id for d in deployments]
    if len(set(dep_ids)) != len(dep_ids):
        errors.append("deployment ids must be unique")

    chains = []
    for i, c in enumerate(raw.get("chains", [])):
        cid = str(c.get("id", f"#{i}"))
        stages = list(c.get("stages", []))
        demands = list(c.get("demands", []))
        if not stages:
            errors.append(f"chain {cid}: needs at least one stage")
        if len(demands) != len(stages):
            errors.append(f"chain {cid}: one demand per stage required")
        for s in stages:
            if s not in dep_ids:
                errors.append(f"chain {cid}: unknown deployment {s!r}")
        for k, dm in enumerate(demands):
            _collect(errors, f"chain {cid} stage {k}", build_demand, dm, RngStream(0))
        chains.append(ChainConfig(cid, stages, demands))
    chain_ids = {c.id for c in chains}

    workloads = []
    for i, w in enumerate(raw.get("workloads", [])):
        wid = str(w.get("id", f"#{i}"))
        where = f"workload {wid}"
        dep, chain = w.get("deployment"), w.get("chain")
        if (dep is None) == (chain is None):
            errors.append(f"{where}: give exactly one of 'deployment' or 'chain'")
        if dep is not None and dep not in dep_ids:
            errors.append(f"{where}: unknown deployment {dep!r}")
        if chain is not None and chain not in chain_ids:
            errors.append(f"{where}: unknown chain {chain!r}")
        if dep is not None:
            if "demand" not in w:
                errors.append(f"{where}: 'demand' required for a deployment target")
            else:
                _collect(errors, where, build_demand, w["demand"], RngStream(0))
        _collect(errors, where, build_arrival, w.get("arrival", {}), RngStream(0), base_dir)
        workloads.append(WorkloadConfig(wid, w.get("arrival", {}), dep, chain, w.get("demand")))
    if len({w.id for w in workloads}) != len(workloads):
        errors.append("workload ids must be unique")

    billing_raw = raw.get("billing", {})
    card = _collect(errors, "billing", lambda: RateCard(float(billing_raw.get("base_rate", 1.0)),
                                                        _perf_rate(billing_raw.get("perf_rate"))))
    schemes: dict[str, list[Scheme]] = {}
    explicit = billing_raw.get("schemes", {})
    dep_policy = {d.id: d.policy for d in deployments}
    for did in dep_ids:
        if did in explicit:
            try:
                chosen = [Scheme(s) for s in explicit[did]]
            except ValueError as exc:
                errors.append(f"billing.schemes.{did}: {exc}")
                continue
        else:
            chosen = [Scheme.RESOURCE, Scheme.UTILIZATION]
            if policy_kinds.get(dep_policy[did]) == "yaas":
                chosen.append(Scheme.PERFORMANCE)
        if Scheme.PERFORMANCE in chosen and policy_kinds.get(dep_policy[did]) != "yaas":
            errors.append(f"billing: performance scheme on {did} requires a YAAS policy")
        schemes[did] = chosen
    for did in explicit:
        if did not in dep_ids:
            errors.append(f"billing.schemes: unknown deployment {did!r}")

    if not errors:
        # initial placement must pass gate-keeping
        cluster = Cluster(nodes, control.period_us, control.placement)
        for d in deployments:
            for k in range(d.replicas):
                pod = PodRuntime(f"{d.id}-{k}", d.pod, control.period_us)
                try:
                    cluster.place_pod(pod, 0, node_id=d.nodes[k] if d.nodes else None)
                except NoFit:
                    errors.append(
                        f"deployment {d.id}: initial replica {k} ({d.pod.creq} m) does not fit "
                        f"(sum of creq would exceed node capacity)"
                    )

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(
        name=name, seed=seed, duration_s=float(duration), nodes=nodes, deployments=deployments,
        workloads=workloads, chains=chains, policies=policies,
        billing=BillingConfig(card, schemes), control=control,
        record_periods=bool(trace.get("periods", False)), record_requests=bool(trace.get("requests", False)),
        raw=raw, base_dir=base_dir,
    )


def split_ref(ref: str) -> tuple[str, Optional[str]]:
    path, _, variant = str(ref).partition("#")
    return path, (variant or None)


def load_raw(ref: str) -> tuple[dict, Path]:
    path, variant = split_ref(ref)
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: scenario must be a JSON object")
    variants = raw.pop("variants", {}) or {}
    if variant is not None:
        if variant not in variants:
            raise ConfigError(f"{path}: no variant {variant!r} (have {sorted(variants)})")
        raw = apply_overrides(raw, variants[variant])
        raw["name"] = f"{raw.get('name', Path(path).stem)}#{variant}"
    return raw, Path(path).resolve().parent


def parse_scenario(ref: str, overrides: Optional[dict[str, Any]] = None) -> ScenarioConfig:
    """Load ``path[#variant]`` and apply extra ``overrides``."""
    raw, base = load_raw(ref)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return parse_scenario_dict(raw, base)


def variant_names(path: str) -> list[str]:
    raw = json.loads(Path(split_ref(path)[0]).read_text())
    return sorted(raw.get("variants", {}) or {})
