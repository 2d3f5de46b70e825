import pytest

from limitsim.autoscaler import (
    ActionKind, HPAConfig, PolicyConfig, ScalingAction, YAASConfig, apply_action, apply_actions,
    hpa_decide, yaas_decide,
)
from limitsim.cfs import PodRuntime, PodSpec
from limitsim.cluster import SLO, Cluster, DeploymentState, NodeSpec

from conftest import minimal, run_dict


def _setup(creq, replicas_on, nodes, fillers=(), slo_ms=100.0, strategy="LeastAllocated"):
    """Cluster of ``nodes`` {id: cores}; a deployment with one replica per entry of ``replicas_on``."""
    cl = Cluster([NodeSpec(nid, c) for nid, c in nodes.items()], strategy=strategy)
    for k, (nid, c) in enumerate(fillers):
        cl.place_pod(PodRuntime(f"fill-{k}", PodSpec(c)), 0, node_id=nid)
    dep = DeploymentState("d", PodSpec(creq), SLO(slo_ms))
    for nid in replicas_on:
        pod = PodRuntime(dep.new_pod_id(), dep.template)
        cl.place_pod(pod, 0, node_id=nid)
        dep.replicas.append(pod.id)
    return cl, dep


def _hpa(threshold, **kw):
    return PolicyConfig("h", "hpa", hpa=HPAConfig(threshold=threshold, **kw))


def _yaas(**kw):
    return PolicyConfig("y", "yaas", yaas=YAASConfig(**kw))


# -- HPA ----------------------------------------------------------------------

def test_hpa_adds_above_threshold():
    _, dep = _setup(300, ["a"], {"a": 1})
    dep.util_m = 250
    assert hpa_decide(dep, _hpa(0.7)).kind is ActionKind.ADD_REPLICA


def test_hpa_threshold_above_creq_never_fires_when_pinned():
    _, dep = _setup(300, ["a"], {"a": 1}, fillers=[("a", 700)])
    for util in (0, 150, 299, 300):
        dep.util_m = util
        assert hpa_decide(dep, _hpa(1.2)).kind is ActionKind.NOOP


def test_hpa_floor_of_one_replica():
    _, dep = _setup(300, ["a"], {"a": 1})
    dep.util_m = 0
    assert hpa_decide(dep, _hpa(0.7)).kind is ActionKind.NOOP


def test_hpa_scale_down_only_below_hysteresis():
    _, dep = _setup(300, ["a", "a", "a"], {"a": 1})
    dep.util_m = 100  # 50 m per replica with 2 replicas, band is 0.7*300*0.8 = 168
    assert hpa_decide(dep, _hpa(0.7)).kind is ActionKind.REMOVE_REPLICA
    dep.util_m = 400  # 200 m per replica with 2: above the band
    assert hpa_decide(dep, _hpa(0.7)).kind is ActionKind.NOOP


def test_hpa_max_replicas():
    _, dep = _setup(300, ["a", "a"], {"a": 1})
    dep.util_m = 600
    assert hpa_decide(dep, _hpa(0.7, max_replicas=2)).kind is ActionKind.NOOP


def test_hpa_ratio_mode_jumps():
    _, dep = _setup(100, ["a"], {"a": 4})
    dep.util_m = 350
    act = hpa_decide(dep, _hpa(0.5, mode="k8s-ratio"))
    assert act.kind is ActionKind.ADD_REPLICA and act.count == 6


def test_hpa_add_without_fit_is_logged_as_rejected():
    raw = minimal(
        deployments=[{"id": "app", "pod": {"creq": 600}, "slo": {"latency_ms": 100}, "policy": "h"}],
        policies=[{"id": "h", "kind": "hpa", "sync_period_s": 1, "window_s": 1, "hpa": {"threshold": 0.1}}],
    )
    rep = run_dict(raw)
    assert rep.actions and not any(a["applied"] for a in rep.actions)
    assert all(a["reason"].startswith("rejected") for a in rep.actions)


# -- YAAS ---------------------------------------------------------------------

def test_overage_follows_definition_both_signs():
    _, c1 = _setup(1500, ["a"], {"a": 4})
    _, c2 = _setup(1500, ["a"], {"a": 4})
    c1.util_m, c2.util_m = 2000, 1000
    assert (c1.overage, c2.overage) == (500, -500)


def test_yaas_breach_with_overage_sets_creq_to_util():
    cl, dep = _setup(1000, ["a"], {"a": 2})
    dep.util_m, dep.latency_ms = 1200, 150
    acts = yaas_decide(dep, cl, _yaas())
    assert [(a.kind, a.creq) for a in acts] == [(ActionKind.SET_CREQ, 1200)]
    assert apply_actions(cl, dep, acts, 0).applied
    assert dep.util_m - dep.total_creq <= 0


def test_yaas_breach_without_room_splits_util():
    cl, dep = _setup(1000, ["a"], {"a": 2, "b": 2}, fillers=[("a", 1000)])
    dep.util_m, dep.latency_ms = 1600, 150
    acts = yaas_decide(dep, cl, _yaas())
    kinds = sorted(a.kind.value for a in acts)
    assert kinds == ["AddReplica", "SetCreq"]
    assert apply_actions(cl, dep, acts, 0).applied
    assert len(dep.replicas) == 2 and dep.total_creq == 1600
    assert dep.util_m - dep.total_creq <= 0


def test_yaas_split_conserves_total_creq():
    cl, dep = _setup(900, ["a"], {"a": 1, "b": 1}, fillers=[("b", 550)])
    dep.util_m, dep.latency_ms = 900, 150
    cl.node_util.update({"a": 0.5, "b": 0.5})
    acts = yaas_decide(dep, cl, _yaas())
    assert apply_actions(cl, dep, acts, 0).applied
    assert [cl.pods[p].spec.creq for p in dep.replicas] == [450, 450]
    assert dep.total_creq == 900


def test_yaas_breach_on_congested_node_migrates():
    cl, dep = _setup(500, ["a"], {"a": 2, "b": 2, "c": 2})
    cl.node_util.update({"a": 0.95, "b": 0.6, "c": 0.1})
    dep.util_m, dep.latency_ms = 400, 150
    acts = yaas_decide(dep, cl, _yaas(t_cong=0.8))
    assert [(a.kind, a.pod, a.dest, a.slo_triggered) for a in acts] == [(ActionKind.MIGRATE, "d-0", "c", True)]


def test_yaas_capacity_exhausted():
    cl, dep = _setup(500, ["a"], {"a": 1}, fillers=[("a", 500)])
    dep.util_m, dep.latency_ms = 800, 150
    acts = yaas_decide(dep, cl, _yaas())
    assert [(a.kind, a.reason) for a in acts] == [(ActionKind.NOOP, "capacity exhausted")]


def test_yaas_eager_downscale():
    cl, dep = _setup(1000, ["a"], {"a": 2})
    dep.util_m, dep.latency_ms = 400, 20
    acts = yaas_decide(dep, cl, _yaas())
    assert [(a.kind, a.creq) for a in acts] == [(ActionKind.SET_CREQ, 400)]


def test_yaas_downscale_drops_replica_below_min_creq():
    cl, dep = _setup(100, ["a", "a", "a"], {"a": 2})
    dep.util_m, dep.latency_ms = 20, 5
    acts = yaas_decide(dep, cl, _yaas(min_creq=10))
    assert sorted(a.kind.value for a in acts) == ["RemoveReplica", "SetCreq"]
    assert apply_actions(cl, dep, acts, 0).applied
    assert len(dep.replicas) == 2 and dep.template.creq == 10


def test_yaas_within_slo_and_band_is_noop():
    cl, dep = _setup(1000, ["a"], {"a": 2})
    dep.util_m, dep.latency_ms = 900, 50
    assert [a.kind for a in yaas_decide(dep, cl, _yaas())] == [ActionKind.NOOP]


def test_yaas_slight_violation_margin():
    cl, dep = _setup(1000, ["a"], {"a": 2})
    dep.util_m, dep.latency_ms = 1200, 104  # within SLO * 1.05
    assert [a.kind for a in yaas_decide(dep, cl, _yaas(slo_margin=0.05))] == [ActionKind.NOOP]


# -- apply_action -------------------------------------------------------------

def test_apply_add_replica():
    cl, dep = _setup(500, ["a"], {"a": 2})
    assert apply_action(cl, dep, ScalingAction(ActionKind.ADD_REPLICA), 0).applied
    assert len(dep.replicas) == 2 and cl.nodes["a"].allocated == 1000


def test_apply_set_creq_over_spare_rejected():
    cl, dep = _setup(500, ["a"], {"a": 1}, fillers=[("a", 400)])
    res = apply_action(cl, dep, ScalingAction(ActionKind.SET_CREQ, creq=700), 0)
    assert not res.applied and "exceeds spare" in res.reason
    assert cl.pods["d-0"].spec.creq == 500 and cl.nodes["a"].allocated == 900


def test_apply_migrate_moves_allocation():
    cl, dep = _setup(700, ["a"], {"a": 1, "b": 1})
    assert apply_action(cl, dep, ScalingAction(ActionKind.MIGRATE, pod="d-0", dest="b"), 0).applied
    assert (cl.nodes["a"].allocated, cl.nodes["b"].allocated) == (0, 700)


def test_apply_is_atomic():
    cl, dep = _setup(500, ["a"], {"a": 1})
    plan = [ScalingAction(ActionKind.SET_CREQ, creq=400), ScalingAction(ActionKind.ADD_REPLICA, count=2)]
    assert not apply_actions(cl, dep, plan, 0).applied
    assert dep.template.creq == 500 and len(dep.replicas) == 1 and cl.nodes["a"].allocated == 500


def test_remove_replica_returns_queued_work():
    from limitsim.cfs import Request
    cl, dep = _setup(100, ["a", "a"], {"a": 1})
    cl.nodes["a"].cpu.enqueue("d-1", Request(0, 0, 50), 0)
    res = apply_action(cl, dep, ScalingAction(ActionKind.REMOVE_REPLICA), 0)
    assert res.applied and [r.id for r in res.orphans] == [0]


# -- closed-loop behavior -----------------------------------------------------

def _yaas_doc(creq, rate, demand_us, slo_ms, neighbor=False, **yaas):
    raw = minimal(
        duration_s=120,
        nodes=[{"id": "n1", "cores": 2}],
        control={"sync_period_s": 5, "warmup_s": 0},
        policies=[{"id": "y", "kind": "yaas", "sync_period_s": 5, "window_s": 5, "yaas": yaas}],
        deployments=[{"id": "app", "pod": {"creq": creq}, "slo": {"latency_ms": slo_ms}, "policy": "y"}],
        workloads=[{"id": "load", "deployment": "app",
                    "arrival": {"kind": "deterministic", "interval_us": int(1e6 / rate)},
                    "demand": {"kind": "constant", "us": demand_us}}],
    )
    if neighbor:
        # a busy single-threaded neighbor with most of the shares on a 1-core node
        raw["nodes"] = [{"id": "n1", "cores": 1}]
        raw["deployments"].append({"id": "nb", "pod": {"creq": 500}, "slo": {"latency_ms": 1000}})
        raw["workloads"].append({"id": "nb-load", "deployment": "nb",
                                 "arrival": {"kind": "deterministic", "interval_us": 20_000},
                                 "demand": {"kind": "constant", "us": 12_000}})
    return raw


def test_yaas_reaches_fixed_point_under_constant_load():
    rep = run_dict(_yaas_doc(1000, 30, 10_000, 100, cooldown=1))
    applied = rep.scaling_actions("app")
    assert 1 <= len(applied) <= 3
    assert max(a["t_s"] for a in applied) <= 30
    assert rep.deployments["app"].replicas_final == 1


def test_overage_positive_between_actions_and_zeroed_after_slo_action():
    # loose SLO: the pod bursts far above its 50 m creq and YAAS leaves it alone
    loose = run_dict(_yaas_doc(50, 30, 10_000, 1000))
    rows = [r for r in loose.timeseries if r["deployment"] == "app" and r["t_s"] > 10]
    assert all(r["util_m"] > r["total_creq_m"] for r in rows)
    assert loose.scaling_actions("app") == []
    # tight SLO: the breach raises creq and every SLO-triggered action leaves overage <= 0
    tight = run_dict(_yaas_doc(50, 30, 10_000, 12, neighbor=True))
    slo_actions = [a for a in tight.scaling_actions("app") if a["slo_triggered"]]
    assert slo_actions
    assert all(a["overage_after"] <= 0 for a in slo_actions)
