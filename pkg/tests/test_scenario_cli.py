import json

import pytest

from limitsim import ConfigError, SimulationError, parse_scenario, parse_scenario_dict
from limitsim.cli import main
from limitsim.experiments import SweepInfeasible, compare, sweep
from limitsim.metrics import read_csv
from limitsim.scenario import apply_overrides, get_path, set_path, variant_names

from conftest import SCENARIOS, minimal


def _write(tmp_path, raw, name="s.scn"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def _errors(raw):
    with pytest.raises(ConfigError) as exc:
        parse_scenario_dict(raw)
    return exc.value.errors


def test_minimal_parses():
    cfg = parse_scenario_dict(minimal())
    assert cfg.deployments[0].pod.creq == 500 and cfg.nodes[0].capacity == 1000


def test_clim_below_creq_rejected():
    errs = _errors(minimal(deployments=[{"id": "app", "pod": {"creq": 500, "clim": 300}}]))
    assert any("clim (300 m) must be >= creq (500 m)" in e for e in errs)


def test_initial_placement_gatekeeping():
    errs = _errors(minimal(deployments=[{"id": "app", "pod": {"creq": 600}, "replicas": 2}]))
    assert any("sum of creq would exceed node capacity" in e for e in errs)


def test_all_errors_reported_together():
    raw = minimal(
        seed=-1,
        deployments=[{"id": "app", "pod": {"creq": 500, "clim": 100}, "policy": "nope"}],
        workloads=[{"id": "w", "deployment": "ghost", "arrival": {"kind": "poisson", "rate": 0}}],
    )
    errs = _errors(raw)
    assert len(errs) >= 4


def test_yaas_with_clim_and_performance_without_yaas_rejected():
    raw = minimal(
        policies=[{"id": "y", "kind": "yaas"}],
        deployments=[{"id": "app", "pod": {"creq": 500, "clim": 500}, "policy": "y"}],
    )
    assert any("remove clim" in e for e in _errors(raw))
    raw = minimal(billing={"schemes": {"app": ["performance"]}})
    assert any("requires a YAAS policy" in e for e in _errors(raw))


def test_bad_schema():
    assert any("schema" in e for e in _errors(minimal(schema="other/2")))


def test_paths_and_variants():
    doc = {"deployments": [{"id": "a", "pod": {"creq": 1, "clim": 2}}]}
    set_path(doc, "deployments.a.pod.creq", 5)
    assert get_path(doc, "deployments.0.pod.creq") == 5
    out = apply_overrides(doc, {"deployments.a.pod.clim": "$delete"})
    assert out["deployments"][0]["pod"] == {"creq": 5}
    assert doc["deployments"][0]["pod"] == {"creq": 5, "clim": 2}
    assert "unlimited" in variant_names(str(SCENARIOS / "fig2a.scn"))
    cfg = parse_scenario(str(SCENARIOS / "fig2a.scn#unlimited"))
    assert cfg.deployments[0].pod.clim is None and cfg.name.endswith("#unlimited")
    with pytest.raises(ConfigError):
        parse_scenario(str(SCENARIOS / "fig2a.scn#missing"))


def test_run_writes_report(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(SCENARIOS / "queue-burst.scn"), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} >= {"summary.csv", "timeseries.csv", "actions.log"}
    assert main(["run", "--scenario", str(SCENARIOS / "queue-burst.scn"), "--out", str(tmp_path / "j"),
                 "--format", "json"]) == 0
    assert (tmp_path / "j" / "report.json").exists()


def test_zero_duration_gives_empty_report(tmp_path):
    ref = _write(tmp_path, minimal(duration_s=0))
    assert main(["run", "--scenario", ref, "--out", str(tmp_path / "o")]) == 0
    row = read_csv(tmp_path / "o" / "summary.csv")[0]
    assert row["p99_ms"] == "" and row["throughput_rps"] == "0.000000" and row["creq_seconds"] == "0.000000"
    assert read_csv(tmp_path / "o" / "timeseries.csv") == []


def test_seed_override_changes_run(tmp_path):
    ref = str(SCENARIOS / "fig2b.scn")
    main(["run", "--scenario", ref, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["run", "--scenario", ref, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "summary.csv").read_text() != (tmp_path / "b" / "summary.csv").read_text()


def test_exit_code_config_error(tmp_path, capsys):
    ref = _write(tmp_path, minimal(deployments=[{"id": "app", "pod": {"creq": 500, "clim": 300}}]))
    assert main(["run", "--scenario", ref, "--out", str(tmp_path / "o")]) == 1
    assert "clim" in capsys.readouterr().err


def test_exit_code_infeasible_sweep(tmp_path):
    ref = str(SCENARIOS / "case-a-margin.scn")
    code = main(["sweep", "--scenario", ref, "--knob", "clim", "--grid", "400", "--slo-target", "0.99",
                 "--out", str(tmp_path)])
    assert code == 2
    assert read_csv(tmp_path / "sweep.csv")[0]["meets"] == "false"


def test_exit_code_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--scenario", str(SCENARIOS / "fig2a.scn"), "--out", str(blocker / "o")]) == 3

def test_missing_scenario_is_config_error(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "missing.scn"), "--out", str(tmp_path)]) == 1


def test_exit_code_invariant_breach(tmp_path, monkeypatch):
    import limitsim.cli as cli

    def broken(cfg):
        raise SimulationError("CPU conservation broken")

    monkeypatch.setattr(cli, "run", broken)
    assert main(["run", "--scenario", str(SCENARIOS / "fig2a.scn"), "--out", str(tmp_path)]) == 4


def test_one_point_sweep_returns_it():
    cfg = parse_scenario(str(SCENARIOS / "case-a-margin.scn"))
    rep = sweep(cfg, "clim", [700], 0.9)
    assert rep.best is rep.points[0] and rep.best.value == 700


def test_sweep_keeps_limit_tied_to_request():
    cfg = parse_scenario(str(SCENARIOS / "case-a-margin.scn"))
    rep = sweep(cfg, "creq", [600], 0.5)
    assert rep.best.creq_seconds == 600 * 200


def test_sweep_validation():
    cfg = parse_scenario(str(SCENARIOS / "case-a-margin.scn"))
    for args in (("clim", [], 0.9), ("clim", [500, 400], 0.9), ("clim", [500], 1.5),
                 ("cputhresh", [0.5], 0.9), ("t-cong", [0.5], 0.9), ("memory", [1], 0.9)):
        with pytest.raises(ConfigError):
            sweep(cfg, *args)


def test_sweep_parallel_matches_serial():
    cfg = parse_scenario(str(SCENARIOS / "case-a-margin.scn"))
    grid = [450, 500, 550]
    a = sweep(cfg, "clim", grid, 0.5)
    b = sweep(cfg, "clim", grid, 0.5, jobs=2)
    assert a.rows() == b.rows()


def test_compare_rows_and_mismatch(tmp_path):
    a = parse_scenario(str(SCENARIOS / "fig2a.scn"))
    b = parse_scenario(str(SCENARIOS / "fig2a.scn#unlimited"))
    rows = compare(a, b)
    by = {(r["deployment"], r["metric"]): r for r in rows}
    assert set(by) >= {("app", "p99_ms"), ("app", "creq_seconds"), ("app", "bill_resource"), ("app", "actions")}
    assert float(by[("app", "p99_ms")]["delta"]) < 0
    other = parse_scenario(str(SCENARIOS / "queue-burst.scn"))
    with pytest.raises(ConfigError):
        compare(a, other)
    assert main(["compare", str(SCENARIOS / "fig2a.scn"), str(SCENARIOS / "queue-burst.scn"),
                 "--out", str(tmp_path)]) == 1
    assert main(["compare", str(SCENARIOS / "fig2a.scn"), str(SCENARIOS / "fig2a.scn") + "#unlimited",
                 "--out", str(tmp_path)]) == 0
    assert read_csv(tmp_path / "compare.csv")


def test_limit_margin_sweep(tmp_path):
    # 40 req/s of 10 ms mean work: a mean load of 400 m
    out = tmp_path / "sweep"
    grid = ",".join(str(v) for v in range(400, 801, 25))
    code = main(["sweep", "--scenario", str(SCENARIOS / "case-a-margin.scn"), "--knob", "clim",
                 "--grid", grid, "--slo-target", "0.95", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    att = [float(r["slo_attainment"]) for r in rows]
    assert all(a <= b for a, b in zip(att, att[1:]))
    best = min(float(r["value"]) for r in rows if r["meets"] == "true")
    assert 1.2 <= best / 400 <= 1.3
