"""Tests for the scenario pipeline, metrics, report files and the CLI.

Test groups
-----------
1. Metric invariants on the desk sweep
2. Solutions: verification and serialisation
3. Report files
4. Command-line interface
5. V2G on/off equivalence when discharging does not pay
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from v2geq.cli import main
from v2geq.scenario import (DATA_DIR, VerificationError, bundled_case, emit_outputs, run_scenario,
                            run_sweep, solution_from_dict, solution_to_dict)
from v2geq.verify import energy_flows

DESK = DATA_DIR / "desk"
DESK_ARGS = ["--net", str(DESK / "net.tntp"), "--trips", str(DESK / "trips.tntp"),
             "--feeder", str(DESK / "feeder.json")]


@pytest.fixture(scope="module")
def desk():
    return bundled_case("desk")


@pytest.fixture(scope="module")
def desk_sweep(desk):
    return run_sweep(desk.transport, desk.feeder, list(desk.scenarios.values()), desk.ev,
                     desk.market, k=desk.k, threads=2)


# ── 1. Metric invariants ─────────────────────────────────────────────────────

def test_sweep_order(desk_sweep):
    ids = [m.run_id for _, m in desk_sweep]
    assert ids == ["base-v2g-off", "base-v2g-on", "stress-v2g-off", "stress-v2g-on",
                   "island-v2g-off", "island-v2g-on"]


def test_shedding_cost_is_penalty_times_ls(desk_sweep, desk):
    for _, m in desk_sweep:
        assert m.social_cost["shedding"] == pytest.approx(desk.market.shedding_penalty * m.total_ls)
        assert m.total_ls >= 0


def test_social_cost_parts_add_up(desk_sweep):
    for _, m in desk_sweep:
        parts = {k: v for k, v in m.social_cost.items() if k != "total"}
        assert m.social_cost["total"] == pytest.approx(sum(parts.values()))


def test_shares_are_fractions(desk_sweep):
    for _, m in desk_sweep:
        assert 0.0 <= m.ev["visitation_share"] <= 1.0
        assert 0.0 <= m.ev["v2g_share"] <= m.ev["visitation_share"] + 1e-12
        if not m.v2g:
            assert m.ev["v2g_share"] == 0.0


def test_gross_discharge_matches_energy_flows(desk_sweep):
    for sol, m in desk_sweep:
        _, ef_minus = energy_flows(sol.problem, sol.ev_flows)
        assert m.ev["gross_discharge_kwh"] == pytest.approx(sum(ef_minus.values()), abs=1e-7)
        assert m.ev["gross_discharge_kwh"] == pytest.approx(
            sum(pm for _, pm in sol.station_power.values()), abs=1e-12)


def test_dlmp_summary(desk_sweep, desk):
    for _, m in desk_sweep:
        assert m.max_dlmp == max(m.dlmp.values())
        assert m.dlmp[desk.feeder.tso_bus] == desk.feeder.wholesale_price
        assert set(m.dlmp) == set(desk.feeder.bus_ids)


def test_dominant_path_cost_split(desk_sweep):
    for _, m in desk_sweep:
        for row in m.dominant_paths:
            assert row["total_cost"] == pytest.approx(row["time_cost"] + row["energy_cost"])
            assert row["flow"] >= 0


def test_station_net_load(desk_sweep):
    for sol, m in desk_sweep:
        for n, (pp, pm) in sol.station_power.items():
            assert m.station_net_load[n] == pytest.approx(pp - pm)


# ── 2. Solutions ────────────────────────────────────────────────────────────

def test_solution_round_trip(desk_sweep):
    sol, _ = desk_sweep[3]
    back = solution_from_dict(json.loads(json.dumps(solution_to_dict(sol), default=str)))
    assert np.allclose(back.z, sol.z)
    assert back.scenario == sol.scenario


def test_tampered_solution_is_rejected(desk_sweep):
    sol, _ = desk_sweep[3]
    data = json.loads(json.dumps(solution_to_dict(sol), default=str))
    key = next(k for k in data["state"] if k.startswith("f_ev"))
    data["state"][key] += 5.0
    with pytest.raises(VerificationError):
        solution_from_dict(data)


# ── 3. Report files ─────────────────────────────────────────────────────────

def test_emit_outputs_files(desk_sweep, tmp_path):
    out = emit_outputs(desk_sweep[2:4], tmp_path / "r", plots=True)
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3  # header + off + on
    for name in ("dlmp.csv", "paths_used.csv", "dominant_paths.csv"):
        assert (out / name).exists()
    assert (out / "stress-v2g-off" / "solution.json").exists()
    assert list(out.glob("*.svg"))


def test_emit_outputs_is_byte_identical(desk_sweep, tmp_path):
    a = emit_outputs(desk_sweep[2:4], tmp_path / "a")
    b = emit_outputs(desk_sweep[2:4], tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_rerun_is_reproducible(desk, tmp_path):
    sc = desk.scenarios["stress"]
    r1 = run_scenario(desk.transport, desk.feeder, sc, desk.ev, desk.market, k=desk.k)
    r2 = run_scenario(desk.transport, desk.feeder, sc, desk.ev, desk.market, k=desk.k)
    a = emit_outputs([r1], tmp_path / "a", plots=False)
    b = emit_outputs([r2], tmp_path / "b", plots=False)
    assert (a / "metrics.csv").read_text().split("solver_status")[0] == \
        (b / "metrics.csv").read_text().split("solver_status")[0]
    assert (a / "dlmp.csv").read_bytes() == (b / "dlmp.csv").read_bytes()


# ── 4. Command-line interface ─────────────────────────────────────────────────

def test_cli_solve_and_verify(tmp_path, capsys):
    out = tmp_path / "solve"
    rc = main(["solve", *DESK_ARGS, "--scenario", str(DESK / "stress.toml"), "--v2g", "on",
               "--out", str(out), "--no-plots"])
    assert rc == 0
    assert "stress-v2g-on" in capsys.readouterr().out
    assert (out / "metrics.csv").exists()
    assert main(["verify", str(out / "solution.json")]) == 0
    assert "OK" in capsys.readouterr().out


def test_cli_verify_rejects_tampered_file(tmp_path, desk_sweep):
    sol, _ = desk_sweep[1]
    data = json.loads(json.dumps(solution_to_dict(sol), default=str))
    key = next(k for k in data["state"] if k.startswith("w["))
    data["state"][key] += 1.0
    f = tmp_path / "bad.json"
    f.write_text(json.dumps(data))
    assert main(["verify", str(f)]) == 1


def test_cli_gen_paths(tmp_path):
    out = tmp_path / "paths.json"
    assert main(["gen-paths", "--net", str(DESK / "net.tntp"), "--trips", str(DESK / "trips.tntp"),
                 "--v2g", "off", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["ev"] and data["fv"]
    assert all(a["kind"] == "charge" for p in data["ev"] for a in p["actions"])


def test_cli_dump_mcp(tmp_path):
    out = tmp_path / "mcp.json"
    assert main(["dump-mcp", *DESK_ARGS, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["dimension"] > 0


def test_cli_sweep_subset(tmp_path, capsys):
    rc = main(["sweep", "--case", "desk", "--only", "base", "--out", str(tmp_path), "--no-plots",
               "--threads", "1"])
    assert rc == 0
    assert "2 runs" in capsys.readouterr().out
    assert len((tmp_path / "metrics.csv").read_text().strip().splitlines()) == 3


def test_cli_input_errors(tmp_path, capsys):
    missing = ["solve", "--net", str(tmp_path / "none.tntp"), "--trips", str(DESK / "trips.tntp"),
               "--feeder", str(DESK / "feeder.json"), "--params", str(DESK / "params.toml")]
    assert main(missing) == 2
    assert main(["solve", *DESK_ARGS, "--params", str(tmp_path / "none.toml")]) == 2
    assert main(["sweep", "--case", "desk", "--only", "nosuch", "--out", str(tmp_path)]) == 2
    capsys.readouterr()


# ── 5. V2G equivalence ──────────────────────────────────────────────────────

def test_v2g_is_inert_when_discharge_does_not_pay(desk_sweep):
    (_, off), (on_sol, on) = desk_sweep[0], desk_sweep[1]
    assert any(p.has_discharge for p in on_sol.problem.paths.ev)
    assert on.ev["v2g_share"] == pytest.approx(0.0, abs=1e-9)
    assert on.social_cost["total"] == pytest.approx(off.social_cost["total"], rel=1e-9)
    assert on.max_dlmp == pytest.approx(off.max_dlmp, abs=1e-9)
    for b in off.dlmp:
        assert on.dlmp[b] == pytest.approx(off.dlmp[b], abs=1e-8)


def test_without_discharge_paths_flags_are_equivalent(desk):
    sc = desk.scenarios["base"]
    # a post-discharge level too high for any discharge path leaves identical catalogs
    ev = replace(desk.ev, post_discharge_level=desk.ev.battery_capacity - 1e-3)
    off = run_scenario(desk.transport, desk.feeder, replace(sc, v2g=False), ev, desk.market, k=desk.k)
    on = run_scenario(desk.transport, desk.feeder, replace(sc, v2g=True), ev, desk.market, k=desk.k)
    assert not any(p.has_discharge for p in on[0].problem.paths.ev)
    assert np.allclose(off[0].z, on[0].z)
