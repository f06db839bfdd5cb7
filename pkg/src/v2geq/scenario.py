"""End-to-end scenario runs: solve, verify, measure and report.

A run applies a scenario (load scale, line outages, V2G flag, EV share) to the
base data, generates the path catalog, assembles and solves the joint
problem, re-verifies the answer and derives the reported metrics.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .assembly import CoupledProblem, assemble_mcp
from .network import (ModelError, ScenarioSpec, _load_mapping, apply_scenario,
                      apply_transport_scenario, feeder_from_dict, feeder_to_dict, load_feeder,
                      load_scenario, load_transport_tntp, params_from_mapping, params_to_mapping,
                      scenario_to_mapping, transport_from_dict, transport_to_dict)
from .paths import catalog_from_dict, generate_catalog
from .solver import SolverConfig, solve
from .verify import check_solution, link_flows, named, path_costs

ACTIVE_FLOW = 1e-6  # veh/h; an OD "actively discharges" above this discharge-path flow
VERIFY_TOL = {"complementarity": 1e-6, "feasibility": 1e-6, "clearing": 1e-8,
              "physics": 1e-8, "wardrop": 1e-4}


class SolverFailure(RuntimeError):
    """The solver did not reach the tolerance; carries the report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class VerificationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

DATA_DIR = Path(__file__).resolve().parent / "data"
SCENARIO_ORDER = ("base", "stress", "island")


@dataclass(frozen=True)
class Case:
    transport: object
    feeder: object
    ev: object
    market: object
    scenarios: dict  # name -> ScenarioSpec, in sweep order
    k: int = 10


def load_case(net, trips, feeder, params, scenarios=()):
    """Read a case from files.  ``params`` is TOML/JSON with [transport]
    (the TNTP sidecar), [ev] and [market] tables and an optional top-level
    ``k`` (paths per OD)."""
    data = _load_mapping(params)
    transport = load_transport_tntp(net, trips, data.get("transport", {}))
    ev, market = params_from_mapping(data)
    specs = {}
    for src in scenarios:
        sc = load_scenario(src)
        specs[sc.name] = sc
    return Case(transport, load_feeder(feeder), ev, market, specs, int(data.get("k", 10)))


def case_files(directory):
    """(net, trips, feeder, params, scenario files) found in a case directory."""
    d = Path(directory)

    def one(pattern):
        hits = sorted(d.glob(pattern))
        if len(hits) != 1:
            raise ModelError(f"expected one file matching {pattern!r}, found {len(hits)}", str(d))
        return hits[0]

    scen = [d / f"{n}.toml" for n in SCENARIO_ORDER if (d / f"{n}.toml").exists()]
    return one("*net.tntp"), one("*trips.tntp"), one("*.json"), one("params.toml"), scen


def bundled_case(name):
    """Load one of the shipped cases (``desk``, ``sioux_falls``, ``rerouting``)."""
    d = DATA_DIR / name
    if not d.is_dir():
        known = sorted(p.name for p in DATA_DIR.iterdir() if p.is_dir())
        raise ModelError(f"unknown case {name!r}; shipped cases: {', '.join(known)}", "case")
    return load_case(*case_files(d))


# ---------------------------------------------------------------------------
# Solution
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumSolution:
    """A verified equilibrium with named accessors.  Construction re-runs the
    independent checks and raises VerificationError if any fails."""

    problem: CoupledProblem
    instance: object
    z: np.ndarray
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    report: object = None
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.checks = check_solution(self.instance, self.z)
        bad = {k: v for k, v in self.checks.items() if k in VERIFY_TOL and not v <= VERIFY_TOL[k]}
        if bad:
            raise VerificationError("solution fails verification: "
                                    + ", ".join(f"{k}={v:.2e}" for k, v in sorted(bad.items())))
        self._named = named(self.instance, self.z)

    # -- accessors ---------------------------------------------------------
    def group(self, name):
        return dict(self._named.get(name, {}))

    @property
    def ev_flows(self):
        return np.array([self._named["f_ev"][q] for q in range(len(self.problem.paths.ev))])

    @property
    def fv_flows(self):
        return np.array([self._named["f_fv"][q] for q in range(len(self.problem.paths.fv))])

    @property
    def arc_flows(self):
        return link_flows(self.problem, self.ev_flows, self.fv_flows)[0]

    @property
    def station_visits(self):
        return link_flows(self.problem, self.ev_flows, self.fv_flows)[1]

    @property
    def station_power(self):
        """{node: (p+, p-)} in kW; round-off below the zero bound is reported as 0."""
        pp, pm = self.group("p_plus"), self.group("p_minus")
        return {n: (max(pp.get(n, 0.0), 0.0), max(pm.get(n, 0.0), 0.0))
                for n in sorted(self.problem.transport.stations)}

    @property
    def prices(self):
        return {g: self.group(g) for g in ("w", "alpha_plus", "alpha_minus", "M_plus", "M_minus", "m")}

    @property
    def od_costs(self):
        return {"ev": self.group("C_ev"), "fv": self.group("C_fv")}

    @property
    def load_shedding(self):
        """{bus: LS} in kW; round-off below the zero bound is reported as 0."""
        return {k: max(v, 0.0) for k, v in self.group("LS").items()}

    @property
    def voltages(self):
        return self.group("U")

    @property
    def line_flows(self):
        return {k: (v, self._named["q_line"][k]) for k, v in self._named["p_line"].items()}

    def labelled(self):
        """{label: value} over the whole state vector."""
        return dict(zip(self.instance.labels(), (float(x) for x in self.z)))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    scenario: str
    v2g: bool
    max_dlmp: float
    dlmp: dict
    total_ls: float
    social_cost: dict
    ev: dict
    dominant_paths: list
    station_net_load: dict
    supply: dict
    solver: dict

    @property
    def run_id(self):
        return f"{self.scenario}-v2g-{'on' if self.v2g else 'off'}"

    def row(self):
        """Flat record for metrics.csv."""
        out = {"scenario": self.scenario, "v2g": "on" if self.v2g else "off",
               "max_dlmp": self.max_dlmp, "total_ls_kw": self.total_ls}
        out.update({f"cost_{k}": v for k, v in self.social_cost.items()})
        out.update({k: v for k, v in self.ev.items()})
        out.update({f"supply_{k}": v for k, v in self.supply.items()})
        out.update({"solver_status": self.solver["status"], "solver_residual": self.solver["residual"],
                    "solver_iterations": self.solver["iterations"]})
        return out


def compute_dlmp(solution):
    """Bus prices w_i ($/kWh); the TSO bus trades at the wholesale price."""
    feeder = solution.problem.feeder
    w = solution.group("w")
    out = {feeder.tso_bus: feeder.wholesale_price}
    for i in feeder.non_root_buses:
        out[i] = w[i]
    return {i: out[i] for i in feeder.bus_ids}


def _travel_components(solution):
    """Per-path time and money components at the solution."""
    pb = solution.problem
    net = pb.transport
    f_ev, f_fv = solution.ev_flows, solution.fv_flows
    x, visits = link_flows(pb, f_ev, f_fv)
    zero = {n: 0.0 for n in net.stations}
    # costs without prices give the time part; with prices minus that gives energy
    c_time, c_fv = path_costs(pb, f_ev, f_fv, zero, zero)
    prices = solution.prices
    c_full, _ = path_costs(pb, f_ev, f_fv, prices["alpha_plus"], prices["alpha_minus"])
    return c_time, c_fv, c_full


def compute_social_cost(solution):
    """Operational social cost ($ per period), price transfers excluded.

    generation: sum of d g^2 + e g; import: wholesale price times power drawn
    from the TSO bus; travel_time: value of driving, waiting and plug-in time
    of all vehicles; degradation: c_deg times gross energy moved through
    batteries at stations; shedding: rho times total load shed.
    """
    pb = solution.problem
    ev, market, feeder = pb.ev, pb.market, pb.feeder
    gen = solution.group("gen")
    generation = 0.0
    for f in market.lses:
        for g in f.generators:
            q = gen[(f.name, g.bus)]
            generation += g.d * q * q + g.e * q
    p_line = solution.group("p_line")
    imported = sum(p_line[ln.id] for ln in feeder.lines if ln.from_bus == feeder.tso_bus)
    f_ev, f_fv = solution.ev_flows, solution.fv_flows
    c_time, c_fv, _ = _travel_components(solution)
    degr = np.array([ev.degradation_cost * (p.charge_energy + p.discharge_energy) for p in pb.paths.ev])
    travel = float(f_ev @ (c_time - degr)) + float(f_fv @ c_fv) if len(f_ev) or len(f_fv) else 0.0
    degradation = float(f_ev @ degr) if len(f_ev) else 0.0
    shedding = market.shedding_penalty * sum(solution.load_shedding.values())
    parts = {"generation": generation, "import": feeder.wholesale_price * imported,
             "travel_time": travel, "degradation": degradation, "shedding": shedding}
    parts["total"] = sum(parts.values())
    return parts


def report_ev_behavior(solution):
    """EV statistics and the dominant path of each OD."""
    pb = solution.problem
    ev, paths = pb.ev, pb.paths
    f = solution.ev_flows
    demand = sum(pb.transport.demands[od][0] for od in pb.transport.od_pairs())
    visiting = sum(q for p, q in zip(paths.ev, f) if p.actions)
    v2g = sum(q for p, q in zip(paths.ev, f) if p.has_discharge)
    visits = solution.station_visits
    from .paths import smoothed_wait

    waits = {n: float(smoothed_wait(visits.get(n, 0.0), st.base_wait, st.congestion_rate,
                                    st.piles, pb.transport.period))
             for n, st in pb.transport.stations.items()}
    dwell = 0.0
    for p, q in zip(paths.ev, f):
        for a, e in zip(p.actions, p.energies):
            dwell += q * (waits[a.node] + e / ev.pile_power)
    active = defaultdict(float)
    for p, q in zip(paths.ev, f):
        if p.has_discharge:
            active[p.od] += q
    power = solution.station_power
    stats = {
        "visitation_share": visiting / demand if demand > 0 else 0.0,
        "v2g_share": v2g / demand if demand > 0 else 0.0,
        "gross_charge_kwh": sum(p for p, _ in power.values()),
        "gross_discharge_kwh": sum(m for _, m in power.values()),
        "dwell_hours": dwell,
        "active_discharge_ods": sum(1 for v in active.values() if v > ACTIVE_FLOW),
    }
    stats["visitation_share"] = min(max(stats["visitation_share"], 0.0), 1.0)
    stats["v2g_share"] = min(max(stats["v2g_share"], 0.0), 1.0)
    # plain floats for the reports; "+ 0.0" turns a rounding -0.0 into 0.0
    stats = {k: v if isinstance(v, int) else float(v) + 0.0 for k, v in stats.items()}
    return stats, dominant_paths(solution)


def dominant_paths(solution):
    """Largest-flow EV path per OD with its cost split into time and energy."""
    pb = solution.problem
    f = solution.ev_flows
    c_time, _, c_full = _travel_components(solution)
    best = {}
    for q, p in enumerate(pb.paths.ev):
        if p.od not in best or f[q] > f[best[p.od]] + 1e-12:
            best[p.od] = q
    rows = []
    for od, q in sorted(best.items()):
        p = pb.paths.ev[q]
        # the price-free cost still carries battery wear, which belongs to energy
        time_cost = float(c_time[q]) - pb.ev.degradation_cost * (p.charge_energy + p.discharge_energy)
        rows.append({"od": od, "path": p.label(), "pattern": p.pattern, "flow": float(f[q]),
                     "distance_km": p.distance, "time_cost": time_cost,
                     "energy_cost": float(c_full[q]) - time_cost, "total_cost": float(c_full[q])})
    return rows


def _metrics(solution, report):
    pb = solution.problem
    dlmp = compute_dlmp(solution)
    ev_stats, dominant = report_ev_behavior(solution)
    power = solution.station_power
    gen = sum(solution.group("gen").values())
    p_line = solution.group("p_line")
    imported = sum(p_line[ln.id] for ln in pb.feeder.lines if ln.from_bus == pb.feeder.tso_bus)
    supply = {"generation_kw": float(gen), "import_kw": float(imported),
              "v2g_kw": ev_stats["gross_discharge_kwh"]}
    return MetricsReport(
        scenario=solution.scenario.name, v2g=solution.scenario.v2g,
        max_dlmp=max(dlmp.values()), dlmp=dlmp,
        total_ls=float(sum(solution.load_shedding.values())),
        social_cost=compute_social_cost(solution), ev=ev_stats, dominant_paths=dominant,
        station_net_load={n: pm_pp[0] - pm_pp[1] for n, pm_pp in power.items()},
        supply=supply,
        solver={"status": report.status, "residual": report.residual,
                "iterations": report.iterations, "wall_time": report.wall_time,
                "start": report.start})


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def build_problem(transport, feeder, scenario, ev, market, k=10):
    """Apply the scenario and generate the path catalog."""
    feeder_s = apply_scenario(feeder, scenario)
    transport_s = apply_transport_scenario(transport, scenario)
    catalog = generate_catalog(transport_s, ev, k=k, v2g=scenario.v2g)
    return CoupledProblem(transport_s, feeder_s, ev, market, catalog)


def unsupplied_islands(problem):
    """Heads of islands that host stations but have neither generation nor
    access to the TSO bus."""
    feeder = problem.feeder
    gen_buses = {g.bus for f in problem.market.lses for g in f.generators}
    station_buses = {st.bus for st in problem.transport.stations.values()}
    out = []
    for head, buses in feeder.islands()[1:]:
        bs = set(buses)
        if bs & station_buses and not bs & gen_buses:
            out.append(head)
    return out


def run_scenario(transport, feeder, scenario, ev, market, config=None, k=10):
    """Full pipeline for one scenario; returns (EquilibriumSolution, MetricsReport).

    Raises SolverFailure when no start reaches the tolerance.
    """
    problem = build_problem(transport, feeder, scenario, ev, market, k)
    instance = assemble_mcp(problem)
    z, report = solve(instance, config or SolverConfig())
    if not report.ok:
        msg = f"scenario {scenario.name!r} (v2g {'on' if scenario.v2g else 'off'}): " \
              f"solver {report.status}, residual {report.residual:.2e}"
        if report.message:
            msg += f"; {report.message}"
        islands = unsupplied_islands(problem)
        if islands:
            msg += "; island(s) without any supply: " + ", ".join(islands)
        raise SolverFailure(msg, report)
    solution = EquilibriumSolution(problem, instance, z, scenario, report)
    return solution, _metrics(solution, report)


def run_sweep(transport, feeder, scenarios, ev, market, config=None, k=10, threads=None):
    """Run every scenario with V2G off and on, concurrently.

    Results come back in input order (scenario, then off before on) regardless
    of completion order.  ``threads`` defaults to $V2GEQ_THREADS or the CPU count.
    """
    if threads is None:
        threads = int(os.environ.get("V2GEQ_THREADS", "0")) or os.cpu_count() or 1
    jobs = [replace(s, v2g=flag) for s in scenarios for flag in (False, True)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(run_scenario, transport, feeder, s, ev, market, config, k) for s in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def solution_to_dict(solution):
    """Inputs (after the scenario is applied), path catalog and full state."""
    pb = solution.problem
    return {
        "scenario": scenario_to_mapping(solution.scenario),
        "inputs": {"transport": transport_to_dict(pb.transport), "feeder": feeder_to_dict(pb.feeder),
                   "params": params_to_mapping(pb.ev, pb.market), "paths": pb.paths.to_dict()},
        "solver": solution.report.to_dict() if solution.report is not None else None,
        "checks": {k: (bool(v) if k == "ok" else float(v)) for k, v in solution.checks.items()},
        "state": solution.labelled(),
    }


def solution_from_dict(data):
    """Rebuild and re-verify a solution written by :func:`solution_to_dict`."""
    inp = data["inputs"]
    transport = transport_from_dict(inp["transport"])
    feeder = feeder_from_dict(inp["feeder"])
    ev, market = params_from_mapping(inp["params"])
    paths = catalog_from_dict(inp["paths"], transport)
    problem = CoupledProblem(transport, feeder, ev, market, paths)
    instance = assemble_mcp(problem)
    state = data["state"]
    labels = instance.labels()
    missing = [lb for lb in labels if lb not in state]
    if missing:
        raise ModelError(f"state lacks {len(missing)} entries, e.g. {missing[0]}", "solution")
    z = np.array([float(state[lb]) for lb in labels])
    sc = data.get("scenario", {})
    scenario = ScenarioSpec(name=sc.get("name", "scenario"), load_scale=sc.get("load_scale", 1.0),
                            outages=tuple(tuple(p) for p in sc.get("outages", ())),
                            v2g=sc.get("v2g", True), ev_share=sc.get("ev_share"))
    return EquilibriumSolution(problem, instance, z, scenario)


def _csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, tuple):
        return "-".join(map(str, v))
    return v


def _write(path, text):
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from None


def emit_outputs(results, out_dir, plots=True):
    """Write reports for one or more (solution, metrics) pairs.

    metrics.csv has one row per run; dlmp.csv and paths_used.csv are in long
    form keyed by scenario and V2G flag.  A single run writes solution.json
    at the top level, several runs write <run-id>/solution.json.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from None
    results = list(results)
    rows = [m.row() for _, m in results]
    fields = list(rows[0]) if rows else []
    _write(out / "metrics.csv", _csv_text(rows, fields))
    dl = [{"scenario": m.scenario, "v2g": "on" if m.v2g else "off", "bus": b, "dlmp": v}
          for _, m in results for b, v in m.dlmp.items()]
    _write(out / "dlmp.csv", _csv_text(dl, ["scenario", "v2g", "bus", "dlmp"]))
    used = []
    for sol, m in results:
        for p, q in zip(sol.problem.paths.ev, sol.ev_flows):
            if q > ACTIVE_FLOW:
                used.append({"scenario": m.scenario, "v2g": "on" if m.v2g else "off", "class": "ev",
                             "od": p.od, "path": p.label(), "pattern": p.pattern,
                             "distance_km": p.distance, "flow": float(q)})
        for p, q in zip(sol.problem.paths.fv, sol.fv_flows):
            if q > ACTIVE_FLOW:
                used.append({"scenario": m.scenario, "v2g": "on" if m.v2g else "off", "class": "fv",
                             "od": p.od, "path": p.label(), "pattern": p.pattern,
                             "distance_km": p.distance, "flow": float(q)})
    _write(out / "paths_used.csv", _csv_text(
        used, ["scenario", "v2g", "class", "od", "path", "pattern", "distance_km", "flow"]))
    dom = [dict(r, scenario=m.scenario, v2g="on" if m.v2g else "off") for _, m in results
           for r in m.dominant_paths]
    _write(out / "dominant_paths.csv", _csv_text(
        dom, ["scenario", "v2g", "od", "path", "pattern", "flow", "distance_km", "time_cost",
              "energy_cost", "total_cost"]))
    for sol, m in results:
        target = out if len(results) == 1 else out / m.run_id
        target.mkdir(parents=True, exist_ok=True)
        _write(target / "solution.json", json.dumps(solution_to_dict(sol), indent=1, default=str))
    if plots and results:
        from .plots import write_plots

        write_plots([m for _, m in results], out)
    return out
