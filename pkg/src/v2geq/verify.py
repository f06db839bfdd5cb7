"""Independent checks of a candidate equilibrium.

These functions rebuild flows, costs and balances from the problem data and
the named blocks of z rather than from the assembled matrices, so they catch
assembly mistakes as well as solver inaccuracy.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .paths import CHARGE, bpr_time, path_cost_ev, path_cost_fv, smoothed_wait

USED_FLOW = 1e-6  # path flows above this (veh/h) count as used


def named(instance, z):
    """{group: {key: value}} view of z using the instance catalog."""
    c = instance.catalog
    out = {}
    for g in c.groups():
        vals = z[c.slice(g)]
        out[g] = dict(zip(c.keys(g), (float(x) for x in vals)))
    return out


def _get(d, key, default=0.0):
    return d.get(key, default)


def link_flows(problem, f_ev, f_fv):
    """Arc flows (array) and station visits (dict) from path flows."""
    net, paths = problem.transport, problem.paths
    x = np.zeros(len(net.arcs))
    visits = defaultdict(float)
    for p, f in zip(paths.ev, f_ev):
        for a in p.arcs:
            x[a] += f
        for act in p.actions:
            visits[act.node] += f
    for p, f in zip(paths.fv, f_fv):
        for a in p.arcs:
            x[a] += f
    return x, dict(visits)


def energy_flows(problem, f_ev):
    """(EF+, EF-) per station in kW."""
    ef_p, ef_m = defaultdict(float), defaultdict(float)
    for p, f in zip(problem.paths.ev, f_ev):
        for act, e in zip(p.actions, p.energies):
            (ef_p if act.kind == CHARGE else ef_m)[act.node] += f * e
    return dict(ef_p), dict(ef_m)


def path_costs(problem, f_ev, f_fv, alpha_plus, alpha_minus, cap_price=None):
    """Generalised costs of every EV and FV path at the given flows and prices.

    ``cap_price`` (per station, $/kWh) adds the shadow price of the station
    power limit to each action, as a user facing the limit would perceive it.
    """
    net, ev = problem.transport, problem.ev
    x, visits = link_flows(problem, f_ev, f_fv)
    times = {k: float(bpr_time(a.free_flow_time, x[k], a.capacity, a.bpr_b, a.bpr_power))
             for k, a in enumerate(net.arcs)}
    waits = {}
    for n, st in net.stations.items():
        waits[n] = float(smoothed_wait(visits.get(n, 0.0), st.base_wait, st.congestion_rate,
                                       st.piles, net.period))
    prices = {n: (alpha_plus.get(n, 0.0), alpha_minus.get(n, 0.0)) for n in net.stations}
    cap_price = cap_price or {}
    c_ev = []
    for p in problem.paths.ev:
        c = path_cost_ev(p, times, waits, prices, ev)
        c += sum(e * cap_price.get(a.node, 0.0) for a, e in zip(p.actions, p.energies))
        c_ev.append(c)
    c_fv = [path_cost_fv(p, times, ev) for p in problem.paths.fv]
    return np.array(c_ev), np.array(c_fv)


def wardrop_report(instance, z):
    """Per-OD Wardrop diagnostics.

    Returns a list of dicts with the OD cost C (the demand-row multiplier),
    the worst relative deviation of a used path from C, and the largest
    relative amount by which any path undercuts C.
    """
    problem = instance.problem
    nz = named(instance, z)
    f_ev = np.array([nz["f_ev"][q] for q in range(len(problem.paths.ev))])
    f_fv = np.array([nz["f_fv"][q] for q in range(len(problem.paths.fv))])
    c_ev, c_fv = path_costs(problem, f_ev, f_fv, nz["alpha_plus"], nz["alpha_minus"],
                            nz["station_cap"])
    rows = []
    for cls, paths, flows, costs, grp in (("ev", problem.paths.ev, f_ev, c_ev, "C_ev"),
                                          ("fv", problem.paths.fv, f_fv, c_fv, "C_fv")):
        by_od = defaultdict(list)
        for p, f, c in zip(paths, flows, costs):
            by_od[p.od].append((f, c))
        for od, items in sorted(by_od.items()):
            C = nz[grp].get(od)
            if C is None:
                continue
            scale = 1.0 + abs(C)
            used = [abs(c - C) / scale for f, c in items if f > USED_FLOW]
            under = [max(0.0, C - c) / scale for _, c in items]
            rows.append({"class": cls, "od": od, "cost": C, "n_used": len(used),
                         "used_gap": max(used, default=0.0), "undercut": max(under, default=0.0),
                         "flow": float(sum(f for f, _ in items))})
    return rows


def wardrop_gap(instance, z):
    rows = wardrop_report(instance, z)
    return max((max(r["used_gap"], r["undercut"]) for r in rows), default=0.0)


def clearing_residuals(instance, z):
    """Market-clearing imbalances keyed by (price, location)."""
    problem = instance.problem
    nz = named(instance, z)
    net, feeder, market = problem.transport, problem.feeder, problem.market
    f_ev = [nz["f_ev"][q] for q in range(len(problem.paths.ev))]
    ef_p, ef_m = energy_flows(problem, f_ev)
    out = {}
    names = [f.name for f in market.lses]
    for i in feeder.non_root_buses:
        tot = -_get(nz["P_dso"], i)
        for f in names:
            tot += (_get(nz["sell"], (f, i)) + _get(nz["phi_plus"], (f, i))
                    - _get(nz["phi_minus"], (f, i)))
        for f in market.lses:
            tot -= sum(_get(nz["gen"], (f.name, g.bus)) for g in f.generators if g.bus == i)
        out[("w", i)] = tot
    for n in net.stations:
        if n in nz["p_plus"] or ef_p.get(n, 0.0):
            out[("alpha_plus", n)] = ef_p.get(n, 0.0) - _get(nz["p_plus"], n)
        if n in nz["p_minus"] or ef_m.get(n, 0.0):
            out[("alpha_minus", n)] = _get(nz["p_minus"], n) - ef_m.get(n, 0.0)
    plus_bus, minus_bus = defaultdict(float), defaultdict(float)
    for n, st in net.stations.items():
        plus_bus[st.bus] += _get(nz["p_plus"], n)
        minus_bus[st.bus] += _get(nz["p_minus"], n)
    for (f, i), v in nz["phi_plus"].items():
        plus_bus[i] -= v
    for (f, i), v in nz["phi_minus"].items():
        minus_bus[i] -= v
    for i, v in plus_bus.items():
        out[("M_plus", i)] = v
    for i, v in minus_bus.items():
        out[("M_minus", i)] = -v
    tso = defaultdict(float)
    for (f, i), v in nz["phi_tso"].items():
        tso[i] += v
    for i, v in nz["P_tso"].items():
        tso[i] -= v
    for i, v in tso.items():
        out[("m", i)] = v
    for f in market.lses:
        tot = sum(v for (g, _), v in nz["sell"].items() if g == f.name)
        tot -= sum(v for (g, _), v in nz["gen"].items() if g == f.name)
        tot += sum(v for (g, _), v in nz["phi_plus"].items() if g == f.name)
        tot -= sum(v for (g, _), v in nz["phi_minus"].items() if g == f.name)
        tot -= sum(v for (g, _), v in nz["phi_tso"].items() if g == f.name)
        out[("balance", f.name)] = tot
    return out


def clearing_residual(instance, z):
    r = clearing_residuals(instance, z)
    return max((abs(v) for v in r.values()), default=0.0)


def physics_residual(instance, z):
    """Largest violation of the linearised power-flow equalities: voltage drops,
    active balances and the voltage anchors."""
    problem = instance.problem
    feeder = problem.feeder
    nz = named(instance, z)
    U, p, q = nz["U"], nz["p_line"], nz["q_line"]
    res = []
    withdrawal = defaultdict(float)
    for ln in feeder.lines:
        res.append(U[ln.from_bus] - U[ln.to_bus]
                   - 2.0 * (ln.r * p[ln.id] + ln.x * q[ln.id]) / feeder.base_kva)
        withdrawal[ln.to_bus] += p[ln.id]
        withdrawal[ln.from_bus] -= p[ln.id]
    for i in feeder.non_root_buses:
        res.append(nz["P_dso"][i] - withdrawal[i])
    for head, _ in feeder.islands():
        res.append(U[head] - feeder.voltage_reference)
    return max((abs(r) for r in res), default=0.0)


def bound_violation(instance, z):
    """Largest violation of any primal bound or constraint row (generic)."""
    v = z[:instance.n]
    worst = 0.0
    lb = np.isfinite(instance.lower_v)
    if lb.any():
        worst = max(worst, float(np.max(instance.lower_v[lb] - v[lb], initial=0.0)))
    if instance.n_eq:
        worst = max(worst, float(np.max(np.abs(instance.B1 @ v - instance.b1))))
    if instance.n_ineq:
        worst = max(worst, float(np.max(instance.B2 @ v - instance.b2, initial=0.0)))
    return worst


def check_solution(instance, z, tol=1e-6):
    """All checks in one dict; ``ok`` is True when each is within ``tol``."""
    from .solver import natural_residual

    out = {"complementarity": natural_residual(instance, z),
           "feasibility": bound_violation(instance, z)}
    if instance.problem is not None:
        out["clearing"] = clearing_residual(instance, z)
        out["physics"] = physics_residual(instance, z)
        out["wardrop"] = wardrop_gap(instance, z)
    out["ok"] = all(v <= tol for v in out.values())
    return out
