"""Diagonalisation cross-check and warm starts.

The oracle alternates between two convex programs built straight from the
problem data (not from the assembled MCP):

* a traffic assignment in time units given the station energy prices -- a
  Beckmann program whose optimality conditions are the Wardrop conditions of
  both vehicle classes;
* a power-market program given the EV energy flows -- the Cournot potential
  of the load-serving entities plus the network operator's cost, subject to
  the feeder and clearing constraints.  Its multipliers are the prices.

Iterating the two to a fixed point gives the joint equilibrium whenever the
alternation converges, which it does on small, well-posed instances.  This is
slow and intended only for validation.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from scipy.optimize import root

from .paths import CHARGE
from .verify import energy_flows, link_flows, path_costs

_CLARABEL = dict(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12,
                 tol_ktratio=1e-10, max_iter=500)


_IDLE = 1e-7  # kW; stations below this energy flow are treated as unused


class OracleError(RuntimeError):
    pass


@dataclass
class OracleResult:
    converged: bool
    rounds: int
    f_ev: np.ndarray
    f_fv: np.ndarray
    arc_flows: np.ndarray
    od_cost: dict  # (class, od) -> $
    prices: dict  # group -> {key: value}, same group names as the assembled problem
    quantities: dict  # group -> {key: value}
    history: list = field(default_factory=list)


def _solve(prob, what):
    try:
        prob.solve(**_CLARABEL)
    except cp.error.SolverError as exc:
        raise OracleError(f"{what}: {exc}") from None
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise OracleError(f"{what} is {prob.status}")


def _stations_by_kind(problem):
    charge, discharge = set(), set()
    for p in problem.paths.ev:
        for a in p.actions:
            (charge if a.kind == CHARGE else discharge).add(a.node)
    return sorted(charge), sorted(discharge)


# ---------------------------------------------------------------------------
# Traffic side
# ---------------------------------------------------------------------------

def traffic_program(problem, alpha_plus, alpha_minus):
    """Beckmann assignment given energy prices; returns (f_ev, f_fv, od_cost, cap_price)."""
    net, ev, paths = problem.transport, problem.ev, problem.paths
    n_ev, n_fv = len(paths.ev), len(paths.fv)
    if not n_ev and not n_fv:
        return np.zeros(0), np.zeros(0), {}, {}
    f_ev = cp.Variable(n_ev, nonneg=True) if n_ev else None
    f_fv = cp.Variable(n_fv, nonneg=True) if n_fv else None
    arc_terms = defaultdict(list)
    st_terms = defaultdict(list)
    lin = []
    cap_terms = defaultdict(list)
    for q, p in enumerate(paths.ev):
        for a in p.arcs:
            arc_terms[a].append(f_ev[q])
        money = ev.degradation_cost * (p.charge_energy + p.discharge_energy)
        for act, e in zip(p.actions, p.energies):
            st_terms[act.node].append(f_ev[q])
            cap_terms[act.node].append(e * f_ev[q])
            if act.kind == CHARGE:
                money += e * alpha_plus.get(act.node, 0.0)
            else:
                money -= e * alpha_minus.get(act.node, 0.0)
        const = (p.charge_energy + p.discharge_energy) / ev.pile_power + money / ev.time_value_ev
        lin.append(const * f_ev[q])
    for q, p in enumerate(paths.fv):
        for a in p.arcs:
            arc_terms[a].append(f_fv[q])
    obj = [cp.sum(cp.hstack(lin))] if lin else []
    cons = []
    for k, terms in arc_terms.items():
        arc = net.arcs[k]
        x = cp.sum(cp.hstack(terms))
        obj.append(arc.free_flow_time * x)
        obj.append(arc.free_flow_time * arc.bpr_b * arc.capacity / (arc.bpr_power + 1)
                   * cp.power(x / arc.capacity, arc.bpr_power + 1))
    dt = net.period
    eps = 1.0 / dt
    for n, terms in st_terms.items():
        st = net.stations[n]
        x = cp.sum(cp.hstack(terms))
        a = cp.Variable(nonneg=True)
        b = cp.Variable(nonneg=True)
        cons += [a <= eps, a + b >= x * dt - st.piles]
        obj.append(st.base_wait * x)
        obj.append(st.congestion_rate / (2.0 * dt)
                   * (cp.power(a, 3) / 3.0 + eps * cp.square(b) + eps * eps * b))
    dem_rows = {}
    for cls, var, plist, col in (("ev", f_ev, paths.ev, 0), ("fv", f_fv, paths.fv, 1)):
        groups = defaultdict(list)
        for q, p in enumerate(plist):
            groups[p.od].append(var[q])
        for od, terms in sorted(groups.items()):
            c = -cp.sum(cp.hstack(terms)) <= -net.demands[od][col]
            dem_rows[(cls, od)] = c
            cons.append(c)
    cap_rows = {}
    for n, terms in cap_terms.items():
        c = cp.sum(cp.hstack(terms)) <= ev.pile_power * net.stations[n].piles
        cap_rows[n] = c
        cons.append(c)
    prob = cp.Problem(cp.Minimize(cp.sum(cp.hstack(obj))), cons)
    _solve(prob, "traffic assignment")
    w = {"ev": ev.time_value_ev, "fv": ev.time_value_fv}
    od_cost = {k: w[k[0]] * float(c.dual_value) for k, c in dem_rows.items()}
    cap_price = {n: ev.time_value_ev * float(c.dual_value) for n, c in cap_rows.items()}
    fe = np.maximum(np.asarray(f_ev.value, dtype=float), 0.0) if n_ev else np.zeros(0)
    ff = np.maximum(np.asarray(f_fv.value, dtype=float), 0.0) if n_fv else np.zeros(0)
    return _refine_traffic(problem, fe, ff, alpha_plus, alpha_minus, od_cost, cap_price)


def _refine_traffic(problem, f_ev, f_fv, alpha_plus, alpha_minus, od_cost, cap_price,
                    used_tol=1e-6):
    """Sharpen the conic solution by solving the equalisation conditions on
    the used paths: equal costs within each OD, demand met, binding station
    limits held at capacity.  Falls back to the input if this fails."""
    net, ev, paths = problem.transport, problem.ev, problem.paths
    n_ev = len(paths.ev)
    f0 = np.concatenate([f_ev, f_fv])
    plist = list(paths.ev) + list(paths.fv)
    used = [q for q in range(len(plist)) if f0[q] > used_tol]
    ods = sorted({("ev" if q < n_ev else "fv", plist[q].od) for q in used})
    binding = sorted(n for n, v in cap_price.items() if v > 1e-8)
    nu, no = len(used), len(ods)

    def unpack(x):
        f = np.zeros(len(plist))
        f[used] = x[:nu]
        C = dict(zip(ods, x[nu:nu + no]))
        cap = dict(cap_price)
        cap.update(zip(binding, x[nu + no:]))
        for n in cap:
            if n not in binding:
                cap[n] = 0.0
        return f, C, cap

    def residual(x):
        f, C, cap = unpack(x)
        c_ev, c_fv = path_costs(problem, f[:n_ev], f[n_ev:], alpha_plus, alpha_minus, cap)
        costs = np.concatenate([c_ev, c_fv])
        out = [costs[q] - C[("ev" if q < n_ev else "fv", plist[q].od)] for q in used]
        for cls, od in ods:
            idx = [q for q in used if ("ev" if q < n_ev else "fv") == cls and plist[q].od == od]
            out.append(f[idx].sum() - net.demands[od][0 if cls == "ev" else 1])
        for n in binding:
            load = sum(e * f[q] for q, p in enumerate(paths.ev)
                       for a, e in zip(p.actions, p.energies) if a.node == n)
            out.append(load - ev.pile_power * net.stations[n].piles)
        return np.array(out)

    x0 = np.concatenate([f0[used], [od_cost[k] for k in ods], [cap_price[n] for n in binding]])
    sol = root(residual, x0, method="hybr", options={"xtol": 1e-14})
    if not sol.success or np.max(np.abs(residual(sol.x)), initial=0.0) > 1e-9:
        return f_ev, f_fv, od_cost, cap_price
    f, C, cap = unpack(sol.x)
    if np.any(f < 0) or any(v < 0 for v in cap.values()):
        return f_ev, f_fv, od_cost, cap_price
    out_cost = dict(od_cost)
    out_cost.update(C)
    return f[:n_ev], f[n_ev:], out_cost, cap


# ---------------------------------------------------------------------------
# Power side
# ---------------------------------------------------------------------------

def power_program(problem, ef_plus, ef_minus):
    """Market and feeder program given EV energy flows; returns (prices, quantities)."""
    feeder, market, net = problem.feeder, problem.market, problem.transport
    bmap = feeder.bus_map
    root = feeder.tso_bus
    non_root = list(feeder.non_root_buses)
    names = [f.name for f in market.lses]
    charge, discharge = _stations_by_kind(problem)
    demand = [i for i in non_root if bmap[i].is_demand]
    tlo, thi = feeder.tso_active_bounds
    comp = feeder.tso_component()
    tso_buses = [] if (tlo == 0 and thi == 0) else [i for i in non_root if i in comp]

    pp = {n: cp.Variable(nonneg=True) for n in charge}
    pm = {n: cp.Variable(nonneg=True) for n in discharge}
    sell = {(f, i): cp.Variable(nonneg=True) for f in names for i in demand}
    gen = {(f.name, g.bus): cp.Variable(nonneg=True) for f in market.lses for g in f.generators}
    ch_bus = sorted({net.stations[n].bus for n in charge}, key=feeder.bus_ids.index)
    dis_bus = sorted({net.stations[n].bus for n in discharge}, key=feeder.bus_ids.index)
    phi_p = {(f, i): cp.Variable(nonneg=True) for f in names for i in ch_bus}
    phi_m = {(f, i): cp.Variable(nonneg=True) for f in names for i in dis_bus}
    phi_t = {(f, i): cp.Variable(nonneg=True) for f in names for i in tso_buses}
    P_tso = {i: cp.Variable() for i in tso_buses}
    P_dso = {i: cp.Variable() for i in non_root}
    U = {i: cp.Variable() for i in feeder.bus_ids}
    pl = {ln.id: cp.Variable() for ln in feeder.lines}
    ql = {ln.id: cp.Variable() for ln in feeder.lines}
    floor_buses = [i for i in demand if bmap[i].demand_floor > 0]
    LS = {i: cp.Variable(nonneg=True) for i in floor_buses}

    def total(xs):
        xs = list(xs)
        return cp.sum(cp.hstack(xs)) if xs else 0.0

    obj = []
    for i in demand:
        a_i, b_i = bmap[i].inverse_demand
        S = total(sell[(f, i)] for f in names)
        obj.append(-b_i * S - 0.5 * a_i * (cp.square(S) + total(cp.square(sell[(f, i)]) for f in names)))
    for f in market.lses:
        for g in f.generators:
            x = gen[(f.name, g.bus)]
            obj.append(g.d * cp.square(x) + g.e * x)
    obj += [market.shedding_penalty * x for x in LS.values()]
    obj += [feeder.wholesale_price * pl[ln.id] for ln in feeder.lines if ln.from_bus == root]
    obj += [-market.station(n).fee_charge * pp[n] for n in charge]
    obj += [-market.station(n).fee_discharge * pm[n] for n in discharge]

    rows = {}
    cons = []

    def add(key, c):
        rows[key] = c
        cons.append(c)

    for i in non_root:
        expr = -P_dso[i]
        for f in names:
            expr = expr + sell.get((f, i), 0.0) + phi_p.get((f, i), 0.0) - phi_m.get((f, i), 0.0)
        for (f, b), x in gen.items():
            if b == i:
                expr = expr - x
        add(("w", i), expr == 0)
    for n in charge:
        add(("alpha_plus", n), ef_plus.get(n, 0.0) - pp[n] == 0)
    for n in discharge:
        add(("alpha_minus", n), pm[n] - ef_minus.get(n, 0.0) == 0)
    for i in ch_bus:
        add(("M_plus", i), total(pp[n] for n in charge if net.stations[n].bus == i)
            - total(phi_p[(f, i)] for f in names) == 0)
    for i in dis_bus:
        add(("M_minus", i), -total(pm[n] for n in discharge if net.stations[n].bus == i)
            + total(phi_m[(f, i)] for f in names) == 0)
    for i in tso_buses:
        add(("m", i), total(phi_t[(f, i)] for f in names) - P_tso[i] == 0)
    for f in names:
        expr = (total(x for (g, _), x in sell.items() if g == f)
                - total(x for (g, _), x in gen.items() if g == f)
                + total(x for (g, _), x in phi_p.items() if g == f)
                - total(x for (g, _), x in phi_m.items() if g == f)
                - total(x for (g, _), x in phi_t.items() if g == f))
        add(("balance", f), expr == 0)
    # stations' net exchange limits
    for n in sorted(set(charge) | set(discharge)):
        lo, hi = market.station(n).net_bounds
        net_x = (pp[n] if n in pp else 0.0) - (pm[n] if n in pm else 0.0)
        if lo == hi:
            cons.append(net_x == hi)
        else:
            if hi < math.inf:
                cons.append(net_x <= hi)
            if lo > -math.inf:
                cons.append(net_x >= lo)
    # feeder: linearised flow
    withdrawal = defaultdict(lambda: 0.0)
    q_net = defaultdict(lambda: 0.0)
    for ln in feeder.lines:
        cons.append(U[ln.from_bus] - U[ln.to_bus]
                    == 2.0 * (ln.r * pl[ln.id] + ln.x * ql[ln.id]) / feeder.base_kva)
        withdrawal[ln.to_bus] = withdrawal[ln.to_bus] + pl[ln.id]
        withdrawal[ln.from_bus] = withdrawal[ln.from_bus] - pl[ln.id]
        q_net[ln.from_bus] = q_net[ln.from_bus] + ql[ln.id]
        q_net[ln.to_bus] = q_net[ln.to_bus] - ql[ln.id]
        if ln.rating < math.inf:
            cons += [cp.abs(pl[ln.id]) <= ln.rating, cp.abs(ql[ln.id]) <= ln.rating]
    for i in non_root:
        cons.append(P_dso[i] == withdrawal[i])
    wired = {ln.from_bus for ln in feeder.lines} | {ln.to_bus for ln in feeder.lines}
    for i in non_root:
        if i not in wired:
            continue
        qlo, qhi = bmap[i].q_bounds
        expr = bmap[i].q_load + q_net[i]
        if qlo == qhi:
            cons.append(expr == qlo)
        else:
            if qhi < math.inf:
                cons.append(expr <= qhi)
            if qlo > -math.inf:
                cons.append(expr >= qlo)
    heads = [h for h, _ in feeder.islands()]
    ulo, uhi = feeder.voltage_bounds
    for i in feeder.bus_ids:
        if i in heads:
            cons.append(U[i] == feeder.voltage_reference)
        else:
            if uhi < math.inf:
                cons.append(U[i] <= uhi)
            if ulo > -math.inf:
                cons.append(U[i] >= ulo)
    if tso_buses:
        imp = total(P_tso.values())
        if tlo == thi:
            cons.append(imp == thi)
        else:
            if thi < math.inf:
                cons.append(imp <= thi)
            if tlo > -math.inf:
                cons.append(imp >= tlo)
    root_q = [ql[ln.id] for ln in feeder.lines if ln.from_bus == root]
    if root_q:
        qlo, qhi = feeder.tso_reactive_bounds
        if qlo == qhi:
            cons.append(total(root_q) == qhi)
        else:
            if qhi < math.inf:
                cons.append(total(root_q) <= qhi)
            if qlo > -math.inf:
                cons.append(total(root_q) >= qlo)
    for (f, g), x in gen.items():
        unit = next(gg for ff in market.lses if ff.name == f for gg in ff.generators if gg.bus == g)
        if unit.p_max < math.inf:
            cons.append(x <= unit.p_max)
        if unit.p_min > 0:
            cons.append(x >= unit.p_min)
    for i in floor_buses:
        add(("floor", i), total(sell[(f, i)] for f in names) + LS[i] >= bmap[i].demand_floor)

    prob = cp.Problem(cp.Minimize(cp.sum(cp.hstack(obj))), cons)
    _solve(prob, "power market")
    prices = defaultdict(dict)
    for (grp, key), c in rows.items():
        prices[grp][key] = float(np.asarray(c.dual_value).item())
    val = lambda d: {k: float(x.value) for k, x in d.items()}  # noqa: E731
    # An unused station's price is only bounded by its bus price; pick the
    # bound, i.e. what the first unit of energy there would trade at.
    for n in charge:
        if ef_plus.get(n, 0.0) <= _IDLE:
            prices["alpha_plus"][n] = (prices["M_plus"][net.stations[n].bus]
                                       - market.station(n).fee_charge)
    for n in discharge:
        if ef_minus.get(n, 0.0) <= _IDLE:
            prices["alpha_minus"][n] = (prices["M_minus"][net.stations[n].bus]
                                        + market.station(n).fee_discharge)
    quantities = {"sell": val(sell), "gen": val(gen), "LS": val(LS), "P_dso": val(P_dso),
                  "U": val(U), "p_line": val(pl), "q_line": val(ql), "p_plus": val(pp),
                  "p_minus": val(pm), "ef_plus": dict(ef_plus), "ef_minus": dict(ef_minus)}
    return dict(prices), quantities


# ---------------------------------------------------------------------------
# Alternation
# ---------------------------------------------------------------------------

def diagonalize_oracle(problem, tol=1e-9, max_rounds=200, damping=1.0):
    """Alternate traffic and power programs until prices and flows settle."""
    alpha_p = {n: problem.feeder.wholesale_price for n in problem.transport.stations}
    alpha_m = dict(alpha_p)
    history = []
    f_prev = None
    theta = damping
    last = math.inf
    converged = False
    rnd = 0
    for rnd in range(1, max_rounds + 1):
        f_ev, f_fv, od_cost, cap_price = traffic_program(problem, alpha_p, alpha_m)
        ef_p, ef_m = energy_flows(problem, f_ev)
        prices, qty = power_program(problem, ef_p, ef_m)
        new_p = prices.get("alpha_plus", {})
        new_m = prices.get("alpha_minus", {})
        step = max([abs(new_p.get(n, alpha_p[n]) - alpha_p[n]) for n in alpha_p]
                   + [abs(new_m.get(n, alpha_m[n]) - alpha_m[n]) for n in alpha_m] + [0.0])
        if f_prev is not None:
            step = max(step, float(np.max(np.abs(f_ev - f_prev), initial=0.0)))
        history.append(step)
        if step <= tol:
            converged = True
            break
        if step > 0.9 * last:
            theta = max(0.5 * theta, 0.05)
        last = step
        for n, v in new_p.items():
            alpha_p[n] += theta * (v - alpha_p[n])
        for n, v in new_m.items():
            alpha_m[n] += theta * (v - alpha_m[n])
        f_prev = f_ev
    x, _ = link_flows(problem, f_ev, f_fv)
    prices["station_cap"] = cap_price
    return OracleResult(converged=converged, rounds=rnd, f_ev=f_ev, f_fv=f_fv, arc_flows=x,
                        od_cost=od_cost, prices=prices, quantities=qty, history=history)


def compare(instance, z, result, groups=("w", "alpha_plus", "alpha_minus", "M_plus", "M_minus",
                                         "sell", "gen", "LS", "P_dso", "U")):
    """Largest relative difference |a - b| / (1 + |b|) between an MCP point and
    the oracle over link flows, OD costs and the listed (unique) quantities."""
    from .verify import link_flows as lf, named

    nz = named(instance, z)
    problem = instance.problem
    f_ev = np.array([nz["f_ev"][q] for q in range(len(problem.paths.ev))])
    f_fv = np.array([nz["f_fv"][q] for q in range(len(problem.paths.fv))])
    x, _ = lf(problem, f_ev, f_fv)
    diffs = {"arc_flows": float(np.max(np.abs(x - result.arc_flows) / (1 + np.abs(result.arc_flows)),
                                       initial=0.0))}
    worst = 0.0
    for (cls, od), c in result.od_cost.items():
        grp = "C_ev" if cls == "ev" else "C_fv"
        worst = max(worst, abs(nz[grp].get(od, 0.0) - c) / (1 + abs(c)))
    diffs["od_cost"] = worst
    ef = {"alpha_plus": result.quantities.get("ef_plus", {}),
          "alpha_minus": result.quantities.get("ef_minus", {})}
    net = problem.transport
    bus_ef = {"M_plus": defaultdict(float), "M_minus": defaultdict(float)}
    for g, src in (("M_plus", ef["alpha_plus"]), ("M_minus", ef["alpha_minus"])):
        for n, v in src.items():
            bus_ef[g][net.stations[n].bus] += v
    ef.update(bus_ef)
    for g in groups:
        ref = result.prices.get(g, result.quantities.get(g, {}))
        d = 0.0
        for k, b in ref.items():
            if g in ef and ef[g].get(k, 0.0) <= _IDLE:
                continue  # price of an unused market is not unique
            a = nz.get(g, {}).get(k, 0.0)
            d = max(d, abs(a - b) / (1 + abs(b)))
        diffs[g] = d
    return max(diffs.values()), diffs


# ---------------------------------------------------------------------------
# Warm starts for the Newton solver
# ---------------------------------------------------------------------------

def warm_start(instance, prices=False):
    """Starting point with free-flow all-or-nothing traffic; optionally also
    uniform prices at the wholesale level and consistent station quantities."""
    problem, c = instance.problem, instance.catalog
    net, ev = problem.transport, problem.ev
    z = np.zeros(instance.dim)
    t0 = np.array([a.free_flow_time for a in net.arcs])
    price = problem.feeder.wholesale_price if prices else 0.0
    best = {}
    for cls, plist, grp, w in (("ev", problem.paths.ev, "f_ev", ev.time_value_ev),
                               ("fv", problem.paths.fv, "f_fv", ev.time_value_fv)):
        for q, p in enumerate(plist):
            cost = w * t0[list(p.arcs)].sum()
            for a, e in zip(p.actions, p.energies):
                cost += w * net.stations[a.node].base_wait + e * (w / ev.pile_power + ev.degradation_cost)
                cost += e * price if a.kind == CHARGE else -e * price
            key = (cls, p.od)
            if key not in best or cost < best[key][0]:
                best[key] = (cost, grp, q)
    for (cls, od), (cost, grp, q) in best.items():
        z[c.index(grp, q)] = net.demands[od][0 if cls == "ev" else 1]
        if prices:
            z[c.index("C_ev" if cls == "ev" else "C_fv", od)] = max(cost, 0.0)
    if prices:
        f_ev = z[c.slice("f_ev")]
        ef_p, ef_m = energy_flows(problem, f_ev)
        for n, v in ef_p.items():
            z[c.index("p_plus", n)] = v
        for n, v in ef_m.items():
            z[c.index("p_minus", n)] = v
        for g in ("w", "alpha_plus", "alpha_minus", "M_plus", "M_minus", "m", "balance"):
            z[c.slice(g)] = price
        z[c.slice("U")] = problem.feeder.voltage_reference
    return z
