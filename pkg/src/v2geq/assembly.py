"""Assembly of the joint equilibrium into one mixed complementarity problem.

Unknowns are z = [v; lam; mu] where v collects every player's decisions,
lam the free multipliers of equality rows (prices among them) and mu >= 0 the
multipliers of inequality rows.  The problem is

    0 <= v - l  _|_  H(v) + B1' lam + B2' mu >= 0   (l = 0 or -inf per entry)
    b1 - B1 v = 0                                  (lam free)
    0 <= mu     _|_  b2 - B2 v >= 0.

Market-clearing rows are written so that their multipliers *are* the prices
(wheeling fee w, station prices M, TSO-LSE price m and EV prices alpha), and
each price appears in every player's stationarity row through B1' lam.

H(v) = h0 + Hlin v + diag(weights) L' tau(L v), where L maps path flows to arc
and station flows and tau holds the BPR link times and station waits.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .paths import CHARGE

INF = math.inf


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

class VariableCatalog:
    """Named, contiguous index ranges for primal variables, equality rows
    (free multipliers) and inequality rows (nonnegative multipliers)."""

    SECTIONS = ("primal", "eq", "ineq")

    def __init__(self):
        self._groups = {s: [] for s in self.SECTIONS}
        self._where = {}
        self._frozen = False

    def add(self, section, name, keys, lower=0.0):
        if self._frozen:
            raise AssemblyError("catalog is frozen")
        if name in self._where:
            raise AssemblyError(f"duplicate group {name}")
        keys = list(keys)
        if len(set(keys)) != len(keys):
            raise AssemblyError(f"duplicate keys in group {name}")
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (len(keys),)).copy()
        self._groups[section].append([name, keys, lower, 0])
        self._where[name] = section
        return name

    def freeze(self):
        off = 0
        self._offset = {}
        for s in self.SECTIONS:
            self._offset[s] = off
            for g in self._groups[s]:
                g[3] = off
                off += len(g[1])
        self.n_primal = sum(len(g[1]) for g in self._groups["primal"])
        self.n_eq = sum(len(g[1]) for g in self._groups["eq"])
        self.n_ineq = sum(len(g[1]) for g in self._groups["ineq"])
        self.dim = off
        self._key_index = {g[0]: {k: j for j, k in enumerate(g[1])}
                           for s in self.SECTIONS for g in self._groups[s]}
        self._group = {g[0]: g for s in self.SECTIONS for g in self._groups[s]}
        self._frozen = True
        return self

    # -- lookups -----------------------------------------------------------
    def has(self, name):
        return name in self._where

    def section(self, name):
        return self._where[name]

    def keys(self, name):
        return self._group[name][1] if name in self._where else []

    def size(self, name):
        return len(self._group[name][1]) if name in self._where else 0

    def slice(self, name):
        g = self._group[name]
        return slice(g[3], g[3] + len(g[1]))

    def index(self, name, key):
        return self._group[name][3] + self._key_index[name][key]

    def find(self, name, key):
        if name not in self._where or key not in self._key_index[name]:
            return None
        return self.index(name, key)

    def row(self, name, key):
        """Row number inside B1 (equality groups) or B2 (inequality groups)."""
        return self.index(name, key) - self._offset[self._where[name]]

    def groups(self, section=None):
        secs = self.SECTIONS if section is None else (section,)
        return [g[0] for s in secs for g in self._groups[s]]

    def lower(self):
        out = np.full(self.dim, -INF)
        for g in self._groups["primal"]:
            out[g[3]:g[3] + len(g[1])] = g[2]
        for g in self._groups["ineq"]:
            out[g[3]:g[3] + len(g[1])] = 0.0
        return out

    def labels(self):
        out = []
        for s in self.SECTIONS:
            for name, keys, _, _ in self._groups[s]:
                out.extend(f"{name}[{_fmt_key(k)}]" for k in keys)
        return out

    def locate(self, k):
        """(group, key) for z-index ``k``."""
        for s in self.SECTIONS:
            for name, keys, _, off in self._groups[s]:
                if off <= k < off + len(keys):
                    return name, keys[k - off]
        raise IndexError(k)

    def to_dict(self):
        return {s: [{"name": n, "offset": off, "size": len(keys),
                     "keys": [_fmt_key(k) for k in keys]}
                    for n, keys, _, off in self._groups[s]] for s in self.SECTIONS}


def _fmt_key(k):
    if isinstance(k, tuple):
        return ",".join(str(x) for x in k)
    return str(k)


# ---------------------------------------------------------------------------
# Problem container and derived index sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledProblem:
    transport: object  # TransportNetwork
    feeder: object  # PowerFeeder
    ev: object  # EvParams
    market: object  # MarketParams
    paths: object  # PathCatalog

    def __post_init__(self):
        self.market.check_against(self.feeder, self.transport)


@dataclass
class _Sets:
    charge_stations: list
    discharge_stations: list
    charge_buses: list
    discharge_buses: list
    non_root: list
    tso_buses: list
    demand_buses: list
    floor_buses: list
    anchors: list
    action_stations: list
    ev_ods: list
    fv_ods: list


def derive_sets(problem):
    net, feeder, paths = problem.transport, problem.feeder, problem.paths
    charge, discharge = set(), set()
    for p in paths.ev:
        for a in p.actions:
            (charge if a.kind == CHARGE else discharge).add(a.node)
    st = net.stations
    charge_buses = sorted({st[n].bus for n in charge}, key=_bus_order(feeder))
    discharge_buses = sorted({st[n].bus for n in discharge}, key=_bus_order(feeder))
    non_root = list(feeder.non_root_buses)
    tso_lo, tso_hi = feeder.tso_active_bounds
    if tso_lo == 0 and tso_hi == 0:
        tso_buses = []
    else:
        comp = feeder.tso_component()
        tso_buses = [b for b in non_root if b in comp]
    bmap = feeder.bus_map
    demand = [b for b in non_root if bmap[b].is_demand]
    floor = [b for b in demand if bmap[b].demand_floor > 0]
    anchors = [head for head, _ in feeder.islands()]
    ev_ods = [od for od in net.od_pairs() if net.demands[od][0] > 0]
    fv_ods = [od for od in net.od_pairs() if net.demands[od][1] > 0]
    return _Sets(sorted(charge), sorted(discharge), charge_buses, discharge_buses, non_root,
                 tso_buses, demand, floor, anchors, sorted(charge | discharge), ev_ods, fv_ods)


def _bus_order(feeder):
    order = {b: k for k, b in enumerate(feeder.bus_ids)}
    return order.__getitem__


def _pinched(lo, hi):
    return lo == hi


def build_catalog(problem):
    """Declare every variable and row of the joint problem."""
    s = derive_sets(problem)
    feeder, market = problem.feeder, problem.market
    cat = VariableCatalog()
    P, E, I = "primal", "eq", "ineq"
    # -- primal ----------------------------------------------------------
    cat.add(P, "p_plus", s.charge_stations)
    cat.add(P, "p_minus", s.discharge_stations)
    cat.add(P, "f_ev", range(len(problem.paths.ev)))
    cat.add(P, "f_fv", range(len(problem.paths.fv)))
    cat.add(P, "P_dso", s.non_root, -INF)
    cat.add(P, "P_tso", s.tso_buses, -INF)
    cat.add(P, "U", feeder.bus_ids, -INF)
    line_ids = [ln.id for ln in feeder.lines]
    cat.add(P, "p_line", line_ids, -INF)
    cat.add(P, "q_line", line_ids, -INF)
    cat.add(P, "sell", [(f.name, i) for f in market.lses for i in s.demand_buses])
    cat.add(P, "gen", [(f.name, g.bus) for f in market.lses for g in f.generators])
    cat.add(P, "phi_plus", [(f.name, i) for f in market.lses for i in s.charge_buses])
    cat.add(P, "phi_minus", [(f.name, i) for f in market.lses for i in s.discharge_buses])
    cat.add(P, "phi_tso", [(f.name, i) for f in market.lses for i in s.tso_buses])
    cat.add(P, "LS", s.floor_buses)
    # -- equality rows: prices first ---------------------------------------
    cat.add(E, "w", s.non_root)
    cat.add(E, "alpha_plus", s.charge_stations)
    cat.add(E, "alpha_minus", s.discharge_stations)
    cat.add(E, "M_plus", s.charge_buses)
    cat.add(E, "M_minus", s.discharge_buses)
    cat.add(E, "m", s.tso_buses)
    cat.add(E, "vdrop", line_ids)
    cat.add(E, "pbal", s.non_root)
    cat.add(E, "vref", s.anchors)
    bmap = feeder.bus_map
    # a bus without lines (single-bus island) has no reactive balance unknowns
    wired = {ln.from_bus for ln in feeder.lines} | {ln.to_bus for ln in feeder.lines}
    cat.add(E, "qbal_eq", [i for i in s.non_root if i in wired and _pinched(*bmap[i].q_bounds)])
    tlo, thi = feeder.tso_active_bounds
    cat.add(E, "tso_eq", ["tso"] if s.tso_buses and _pinched(tlo, thi) else [])
    qlo, qhi = feeder.tso_reactive_bounds
    root_lines = [ln.id for ln in feeder.lines if ln.from_bus == feeder.tso_bus]
    cat.add(E, "qtso_eq", ["tso"] if root_lines and _pinched(qlo, qhi) else [])
    cat.add(E, "fcs_eq", [n for n in s.action_stations if _pinched(*market.station(n).net_bounds)])
    cat.add(E, "balance", [f.name for f in market.lses])
    # -- inequality rows -----------------------------------------------------
    up, lo = [], []
    for n in s.action_stations:
        blo, bhi = market.station(n).net_bounds
        if _pinched(blo, bhi):
            continue
        has_p, has_m = n in s.charge_stations, n in s.discharge_stations
        # drop rows already implied by p+, p- >= 0
        if bhi < INF and (has_p or bhi < 0):
            up.append(n)
        if blo > -INF and (has_m or blo > 0):
            lo.append(n)
    cat.add(I, "fcs_up", up)
    cat.add(I, "fcs_lo", lo)
    cat.add(I, "C_ev", s.ev_ods)
    cat.add(I, "C_fv", s.fv_ods)
    cat.add(I, "station_cap", s.action_stations)
    finite = [ln.id for ln in feeder.lines if ln.rating < INF]
    cat.add(I, "pl_up", finite)
    cat.add(I, "pl_lo", finite)
    cat.add(I, "ql_up", finite)
    cat.add(I, "ql_lo", finite)
    ulo, uhi = feeder.voltage_bounds
    free_u = [b for b in feeder.bus_ids if b not in s.anchors]
    cat.add(I, "U_up", free_u if uhi < INF else [])
    cat.add(I, "U_lo", free_u if ulo > -INF else [])
    pinched_t = _pinched(tlo, thi)
    cat.add(I, "tso_up", ["tso"] if s.tso_buses and not pinched_t and thi < INF else [])
    cat.add(I, "tso_lo", ["tso"] if s.tso_buses and not pinched_t and tlo > -INF else [])
    corridor = [i for i in s.non_root if i in wired and not _pinched(*bmap[i].q_bounds)]
    cat.add(I, "qbal_up", [i for i in corridor if bmap[i].q_bounds[1] < INF])
    cat.add(I, "qbal_lo", [i for i in corridor if bmap[i].q_bounds[0] > -INF])
    pinched_q = _pinched(qlo, qhi)
    cat.add(I, "qtso_up", ["tso"] if root_lines and not pinched_q and qhi < INF else [])
    cat.add(I, "qtso_lo", ["tso"] if root_lines and not pinched_q and qlo > -INF else [])
    cat.add(I, "gen_up", [(f.name, g.bus) for f in market.lses for g in f.generators
                          if g.p_max < INF and g.p_max != g.p_min])
    cat.add(I, "gen_lo", [(f.name, g.bus) for f in market.lses for g in f.generators
                          if g.p_min > 0 and g.p_max != g.p_min])
    cat.add(E, "gen_eq", [(f.name, g.bus) for f in market.lses for g in f.generators
                          if g.p_max == g.p_min])
    cat.add(I, "floor", s.floor_buses)
    cat.freeze()
    cat.sets = s
    return cat


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

@dataclass
class Block:
    """Coefficients contributed by one player (or by the clearing rows)."""

    name: str
    h0: list = field(default_factory=list)  # (var, value)
    hlin: list = field(default_factory=list)  # (var, var, value)
    eq: list = field(default_factory=list)  # (eq-row group, key, var, value)
    b1: list = field(default_factory=list)  # (group, key, value)
    ineq: list = field(default_factory=list)
    b2: list = field(default_factory=list)
    traffic: object = None  # _TrafficTerm for the traffic block


def assemble_cno_block(problem, catalog):
    """Charging network operator: buys p+ from the grid and sells it to EVs at
    alpha+, buys p- from EVs and sells it to the grid, within net exchange
    bounds on p+ - p-."""
    b = Block("cno")
    market, c = problem.market, catalog
    for n in c.keys("p_plus"):
        b.h0.append((c.index("p_plus", n), -market.station(n).fee_charge))
    for n in c.keys("p_minus"):
        b.h0.append((c.index("p_minus", n), -market.station(n).fee_discharge))
    for grp, sign in (("fcs_up", 1.0), ("fcs_lo", -1.0), ("fcs_eq", 1.0)):
        for n in c.keys(grp):
            lo, hi = market.station(n).net_bounds
            rows = b.eq if grp == "fcs_eq" else b.ineq
            rhs = b.b1 if grp == "fcs_eq" else b.b2
            j = c.find("p_plus", n)
            if j is not None:
                rows.append((grp, n, j, sign))
            j = c.find("p_minus", n)
            if j is not None:
                rows.append((grp, n, j, -sign))
            rhs.append((grp, n, hi if sign > 0 else -lo))
    return b


@dataclass
class _TrafficTerm:
    L: sp.csr_matrix  # (n_links, n_primal): arc rows then station rows
    weights: np.ndarray  # (n_primal,) value of time per path variable
    t0: np.ndarray
    cap: np.ndarray
    bpr_b: np.ndarray
    bpr_power: np.ndarray
    base_wait: np.ndarray
    congestion: np.ndarray
    piles: np.ndarray
    period: float
    n_arcs: int

    def tau(self, x):
        """Link costs (hours) and their derivatives at link flows ``x``."""
        xa = np.maximum(x[:self.n_arcs], 0.0)
        ratio = xa / self.cap
        ta = self.t0 * (1.0 + self.bpr_b * ratio ** self.bpr_power)
        da = self.t0 * self.bpr_b * self.bpr_power * ratio ** (self.bpr_power - 1) / self.cap
        s = x[self.n_arcs:] * self.period - self.piles
        eps = 1.0 / self.period
        half = 0.5 * self.congestion
        wait = self.base_wait + half * np.where(s <= 0, 0.0, np.where(s <= eps, s * s, 2 * eps * s - eps * eps))
        dwait = half * self.period * np.where(s <= 0, 0.0, np.where(s <= eps, 2 * s, 2 * eps))
        return np.concatenate([ta, wait]), np.concatenate([da, dwait])


def assemble_traffic_block(problem, catalog):
    """Wardrop user equilibrium for EVs and fuel vehicles over fixed paths."""
    b = Block("traffic")
    net, ev, paths, c = problem.transport, problem.ev, problem.paths, catalog
    stations = c.sets.action_stations
    st_row = {n: k for k, n in enumerate(stations)}
    n_arcs = len(net.arcs)
    rows, cols = [], []
    weights = np.zeros(c.dim)
    for q, p in enumerate(paths.ev):
        j = c.index("f_ev", q)
        weights[j] = ev.time_value_ev
        rows.extend(p.arcs)
        cols.extend([j] * len(p.arcs))
        for a in p.actions:
            rows.append(n_arcs + st_row[a.node])
            cols.append(j)
        e_tot = p.charge_energy + p.discharge_energy
        const = ev.time_value_ev * e_tot / ev.pile_power + ev.degradation_cost * e_tot
        b.h0.append((j, const))
        b.ineq.append(("C_ev", p.od, j, -1.0))
        for a, e in zip(p.actions, p.energies):
            b.ineq.append(("station_cap", a.node, j, e))
    for q, p in enumerate(paths.fv):
        j = c.index("f_fv", q)
        weights[j] = ev.time_value_fv
        rows.extend(p.arcs)
        cols.extend([j] * len(p.arcs))
        b.ineq.append(("C_fv", p.od, j, -1.0))
    for od in c.keys("C_ev"):
        b.b2.append(("C_ev", od, -net.demands[od][0]))
    for od in c.keys("C_fv"):
        b.b2.append(("C_fv", od, -net.demands[od][1]))
    for n in stations:
        b.b2.append(("station_cap", n, ev.pile_power * net.stations[n].piles))
    L = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_arcs + len(stations), c.dim))
    sts = [net.stations[n] for n in stations]
    b.traffic = _TrafficTerm(
        L=L, weights=weights,
        t0=np.array([a.free_flow_time for a in net.arcs]),
        cap=np.array([a.capacity for a in net.arcs]),
        bpr_b=np.array([a.bpr_b for a in net.arcs]),
        bpr_power=np.array([a.bpr_power for a in net.arcs]),
        base_wait=np.array([s.base_wait for s in sts]),
        congestion=np.array([s.congestion_rate for s in sts]),
        piles=np.array([s.piles for s in sts]), period=net.period, n_arcs=n_arcs)
    return b


def assemble_dso_block(problem, catalog):
    """LinDistFlow network operator.

    It earns the wheeling fee w_i on net withdrawals and m_i on TSO power
    delivered to bus i, and pays the wholesale price on power leaving the
    TSO bus.  Squared voltages are anchored at the TSO bus and at each island
    head.
    """
    b = Block("dso")
    feeder, c = problem.feeder, catalog
    bmap = feeder.bus_map
    root = feeder.tso_bus
    base = feeder.base_kva
    for i in c.keys("P_dso"):
        b.eq.append(("pbal", i, c.index("P_dso", i), 1.0))
    for ln in feeder.lines:
        jp, jq = c.index("p_line", ln.id), c.index("q_line", ln.id)
        b.eq.append(("vdrop", ln.id, c.index("U", ln.from_bus), 1.0))
        b.eq.append(("vdrop", ln.id, c.index("U", ln.to_bus), -1.0))
        b.eq.append(("vdrop", ln.id, jp, -2.0 * ln.r / base))
        b.eq.append(("vdrop", ln.id, jq, -2.0 * ln.x / base))
        # net withdrawal at a bus = inflow - outflow
        b.eq.append(("pbal", ln.to_bus, jp, -1.0))
        if ln.from_bus != root:
            b.eq.append(("pbal", ln.from_bus, jp, 1.0))
        else:
            b.h0.append((jp, feeder.wholesale_price))
        for grp, sgn in (("pl_up", 1.0), ("pl_lo", -1.0)):
            if c.find(grp, ln.id) is not None:
                b.ineq.append((grp, ln.id, jp, sgn))
                b.b2.append((grp, ln.id, ln.rating))
        for grp, sgn in (("ql_up", 1.0), ("ql_lo", -1.0)):
            if c.find(grp, ln.id) is not None:
                b.ineq.append((grp, ln.id, jq, sgn))
                b.b2.append((grp, ln.id, ln.rating))
        # reactive balance: q_load + outflow - inflow within [q_lo, q_hi]
        for bus, sgn in ((ln.from_bus, 1.0), (ln.to_bus, -1.0)):
            if bus == root:
                continue
            for grp, s2 in (("qbal_eq", 1.0), ("qbal_up", 1.0), ("qbal_lo", -1.0)):
                if c.find(grp, bus) is not None:
                    (b.eq if grp == "qbal_eq" else b.ineq).append((grp, bus, jq, s2 * sgn))
        if ln.from_bus == root:
            for grp, s2 in (("qtso_eq", 1.0), ("qtso_up", 1.0), ("qtso_lo", -1.0)):
                if c.find(grp, "tso") is not None:
                    (b.eq if grp == "qtso_eq" else b.ineq).append((grp, "tso", jq, s2))
    for i in c.keys("qbal_eq"):
        b.b1.append(("qbal_eq", i, bmap[i].q_bounds[0] - bmap[i].q_load))
    for i in c.keys("qbal_up"):
        b.b2.append(("qbal_up", i, bmap[i].q_bounds[1] - bmap[i].q_load))
    for i in c.keys("qbal_lo"):
        b.b2.append(("qbal_lo", i, bmap[i].q_load - bmap[i].q_bounds[0]))
    qlo, qhi = feeder.tso_reactive_bounds
    for grp, val in (("qtso_eq", qhi), ("qtso_up", qhi), ("qtso_lo", -qlo)):
        for k in c.keys(grp):
            (b.b1 if grp == "qtso_eq" else b.b2).append((grp, k, val))
    for h in c.keys("vref"):
        b.eq.append(("vref", h, c.index("U", h), 1.0))
        b.b1.append(("vref", h, feeder.voltage_reference))
    ulo, uhi = feeder.voltage_bounds
    for i in c.keys("U_up"):
        b.ineq.append(("U_up", i, c.index("U", i), 1.0))
        b.b2.append(("U_up", i, uhi))
    for i in c.keys("U_lo"):
        b.ineq.append(("U_lo", i, c.index("U", i), -1.0))
        b.b2.append(("U_lo", i, -ulo))
    tlo, thi = feeder.tso_active_bounds
    for grp, sgn, val in (("tso_eq", 1.0, thi), ("tso_up", 1.0, thi), ("tso_lo", -1.0, -tlo)):
        for k in c.keys(grp):
            for i in c.keys("P_tso"):
                (b.eq if grp == "tso_eq" else b.ineq).append((grp, k, c.index("P_tso", i), sgn))
            (b.b1 if grp == "tso_eq" else b.b2).append((grp, k, val))
    return b


def assemble_lse_block(problem, catalog):
    """Cournot load-serving entities: household sales against linear inverse
    demand, quadratic generation cost, trades with the CNO and the TSO, one
    energy balance per LSE and shared per-bus demand floors with shedding."""
    b = Block("lse")
    feeder, market, c = problem.feeder, problem.market, catalog
    bmap = feeder.bus_map
    names = [f.name for f in market.lses]
    for f in names:
        for i in c.sets.demand_buses:
            a_i, b_i = bmap[i].inverse_demand
            j = c.index("sell", (f, i))
            b.h0.append((j, -b_i))
            for g in names:
                b.hlin.append((j, c.index("sell", (g, i)), -a_i * (2.0 if g == f else 1.0)))
            b.eq.append(("balance", f, j, 1.0))
            if c.find("floor", i) is not None:
                b.ineq.append(("floor", i, j, -1.0))
    for f in market.lses:
        for g in f.generators:
            j = c.index("gen", (f.name, g.bus))
            b.h0.append((j, g.e))
            b.hlin.append((j, j, 2.0 * g.d))
            b.eq.append(("balance", f.name, j, -1.0))
            key = (f.name, g.bus)
            if c.find("gen_up", key) is not None:
                b.ineq.append(("gen_up", key, j, 1.0))
                b.b2.append(("gen_up", key, g.p_max))
            if c.find("gen_lo", key) is not None:
                b.ineq.append(("gen_lo", key, j, -1.0))
                b.b2.append(("gen_lo", key, -g.p_min))
            if c.find("gen_eq", key) is not None:
                b.eq.append(("gen_eq", key, j, 1.0))
                b.b1.append(("gen_eq", key, g.p_max))
    for grp, sgn in (("phi_plus", 1.0), ("phi_minus", -1.0), ("phi_tso", -1.0)):
        for key in c.keys(grp):
            b.eq.append(("balance", key[0], c.index(grp, key), sgn))
    for i in c.keys("floor"):
        b.ineq.append(("floor", i, c.index("LS", i), -1.0))
        b.b2.append(("floor", i, -bmap[i].demand_floor))
        b.h0.append((c.index("LS", i), market.shedding_penalty))
    return b


def assemble_clearing_block(problem, catalog):
    """Market-clearing rows; their multipliers are the shared prices."""
    b = Block("clearing")
    c, net = catalog, problem.transport
    # w_i: sum_f (sell - gen + phi+ - phi-) - P_dso = 0
    for i in c.keys("w"):
        b.eq.append(("w", i, c.index("P_dso", i), -1.0))
    for grp, sgn in (("sell", 1.0), ("gen", -1.0), ("phi_plus", 1.0), ("phi_minus", -1.0)):
        for key in c.keys(grp):
            b.eq.append(("w", key[1], c.index(grp, key), sgn))
    # alpha+: EF+ - p+ = 0 ; alpha-: p- - EF- = 0
    for n in c.keys("alpha_plus"):
        b.eq.append(("alpha_plus", n, c.index("p_plus", n), -1.0))
    for n in c.keys("alpha_minus"):
        b.eq.append(("alpha_minus", n, c.index("p_minus", n), 1.0))
    for q, p in enumerate(problem.paths.ev):
        j = c.index("f_ev", q)
        for a, e in zip(p.actions, p.energies):
            if a.kind == CHARGE:
                b.eq.append(("alpha_plus", a.node, j, e))
            else:
                b.eq.append(("alpha_minus", a.node, j, -e))
    # M+_i: sum_n p+ - sum_f phi+ = 0 ; M-_i: -sum_n p- + sum_f phi- = 0
    for n in c.keys("p_plus"):
        b.eq.append(("M_plus", net.stations[n].bus, c.index("p_plus", n), 1.0))
    for n in c.keys("p_minus"):
        b.eq.append(("M_minus", net.stations[n].bus, c.index("p_minus", n), -1.0))
    for key in c.keys("phi_plus"):
        b.eq.append(("M_plus", key[1], c.index("phi_plus", key), -1.0))
    for key in c.keys("phi_minus"):
        b.eq.append(("M_minus", key[1], c.index("phi_minus", key), 1.0))
    # m_i: sum_f phi_tso - P_tso = 0
    for key in c.keys("phi_tso"):
        b.eq.append(("m", key[1], c.index("phi_tso", key), 1.0))
    for i in c.keys("m"):
        b.eq.append(("m", i, c.index("P_tso", i), -1.0))
    return b


# ---------------------------------------------------------------------------
# MCP instance
# ---------------------------------------------------------------------------

class MCPInstance:
    """z = [v; lam; mu];  G(z) = [H(v) + B1'lam + B2'mu; b1 - B1 v; b2 - B2 v]."""

    def __init__(self, lower, h0, Hlin, B1, b1, B2, b2, traffic=None, catalog=None,
                 problem=None):
        self.n = len(lower)
        self.lower_v = np.asarray(lower, dtype=float)
        self.h0 = np.asarray(h0, dtype=float)
        self.Hlin = sp.csr_matrix(Hlin, shape=(self.n, self.n))
        self.B1 = sp.csr_matrix(B1, shape=(B1.shape[0], self.n))
        self.b1 = np.asarray(b1, dtype=float)
        self.B2 = sp.csr_matrix(B2, shape=(B2.shape[0], self.n))
        self.b2 = np.asarray(b2, dtype=float)
        self.traffic = traffic
        self.catalog = catalog
        self.problem = problem
        self.n_eq = self.B1.shape[0]
        self.n_ineq = self.B2.shape[0]
        self.dim = self.n + self.n_eq + self.n_ineq
        self.lower = np.concatenate([self.lower_v, np.full(self.n_eq, -INF), np.zeros(self.n_ineq)])
        self.bounded = np.isfinite(self.lower)
        if traffic is not None:
            L = traffic.L[:, :self.n]
            self._L = sp.csr_matrix(L)
            self._Rt = sp.csr_matrix(sp.diags(traffic.weights[:self.n]) @ L.T)

    # -- constructors ------------------------------------------------------
    @classmethod
    def from_lcp(cls, M, q):
        """0 <= v _|_ M v + q >= 0."""
        M = sp.csr_matrix(np.atleast_2d(M))
        n = M.shape[0]
        empty = sp.csr_matrix((0, n))
        return cls(np.zeros(n), q, M, empty, np.zeros(0), empty, np.zeros(0))

    # -- evaluation ----------------------------------------------------------
    def split(self, z):
        return z[:self.n], z[self.n:self.n + self.n_eq], z[self.n + self.n_eq:]

    def link_flows(self, v):
        return self._L @ v

    def H(self, v):
        out = self.h0 + self.Hlin @ v
        if self.traffic is not None:
            t, _ = self.traffic.tau(self._L @ v)
            out = out + self._Rt @ t
        return out

    def jacobian_H(self, v):
        J = self.Hlin
        if self.traffic is not None:
            _, dt = self.traffic.tau(self._L @ v)
            J = J + self._Rt @ sp.diags(dt) @ self._L
        return sp.csr_matrix(J)

    def G(self, z):
        v, lam, mu = self.split(z)
        return np.concatenate([self.H(v) + self.B1.T @ lam + self.B2.T @ mu,
                               self.b1 - self.B1 @ v, self.b2 - self.B2 @ v])

    def jacobian_static(self):
        """Jacobian of G without the traffic term (constant part)."""
        if getattr(self, "_J0", None) is None:
            self._J0 = sp.bmat([[self.Hlin, self.B1.T, self.B2.T],
                                [-self.B1, None, None],
                                [-self.B2, None, None]], format="csr")
            self._J0.resize((self.dim, self.dim))
        return self._J0

    def jacobian(self, z):
        """Full sparse Jacobian of G (materialises the path-path block)."""
        v = z[:self.n]
        J = self.jacobian_static().tolil(copy=True)
        if self.traffic is not None:
            J[:self.n, :self.n] = self.jacobian_H(v)
        return sp.csr_matrix(J)

    def traffic_factors(self, z):
        """(Rt, dtau, L) so that the traffic Jacobian is Rt diag(dtau) L."""
        if self.traffic is None:
            return None
        _, dt = self.traffic.tau(self._L @ z[:self.n])
        return self._Rt, dt, self._L

    # -- residuals -----------------------------------------------------------
    def min_residual(self, z, G=None):
        """Componentwise natural residual: min(z - l, G) on bounded rows, G on free rows."""
        if G is None:
            G = self.G(z)
        r = G.copy()
        b = self.bounded
        r[b] = np.minimum(z[b] - self.lower[b], G[b])
        return r

    def fb_residual(self, z, G=None):
        if G is None:
            G = self.G(z)
        r = G.copy()
        b = self.bounded
        r[b] = fischer_burmeister(z[b] - self.lower[b], G[b])
        return r

    # -- reporting -----------------------------------------------------------
    def labels(self):
        if self.catalog is not None:
            return self.catalog.labels()
        return ([f"v[{k}]" for k in range(self.n)] + [f"lam[{k}]" for k in range(self.n_eq)]
                + [f"mu[{k}]" for k in range(self.n_ineq)])

    def sparsity(self):
        J = self.jacobian_static().tocoo()
        rows, cols = list(J.row), list(J.col)
        if self.traffic is not None:
            P = (abs(self._Rt) @ abs(self._L)).tocoo()
            rows += list(P.row)
            cols += list(P.col)
        pairs = sorted(set(zip(map(int, rows), map(int, cols))))
        return pairs


def fischer_burmeister(a, b):
    """phi(a, b) = sqrt(a^2 + b^2) - a - b; zero iff a, b >= 0 and ab = 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.hypot(a, b) - a - b


def assemble_mcp(problem, catalog=None):
    """Concatenate the player and clearing blocks into an MCPInstance."""
    c = catalog if catalog is not None else build_catalog(problem)
    if not problem.transport.stations and (c.size("p_plus") or c.size("p_minus")):
        raise AssemblyError("station variables without stations")
    blocks = [assemble_cno_block(problem, c), assemble_traffic_block(problem, c),
              assemble_dso_block(problem, c), assemble_lse_block(problem, c),
              assemble_clearing_block(problem, c)]
    n = c.n_primal
    h0 = np.zeros(n)
    hl_r, hl_c, hl_v = [], [], []
    eq_r, eq_c, eq_v, ineq_r, ineq_c, ineq_v = [], [], [], [], [], []
    b1 = np.zeros(c.n_eq)
    b2 = np.zeros(c.n_ineq)
    touched_eq, touched_ineq = defaultdict(set), defaultdict(set)
    traffic = None
    for blk in blocks:
        for j, val in blk.h0:
            _check_primal(c, j, blk.name)
            h0[j] += val
        for i, j, val in blk.hlin:
            _check_primal(c, i, blk.name)
            _check_primal(c, j, blk.name)
            hl_r.append(i)
            hl_c.append(j)
            hl_v.append(val)
        for grp, key, j, val in blk.eq:
            _check_group(c, grp, "eq", blk.name)
            _check_primal(c, j, blk.name)
            eq_r.append(c.row(grp, key))
            eq_c.append(j)
            eq_v.append(val)
            touched_eq[grp].add(key)
        for grp, key, val in blk.b1:
            _check_group(c, grp, "eq", blk.name)
            b1[c.row(grp, key)] += val
        for grp, key, j, val in blk.ineq:
            _check_group(c, grp, "ineq", blk.name)
            _check_primal(c, j, blk.name)
            ineq_r.append(c.row(grp, key))
            ineq_c.append(j)
            ineq_v.append(val)
            touched_ineq[grp].add(key)
        for grp, key, val in blk.b2:
            _check_group(c, grp, "ineq", blk.name)
            b2[c.row(grp, key)] += val
        if blk.traffic is not None:
            traffic = blk.traffic
    for sec, touched in (("eq", touched_eq), ("ineq", touched_ineq)):
        for grp in c.groups(sec):
            missing = set(c.keys(grp)) - touched[grp]
            if missing:
                raise AssemblyError(f"row group {grp!r} has empty rows {sorted(map(str, missing))[:3]}")
    Hlin = sp.csr_matrix((hl_v, (hl_r, hl_c)), shape=(n, n))
    B1 = sp.csr_matrix((eq_v, (eq_r, eq_c)), shape=(c.n_eq, n))
    B2 = sp.csr_matrix((ineq_v, (ineq_r, ineq_c)), shape=(c.n_ineq, n))
    lower = c.lower()[:n]
    if not np.all(np.isfinite(b2)):
        raise AssemblyError("infinite right-hand side in an inequality row")
    return MCPInstance(lower, h0, Hlin, B1, b1, B2, b2, traffic=traffic, catalog=c,
                       problem=problem)


def _check_primal(c, j, block):
    if not 0 <= j < c.n_primal:
        raise AssemblyError(f"block {block!r}: variable index {j} outside the primal range")


def _check_group(c, grp, section, block):
    if not c.has(grp) or c.section(grp) != section:
        raise AssemblyError(f"block {block!r}: unknown {section} row group {grp!r}")


def dump_mcp(instance):
    """Catalog and sparsity pattern as a JSON string (debugging aid)."""
    J = instance.sparsity()
    return json.dumps({
        "dimension": instance.dim, "n_primal": instance.n, "n_eq": instance.n_eq,
        "n_ineq": instance.n_ineq,
        "catalog": instance.catalog.to_dict() if instance.catalog is not None else None,
        "nnz": len(J), "pattern": [[i, j] for i, j in J],
    })


def unbounded_rays(instance, tol=1e-9):
    """Primal variables along which the constraint set {v >= l, B1 v = b1,
    B2 v <= b2} is unbounded (recession-cone test, one LP per variable)."""
    from scipy.optimize import linprog

    n = instance.n
    lb = np.where(np.isfinite(instance.lower_v), 0.0, -1.0)
    bounds = list(zip(lb, np.ones(n)))
    out = []
    for j in range(n):
        for sgn in (1.0, -1.0):
            if sgn < 0 and np.isfinite(instance.lower_v[j]):
                continue
            cvec = np.zeros(n)
            cvec[j] = -sgn
            res = linprog(cvec, A_ub=instance.B2 if instance.n_ineq else None,
                          b_ub=np.zeros(instance.n_ineq) if instance.n_ineq else None,
                          A_eq=instance.B1 if instance.n_eq else None,
                          b_eq=np.zeros(instance.n_eq) if instance.n_eq else None,
                          bounds=bounds, method="highs")
            if res.status == 0 and -res.fun > tol:
                out.append(j)
                break
    return out
