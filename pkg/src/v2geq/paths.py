"""Expanded road network, energy-feasible path generation and path costs.

An EV path is a simple base path plus at most two station actions (charge or
discharge).  Under the behavioural rules used here -- trips start with a full
battery, charging always tops up to ``B_max`` and discharging always stops at
``B_min`` -- the energy exchanged at every stop is a constant of the path, so
the whole path catalog is computed once before the equilibrium is solved.
"""

from __future__ import annotations

import itertools
import math
from collections import namedtuple
from dataclasses import dataclass

import networkx as nx
import numpy as np

CHARGE = "charge"
DISCHARGE = "discharge"

# Comparisons on energies use this slack so that a path sitting exactly on a
# feasibility boundary is not lost to rounding in the consumption sums.
ENERGY_TOL = 1e-9

PATTERNS = {
    (): "0",
    (CHARGE,): "1-1",
    (CHARGE, CHARGE): "1-2",
    (DISCHARGE,): "2",
    (CHARGE, DISCHARGE): "3",
    (DISCHARGE, CHARGE): "4",
}

VirtualNode = namedtuple("VirtualNode", "node kind")


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    node: int
    kind: str
    position: int  # index of the station in the base node sequence


@dataclass(frozen=True)
class SocTrace:
    arrival: tuple  # kWh on arrival at each node of the sequence
    departure: tuple  # kWh when leaving each node


@dataclass(frozen=True)
class ExpandedPath:
    od: tuple
    nodes: tuple
    arcs: tuple  # indices into TransportNetwork.arcs
    actions: tuple = ()
    energies: tuple = ()  # kWh per vehicle, one positive entry per action
    pattern: str = "0"
    distance: float = 0.0

    @property
    def key(self):
        return (self.nodes, tuple((a.node, a.kind) for a in self.actions))

    @property
    def charge_energy(self):
        return sum(e for a, e in zip(self.actions, self.energies) if a.kind == CHARGE)

    @property
    def discharge_energy(self):
        return sum(e for a, e in zip(self.actions, self.energies) if a.kind == DISCHARGE)

    def energy_at(self, node, kind):
        return sum(e for a, e in zip(self.actions, self.energies) if a.node == node and a.kind == kind)

    @property
    def has_discharge(self):
        return any(a.kind == DISCHARGE for a in self.actions)

    def label(self):
        """Readable sequence such as ``1-3-12(D)-13-24-21-20``."""
        tags = {a.position: "(C)" if a.kind == CHARGE else "(D)" for a in self.actions}
        return "-".join(f"{n}{tags.get(k, '')}" for k, n in enumerate(self.nodes))

    def expanded_sequence(self):
        """Node sequence in the expanded network (virtual node after its station)."""
        out = []
        acts = {a.position: a for a in self.actions}
        for k, n in enumerate(self.nodes):
            out.append(n)
            if k in acts:
                out.append(VirtualNode(n, acts[k].kind))
        return tuple(out)

    def to_dict(self):
        return {"od": list(self.od), "nodes": list(self.nodes), "pattern": self.pattern,
                "actions": [{"node": a.node, "kind": a.kind, "position": a.position, "energy": e}
                            for a, e in zip(self.actions, self.energies)],
                "distance": self.distance}


# ---------------------------------------------------------------------------
# Expanded network
# ---------------------------------------------------------------------------

def expand_network(net):
    """Directed graph with a charge node n' and a discharge node n'' per station.

    Each virtual node hangs off its station by a zero-length, zero-consumption
    dummy arc and copies the station's outgoing arcs, so passing through n'
    or n'' encodes the action as a routing choice.
    """
    g = nx.DiGraph()
    g.add_nodes_from(net.nodes)
    for k, a in enumerate(net.arcs):
        g.add_edge(a.tail, a.head, arc=k, distance=a.distance, consumption=a.consumption_rate)
    for n in net.station_nodes:
        for kind in (CHARGE, DISCHARGE):
            v = VirtualNode(n, kind)
            g.add_node(v)
            g.add_edge(n, v, arc=None, distance=0.0, consumption=0.0)
            for k, a in enumerate(net.arcs):
                if a.tail == n:
                    g.add_edge(v, a.head, arc=k, distance=a.distance,
                               consumption=a.consumption_rate)
    return g


# ---------------------------------------------------------------------------
# State of charge
# ---------------------------------------------------------------------------

def _arc_lookup(net):
    return {a.key: k for k, a in enumerate(net.arcs)}


def simulate_soc(nodes, actions, params, net, arc_lookup=None):
    """Forward SoC pass; returns (SocTrace, energies) or None if infeasible.

    The battery starts full.  A charge refills to ``B_max`` and a discharge
    drains to ``B_min``; every segment between stops must arrive with at least
    ``B_min`` (before a discharge) or the reserve ``R_anx * B_max`` (before a
    charge or at the destination).  Zero-energy actions are rejected.
    """
    lookup = arc_lookup if arc_lookup is not None else _arc_lookup(net)
    b_max = params.battery_capacity
    b_min = params.post_discharge_level
    reserve = params.reserve_floor
    acts = {}
    for a in actions:
        if a.node not in net.stations:
            raise PathError(f"action at non-station node {a.node}")
        if not 0 < a.position < len(nodes) - 1 or nodes[a.position] != a.node:
            raise PathError(f"action position {a.position} does not match node {a.node}")
        acts[a.position] = a
    arrival = [b_max]
    departure = []
    energies = []
    level = b_max
    for k, n in enumerate(nodes):
        if k > 0:
            arc = net.arcs[lookup[(nodes[k - 1], n)]]
            level = level - arc.energy
            arrival.append(level)
        act = acts.get(k)
        if act is None:
            departure.append(level)
            continue
        if act.kind == CHARGE:
            if level < reserve - ENERGY_TOL:
                return None
            e = b_max - level
            level = b_max
        else:
            if level < b_min - ENERGY_TOL:
                return None
            e = level - b_min
            level = b_min
        if e <= ENERGY_TOL:
            return None
        energies.append(e)
        departure.append(level)
    if arrival[-1] < reserve - ENERGY_TOL:
        return None
    return SocTrace(tuple(arrival), tuple(departure)), tuple(energies)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def k_shortest_paths(graph, r, s, k, weight="time"):
    """The ``k`` shortest simple paths (all of them if ``k`` is None).

    Yen's algorithm via networkx; equal-cost paths are ordered
    lexicographically by node sequence so the cut at ``k`` is deterministic.
    """
    def cost(p):
        return sum(graph[u][v][weight] for u, v in zip(p, p[1:]))

    try:
        gen = nx.shortest_simple_paths(graph, r, s, weight=weight)
        found = []
        kth = None
        for p in gen:
            c = cost(p)
            if kth is not None and c > kth * (1 + 1e-12) + 1e-12:
                break
            found.append((c, tuple(p)))
            if k is not None and len(found) == k:
                kth = c
    except nx.NetworkXNoPath:
        return []
    found.sort(key=lambda cp: (round(cp[0], 9), cp[1]))
    return [p for _, p in (found if k is None else found[:k])]


def _make_path(od, nodes, acts, energies, net, lookup):
    arcs = tuple(lookup[(u, v)] for u, v in zip(nodes, nodes[1:]))
    kinds = tuple(a.kind for a in acts)
    return ExpandedPath(od=od, nodes=tuple(nodes), arcs=arcs, actions=tuple(acts),
                        energies=tuple(energies), pattern=PATTERNS[kinds],
                        distance=sum(net.arcs[k].distance for k in arcs))


def generate_paths(od, net, params, k=10, allow_discharge=True, weight="time", base_paths=None):
    """Energy-feasible augmentations of the ``k`` shortest simple base paths.

    Every base path is tested as is, with one charge or discharge at each
    station on it, and with ordered pairs (charge, charge), (discharge,
    charge) and (charge, discharge).  Stops are only placed at intermediate
    nodes.  ``k=None`` enumerates every simple path.
    """
    r, s = od
    if r not in net.nodes or s not in net.nodes:
        raise PathError(f"OD endpoint not in network: {od}")
    if k is not None and k < 1:
        raise PathError("k must be at least 1")
    lookup = _arc_lookup(net)
    if base_paths is None:
        base_paths = k_shortest_paths(net.graph(), r, s, k, weight)
    kinds_single = (CHARGE, DISCHARGE) if allow_discharge else (CHARGE,)
    kinds_pair = [(CHARGE, CHARGE)]
    if allow_discharge:
        kinds_pair += [(DISCHARGE, CHARGE), (CHARGE, DISCHARGE)]
    out = {}

    def consider(nodes, acts):
        res = simulate_soc(nodes, acts, params, net, lookup)
        if res is None:
            return
        path = _make_path(od, nodes, acts, res[1], net, lookup)
        out.setdefault(path.key, path)

    for p in base_paths:
        consider(p, ())
        spots = [(k_, n) for k_, n in enumerate(p) if n in net.stations and 0 < k_ < len(p) - 1]
        for k_, n in spots:
            for kind in kinds_single:
                consider(p, (Action(n, kind, k_),))
        for (k1, n1), (k2, n2) in itertools.combinations(spots, 2):
            for t1, t2 in kinds_pair:
                consider(p, (Action(n1, t1, k1), Action(n2, t2, k2)))
    return sorted(out.values(), key=_path_order)


def _path_order(p):
    return (len(p.actions), p.nodes, tuple((a.position, a.kind) for a in p.actions))


@dataclass(frozen=True)
class PathCatalog:
    """EV expanded paths and FV base paths for every OD with positive demand."""

    ev: tuple  # ExpandedPath
    fv: tuple  # ExpandedPath (always pattern 0)
    k: int | None
    v2g: bool

    def ev_by_od(self):
        out = {}
        for q, p in enumerate(self.ev):
            out.setdefault(p.od, []).append(q)
        return out

    def fv_by_od(self):
        out = {}
        for q, p in enumerate(self.fv):
            out.setdefault(p.od, []).append(q)
        return out

    def to_dict(self):
        return {"k": self.k, "v2g": self.v2g,
                "ev": [p.to_dict() for p in self.ev], "fv": [p.to_dict() for p in self.fv]}


def path_from_dict(d, net):
    lookup = _arc_lookup(net)
    acts = tuple(Action(int(a["node"]), a["kind"], int(a["position"])) for a in d["actions"])
    nodes = tuple(int(n) for n in d["nodes"])
    return _make_path(tuple(d["od"]), nodes, acts,
                      tuple(float(a["energy"]) for a in d["actions"]), net, lookup)


def catalog_from_dict(d, net):
    return PathCatalog(ev=tuple(path_from_dict(p, net) for p in d["ev"]),
                       fv=tuple(path_from_dict(p, net) for p in d["fv"]),
                       k=d["k"], v2g=d["v2g"])


def generate_catalog(net, params, k=10, v2g=True, weight="time"):
    """Path catalog for all ODs; ODs are processed in sorted order."""
    graph = net.graph()
    lookup = _arc_lookup(net)
    ev, fv = [], []
    for od in net.od_pairs():
        dev, dfv = net.demands[od]
        base = k_shortest_paths(graph, od[0], od[1], k, weight)
        if dfv > 0:
            fv.extend(_make_path(od, p, (), (), net, lookup) for p in base)
        if dev > 0:
            paths = generate_paths(od, net, params, k, allow_discharge=v2g, base_paths=base)
            if not paths:
                raise PathError(f"OD {od} has EV demand but no energy-feasible path")
            ev.extend(paths)
    return PathCatalog(ev=tuple(ev), fv=tuple(fv), k=k, v2g=v2g)


# ---------------------------------------------------------------------------
# Link performance and path costs
# ---------------------------------------------------------------------------

def bpr_time(t0, x, cap, b=0.15, power=4.0):
    """t0 * (1 + b (x/c)^power)."""
    return t0 * (1.0 + b * (np.asarray(x, dtype=float) / cap) ** power)


def smoothed_wait(x, base_wait, congestion_rate, piles, period):
    """Station waiting time with a quadratic blend around zero excess.

    With s = x*period - piles and eps = 1/period the excess term is 0 for
    s <= 0, s^2 on [0, eps] and 2 eps s - eps^2 beyond, scaled by
    congestion_rate/2; the function is continuously differentiable.
    """
    s = np.asarray(x, dtype=float) * period - piles
    eps = 1.0 / period
    excess = np.where(s <= 0, 0.0, np.where(s <= eps, s * s, 2 * eps * s - eps * eps))
    return base_wait + 0.5 * congestion_rate * excess


def _lookup(m, key):
    return m[key]


def path_cost_ev(path, arc_times, waits, prices, params):
    """Generalised EV cost: time value of driving, waiting and pile time plus
    energy bought (at price + degradation) minus energy sold (price - degradation)."""
    travel = sum(_lookup(arc_times, a) for a in path.arcs)
    wait = sum(_lookup(waits, a.node) for a in path.actions)
    e_plus = path.charge_energy
    e_minus = path.discharge_energy
    cost = params.time_value_ev * (travel + wait + (e_plus + e_minus) / params.pile_power)
    for a, e in zip(path.actions, path.energies):
        a_plus, a_minus = prices[a.node]
        if a.kind == CHARGE:
            cost += e * (a_plus + params.degradation_cost)
        else:
            cost -= e * (a_minus - params.degradation_cost)
    return cost


def path_cost_fv(path, arc_times, params):
    return params.time_value_fv * sum(_lookup(arc_times, a) for a in path.arcs)


def free_flow_times(net):
    return np.array([a.free_flow_time for a in net.arcs])


def is_feasible_literal(nodes, actions, params, net):
    """Check the segment inequalities directly (no forward simulation).

    For consecutive boundaries k1 < k2 among origin, stops and destination:
    E_dep(k1) - consumption(k1..k2) >= E_arr_min(k2).
    """
    lookup = _arc_lookup(net)
    cum = [0.0]
    for u, v in zip(nodes, nodes[1:]):
        cum.append(cum[-1] + net.arcs[lookup[(u, v)]].energy)
    stops = [(0, None)] + [(a.position, a.kind) for a in actions] + [(len(nodes) - 1, None)]
    for (k1, t1), (k2, t2) in zip(stops, stops[1:]):
        dep = params.post_discharge_level if t1 == DISCHARGE else params.battery_capacity
        need = params.post_discharge_level if t2 == DISCHARGE else params.reserve_floor
        if dep - (cum[k2] - cum[k1]) < need - ENERGY_TOL:
            return False
    return not math.isnan(cum[-1])
