"""Small hand-built instances shared by the test modules."""

from __future__ import annotations

import random

import networkx as nx
import numpy as np

from v2geq.assembly import CoupledProblem
from v2geq.network import (Arc, Bus, ChargingStation, EvParams, Generator, Line, Lse,
                           MarketParams, PowerFeeder, TransportNetwork)
from v2geq.paths import (DISCHARGE, Action, VirtualNode, expand_network, generate_catalog,
                         is_feasible_literal)


# ── Coupled toy: 1 OD, two routes via one station each, 2-bus feeder ───────

def tiny(dev=10.0, dfv=20.0, v2g=False, seed=None, rating=5000.0, k=4):
    """1 -> 4 over 1-2-4 or 1-3-4 (60 km per arc); stations at 2 and 3 on bus "1".

    With the default battery every EV path must charge once.  ``seed``
    randomises times, capacities, wait slopes and cost coefficients.
    """
    rng = np.random.default_rng(seed)

    def r(lo, hi):
        return rng.uniform(lo, hi) if seed is not None else 0.5 * (lo + hi)

    arcs = tuple(Arc(u, v, r(0.3, 0.6), r(20, 40), 60.0, 0.2)
                 for u, v in ((1, 2), (2, 4), (1, 3), (3, 4)))
    stations = {n: ChargingStation(n, 0.05, r(0.01, 0.05), 2, "1") for n in (2, 3)}
    net = TransportNetwork((1, 2, 3, 4), arcs, stations, {(1, 4): (dev, dfv)})
    feeder = PowerFeeder(
        (Bus("0"), Bus("1", inverse_demand=(-r(1e-4, 5e-4), r(0.2, 0.4)))),
        (Line("l1", "0", "1", 0.01, 0.01, rating),), "0")
    market = MarketParams((Lse("A", (Generator("1", r(1e-4, 3e-4), r(0.03, 0.06)),)),))
    ev = EvParams()
    return CoupledProblem(net, feeder, ev, market, generate_catalog(net, ev, k=k, v2g=v2g))


def two_bus(dev=0.0, dfv=0.0, rating=5000.0, floor=0.0, lses=1, a=-0.01, b=1.0,
            d=1e-3, e=0.1, rho=2.0, wholesale=0.05, tso_max=float("inf")):
    """Power-only instance: a 2-bus feeder with no stations and one trivial OD."""
    arcs = (Arc(1, 2, 0.5, 100.0, 10.0, 0.2),)
    net = TransportNetwork((1, 2), arcs, {}, {(1, 2): (dev, dfv)})
    feeder = PowerFeeder(
        (Bus("0"), Bus("1", demand_floor=floor, inverse_demand=(a, b))),
        (Line("l1", "0", "1", 0.01, 0.01, rating),), "0",
        tso_active_bounds=(0.0, tso_max), wholesale_price=wholesale)
    market = MarketParams(tuple(Lse(f"L{k}", (Generator("1", d, e),)) for k in range(lses)),
                          shedding_penalty=rho)
    ev = EvParams()
    return CoupledProblem(net, feeder, ev, market, generate_catalog(net, ev, k=2, v2g=False))


# ── Random road graphs and the brute-force path oracle ─────────────────────

def random_network(rng, max_nodes=8, max_stations=2):
    """Random directed graph with random arc energies and up to two stations."""
    n = rng.randint(2, max_nodes)
    nodes = tuple(range(1, n + 1))
    arcs = []
    for u in nodes:
        for v in nodes:
            if u != v and rng.random() < 0.35:
                # distance 1-10 km at 0.2-1.5 kWh/km: 0.2-15 kWh per arc
                arcs.append(Arc(u, v, rng.uniform(0.1, 1.0), 100.0, rng.uniform(1.0, 10.0),
                                rng.uniform(0.2, 1.5)))
    stations = {s: ChargingStation(s, 0.1, 0.01, 5, "b1")
                for s in rng.sample(nodes, min(n, rng.randint(0, max_stations)))}
    return TransportNetwork(nodes, tuple(arcs), stations, {})


def brute_force_paths(net, od, params, v2g=True):
    """All simple paths of the expanded network with at most two actions,
    no discharge-discharge pair, filtered by the segment inequalities.

    Returns {(base node sequence, ((station, kind), ...))}.
    """
    g = expand_network(net)
    r, s = od
    out = set()
    for p in nx.all_simple_paths(g, r, s):
        base = tuple(x for x in p if not isinstance(x, VirtualNode))
        acts = [Action(x.node, x.kind, base.index(x.node)) for x in p if isinstance(x, VirtualNode)]
        kinds = tuple(a.kind for a in acts)
        if len(acts) > 2 or kinds == (DISCHARGE, DISCHARGE):
            continue
        if not v2g and DISCHARGE in kinds:
            continue
        if any(a.position in (0, len(base) - 1) for a in acts):
            continue
        if not is_feasible_literal(base, acts, params, net):
            continue
        if any(e <= 1e-9 for e in _action_energies(net, base, acts, params)):
            continue
        out.add((base, tuple((a.node, a.kind) for a in acts)))
    return out


def _action_energies(net, nodes, acts, params):
    """Energy moved at each action, from the refill / drain-to-level rules."""
    arc = {a.key: a for a in net.arcs}
    level, out = params.battery_capacity, []
    at = {a.position: a for a in acts}
    for k, n in enumerate(nodes):
        if k:
            level -= arc[(nodes[k - 1], n)].energy
        if k in at:
            target = (params.battery_capacity if at[k].kind != DISCHARGE
                      else params.post_discharge_level)
            out.append(abs(target - level))
            level = target
    return out


def random_graphs(count, seed=0):
    rng = random.Random(seed)
    return [random_network(rng) for _ in range(count)]
