"""Tests for the expanded network, energy feasibility and path costs.

Test groups
-----------
1. Expanded network
2. State-of-charge feasibility on a three-node line
3. Path generation
4. Generalised path costs
5. Link and station delay functions
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2geq.network import Arc, ChargingStation, EvParams, ModelError, TransportNetwork
from v2geq.paths import (CHARGE, DISCHARGE, PATTERNS, Action, ExpandedPath, VirtualNode, bpr_time,
                         expand_network, generate_catalog, generate_paths, is_feasible_literal,
                         path_cost_ev, path_cost_fv, simulate_soc, smoothed_wait)
from v2geq.scenario import bundled_case

# Line 1-2-3, 5 kWh per arc, station at 2: B_max 10, E_min 2, B_min 4
LINE_PARAMS = EvParams(battery_capacity=10.0, post_discharge_level=4.0, range_anxiety=0.2)
ARC_KWH = 5.0


def line_network(stations=(2,), extra_arcs=()):
    arcs = (Arc(1, 2, 0.5, 100.0, 5.0, 1.0), Arc(2, 3, 0.5, 100.0, 5.0, 1.0)) + tuple(extra_arcs)
    st_ = {n: ChargingStation(n, 0.1, 0.01, 2, "b1") for n in stations}
    nodes = sorted({a.tail for a in arcs} | {a.head for a in arcs})
    return TransportNetwork(tuple(nodes), arcs, st_, {(1, 3): (10.0, 0.0)})


@pytest.fixture(scope="module")
def sioux_falls():
    return bundled_case("sioux_falls")


# ── 1. Expanded network ─────────────────────────────────────────────────────

def test_expansion_adds_two_virtual_nodes_per_station():
    net = line_network(stations=(2,))
    g = expand_network(net)
    assert g.number_of_nodes() == 3 + 2
    for kind in (CHARGE, DISCHARGE):
        v = VirtualNode(2, kind)
        assert g.has_edge(2, v) and g.has_edge(v, 3)


def test_expansion_two_stations():
    net = line_network(stations=(1, 2))
    assert expand_network(net).number_of_nodes() == 3 + 4


def test_expansion_without_stations_is_identity():
    net = line_network(stations=())
    g = expand_network(net)
    assert set(g.nodes) == set(net.nodes)
    assert set(g.edges) == {a.key for a in net.arcs}


def test_sioux_falls_expansion(sioux_falls):
    g = expand_network(sioux_falls.transport)
    assert g.number_of_nodes() == 24 + 12
    assert sum(isinstance(n, VirtualNode) for n in g.nodes) == 12


# ── 2. State-of-charge feasibility ──────────────────────────────────────────

def test_charge_at_middle_is_feasible():
    net = line_network()
    acts = (Action(2, CHARGE, 1),)
    assert is_feasible_literal((1, 2, 3), acts, LINE_PARAMS, net)
    trace, energies = simulate_soc((1, 2, 3), acts, LINE_PARAMS, net)
    assert energies == pytest.approx((ARC_KWH,))
    assert trace.arrival == pytest.approx((10.0, 5.0, 5.0))


def test_discharge_at_middle_is_infeasible():
    net = line_network()
    acts = (Action(2, DISCHARGE, 1),)
    assert not is_feasible_literal((1, 2, 3), acts, LINE_PARAMS, net)
    assert simulate_soc((1, 2, 3), acts, LINE_PARAMS, net) is None


def test_no_action_is_infeasible():
    net = line_network()
    assert not is_feasible_literal((1, 2, 3), (), LINE_PARAMS, net)
    assert simulate_soc((1, 2, 3), (), LINE_PARAMS, net) is None


def test_exact_boundary_is_kept():
    # reaching the destination with exactly E_min left
    params = EvParams(battery_capacity=10.0, post_discharge_level=6.0, range_anxiety=0.5)
    net = line_network()
    assert is_feasible_literal((1, 2, 3), (Action(2, CHARGE, 1),), params, net)


def test_zero_energy_charge_is_rejected():
    # a charge right after the origin moves nothing
    net = TransportNetwork((1, 2, 3), (Arc(1, 2, 0.1, 100.0, 1e-12, 0.0), Arc(2, 3, 0.1, 100.0, 5.0, 1.0)),
                           {2: ChargingStation(2, 0.1, 0.01, 2, "b1")}, {})
    assert simulate_soc((1, 2, 3), (Action(2, CHARGE, 1),), LINE_PARAMS, net) is None


def test_ev_params_invariants():
    with pytest.raises(ModelError):
        EvParams(battery_capacity=10.0, post_discharge_level=1.0, range_anxiety=0.2)
    with pytest.raises(ModelError):
        EvParams(battery_capacity=10.0, post_discharge_level=12.0)
    with pytest.raises(ModelError):
        EvParams(pile_power=0.0)


# ── 3. Path generation ─────────────────────────────────────────────────────

def test_line_generates_single_charge_path():
    paths = generate_paths((1, 3), line_network(), LINE_PARAMS, k=None)
    assert [p.key for p in paths] == [((1, 2, 3), ((2, CHARGE),))]
    assert paths[0].pattern == "1-1"
    assert paths[0].distance == pytest.approx(10.0)


def test_discharge_path_appears_with_short_last_leg():
    net = TransportNetwork((1, 2, 3), (Arc(1, 2, 0.5, 100.0, 5.0, 1.0), Arc(2, 3, 0.5, 100.0, 1.0, 1.0)),
                           {2: ChargingStation(2, 0.1, 0.01, 2, "b1")}, {})
    keys = {p.key for p in generate_paths((1, 3), net, LINE_PARAMS, k=None)}
    assert ((1, 2, 3), ()) in keys
    assert ((1, 2, 3), ((2, DISCHARGE),)) in keys
    no_v2g = {p.key for p in generate_paths((1, 3), net, LINE_PARAMS, k=None, allow_discharge=False)}
    assert ((1, 2, 3), ((2, DISCHARGE),)) not in no_v2g


def test_patterns_come_from_the_table(sioux_falls):
    cat = generate_catalog(sioux_falls.transport, sioux_falls.ev, k=sioux_falls.k, v2g=True)
    assert cat.ev
    for p in cat.ev:
        assert p.pattern == PATTERNS[tuple(a.kind for a in p.actions)]
        assert all(0 < a.position < len(p.nodes) - 1 for a in p.actions)
        assert all(e > 0 for e in p.energies)
    assert any(p.has_discharge for p in cat.ev)


def test_catalog_without_v2g_has_no_discharge(sioux_falls):
    cat = generate_catalog(sioux_falls.transport, sioux_falls.ev, k=sioux_falls.k, v2g=False)
    assert not any(p.has_discharge for p in cat.ev)


def test_sioux_falls_fv_free_flow_cost(sioux_falls):
    net, ev = sioux_falls.transport, sioux_falls.ev
    cat = generate_catalog(net, ev, k=sioux_falls.k, v2g=False)
    fv = [p for p in cat.fv if p.od == (1, 20)]
    assert fv
    times = {i: a.free_flow_time for i, a in enumerate(net.arcs)}
    best = min(path_cost_fv(p, times, ev) for p in fv)
    import networkx as nx

    g = nx.DiGraph()
    for a in net.arcs:
        g.add_edge(a.tail, a.head, t=a.free_flow_time)
    assert best == pytest.approx(ev.time_value_fv * nx.shortest_path_length(g, 1, 20, weight="t"))


def test_catalog_is_deterministic(sioux_falls):
    net, ev = sioux_falls.transport, sioux_falls.ev
    a = generate_catalog(net, ev, k=sioux_falls.k)
    b = generate_catalog(net, ev, k=sioux_falls.k)
    assert [p.energies for p in a.ev] == [p.energies for p in b.ev]


@settings(max_examples=25, deadline=None)
@given(b_max=st.floats(10.0, 40.0), extra=st.floats(0.0, 20.0))
def test_larger_battery_keeps_feasible_paths(b_max, extra):
    net = line_network(extra_arcs=(Arc(1, 3, 2.0, 100.0, 12.0, 1.0),))
    small = EvParams(battery_capacity=b_max, post_discharge_level=0.5 * b_max, range_anxiety=0.1)
    big = EvParams(battery_capacity=b_max + extra, post_discharge_level=0.5 * b_max, range_anxiety=0.1 * b_max / (b_max + extra))
    base_small = {p.nodes for p in generate_paths((1, 3), net, small, k=None, allow_discharge=False)}
    base_big = {p.nodes for p in generate_paths((1, 3), net, big, k=None, allow_discharge=False)}
    assert base_small <= base_big


# ── 4. Generalised path costs ───────────────────────────────────────────────

def test_ev_cost_hand_computed():
    params = EvParams(time_value_ev=20.0, degradation_cost=0.05, pile_power=50.0)
    p = ExpandedPath((1, 3), (1, 2, 3), (0, 1), (Action(2, CHARGE, 1),), (5.0,), "1-1", 10.0)
    cost = path_cost_ev(p, {0: 0.25, 1: 0.25}, {2: 0.1}, {2: (0.3, 0.0)}, params)
    # 20*(0.5 + 0.1 + 5/50) + 5*(0.3 + 0.05)
    assert cost == pytest.approx(15.75)


def test_fv_cost_one_arc():
    params = EvParams(time_value_fv=15.0)
    p = ExpandedPath((1, 2), (1, 2), (0,))
    assert path_cost_fv(p, {0: 1.0}, params) == pytest.approx(15.0)


def test_discharge_revenue_enters_negatively():
    params = EvParams(time_value_ev=0.0, degradation_cost=0.03)
    p = ExpandedPath((1, 3), (1, 2, 3), (0, 1), (Action(2, DISCHARGE, 1),), (6.0,), "2", 10.0)
    cost = path_cost_ev(p, {0: 0.0, 1: 0.0}, {2: 0.0}, {2: (0.0, 0.5)}, params)
    assert cost == pytest.approx(-6.0 * (0.5 - 0.03))
    assert cost < 0


# ── 5. Delay functions ─────────────────────────────────────────────────────

def test_bpr_at_capacity():
    assert bpr_time(2.0, 100.0, 100.0) == pytest.approx(1.15 * 2.0)
    assert bpr_time(2.0, 0.0, 100.0) == pytest.approx(2.0)


def test_wait_is_flat_below_pile_count():
    assert smoothed_wait(3.0, 0.1, 0.5, 5, 1.0) == pytest.approx(0.1)


def test_wait_breakpoint_value_and_slope():
    base, rate, piles, period = 0.1, 0.5, 5, 2.0
    eps = 1.0 / period
    x_break = (piles + eps) / period
    expected = base + rate / (2 * period ** 2)
    assert smoothed_wait(x_break, base, rate, piles, period) == pytest.approx(expected)
    h = 1e-7
    left = (smoothed_wait(x_break, base, rate, piles, period)
            - smoothed_wait(x_break - h, base, rate, piles, period)) / h
    right = (smoothed_wait(x_break + h, base, rate, piles, period)
             - smoothed_wait(x_break, base, rate, piles, period)) / h
    assert left == pytest.approx(right, rel=1e-4)
    x0 = piles / period
    d0 = (smoothed_wait(x0 + h, base, rate, piles, period) - smoothed_wait(x0, base, rate, piles, period)) / h
    assert abs(d0) < 1e-5


def test_wait_is_vectorised():
    w = smoothed_wait(np.array([0.0, 10.0]), 0.1, 0.5, 5, 1.0)
    assert w.shape == (2,) and w[1] > w[0]
