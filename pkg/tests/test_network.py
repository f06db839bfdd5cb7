"""Tests for the road-network and feeder data model and their loaders.

Test groups
-----------
1. TNTP transport loading
2. Transport validation
3. Feeder loading and radiality
4. Scenarios: load scaling and outages
5. Round trips through the serialisers
6. Market parameter checks
"""

import math
import textwrap

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2geq.assembly import CoupledProblem
from v2geq.network import (Arc, Bus, ChargingStation, EvParams, Generator, Line, Lse, MarketParams,
                           ModelError, PowerFeeder, ScenarioSpec, TransportNetwork, apply_scenario,
                           dump_feeder, dump_transport_tntp, feeder_from_dict, feeder_to_dict,
                           load_feeder, load_scenario, load_transport_tntp, params_from_mapping,
                           params_to_mapping, transport_from_dict, transport_to_dict)
from v2geq.paths import generate_catalog
from v2geq.scenario import bundled_case

TWO_NODE_NET = textwrap.dedent("""\
    <NUMBER OF ZONES> 2
    <NUMBER OF NODES> 2
    <FIRST THRU NODE> 1
    <NUMBER OF LINKS> 2
    <END OF METADATA>

    ~ init term capacity length free_flow_time b power ;
    \t1\t2\t100.0\t10.0\t0.5\t0.15\t4\t;
    \t2\t1\t100.0\t10.0\t0.5\t0.15\t4\t;
    """)

TWO_NODE_TRIPS = textwrap.dedent("""\
    <NUMBER OF ZONES> 2
    <TOTAL OD FLOW> 30.0
    <END OF METADATA>

    Origin 1
    \t2 : 30.0;
    """)


def feeder_data(lines=(("l1", "0", "1"), ("l2", "1", "2")), buses=("0", "1", "2"), root="0"):
    return {"tso_bus": root,
            "buses": [{"id": b} for b in buses],
            "lines": [{"id": i, "from": u, "to": v, "r": 0.01, "x": 0.01, "rating": 100.0}
                      for i, u, v in lines]}


@pytest.fixture(scope="module")
def sioux_falls():
    return bundled_case("sioux_falls")


# ── 1. TNTP transport loading ─────────────────────────────────────────────────

def test_sioux_falls_size(sioux_falls):
    net = sioux_falls.transport
    assert len(net.nodes) == 24
    assert len(net.arcs) == 76
    assert len(net.stations) == 6
    assert net.od_pairs()


def test_two_node_round_trip_network():
    net = load_transport_tntp(TWO_NODE_NET, TWO_NODE_TRIPS, {"ev_share": 0.4})
    assert net.nodes == (1, 2)
    assert {a.key for a in net.arcs} == {(1, 2), (2, 1)}
    assert net.demands[(1, 2)] == pytest.approx((12.0, 18.0))
    assert net.od_pairs() == [(1, 2)]


def test_units_are_converted():
    net = load_transport_tntp(TWO_NODE_NET, TWO_NODE_TRIPS,
                              {"time_unit": "min", "length_unit": "m", "consumption_rate": 0.25})
    a = net.arcs[0]
    assert a.free_flow_time == pytest.approx(0.5 / 60)
    assert a.distance == pytest.approx(0.01)
    assert a.energy == pytest.approx(0.0025)


def test_empty_trip_table_gives_zero_demand():
    net = load_transport_tntp(TWO_NODE_NET, "\n\n")
    assert net.demands == {}
    assert net.od_pairs() == []


# ── 2. Transport validation ───────────────────────────────────────────────────

def test_malformed_link_row():
    bad = TWO_NODE_NET.replace("\t2\t1\t100.0\t10.0\t0.5\t0.15\t4\t;", "\t2\t1\tabc\t10.0\t0.5\t;")
    with pytest.raises(ModelError, match="non-numeric"):
        load_transport_tntp(bad, TWO_NODE_TRIPS)


def test_dangling_node_reference():
    bad = TWO_NODE_NET.replace("\t2\t1\t100.0", "\t2\t7\t100.0")
    with pytest.raises(ModelError, match="dangling"):
        load_transport_tntp(bad, TWO_NODE_TRIPS)
    with pytest.raises(ModelError, match="dangling"):
        load_transport_tntp(TWO_NODE_NET, TWO_NODE_TRIPS.replace("2 : 30.0", "9 : 30.0"))


def test_nonpositive_capacity():
    bad = TWO_NODE_NET.replace("\t2\t1\t100.0", "\t2\t1\t0.0")
    with pytest.raises(ModelError, match="capacity"):
        load_transport_tntp(bad, TWO_NODE_TRIPS)


def test_link_count_must_match_header():
    with pytest.raises(ModelError, match="header"):
        load_transport_tntp(TWO_NODE_NET.replace("LINKS> 2", "LINKS> 3"), TWO_NODE_TRIPS)


def test_network_rejects_unknown_station_node():
    arcs = (Arc(1, 2, 0.5, 100.0, 10.0, 0.2),)
    with pytest.raises(ModelError):
        TransportNetwork((1, 2), arcs, {5: ChargingStation(5, 0.1, 0.01, 2, "b")}, {})
    with pytest.raises(ModelError):
        TransportNetwork((1, 2), arcs, {}, {(1, 2): (-1.0, 0.0)})


# ── 3. Feeder loading and radiality ───────────────────────────────────────────

def test_ieee123_size(sioux_falls):
    fd = sioux_falls.feeder
    assert len(fd.buses) == 123
    assert len(fd.lines) == 122
    assert fd.tso_bus == "150"


def test_two_bus_feeder_accepted():
    fd = feeder_from_dict(feeder_data(lines=(("l1", "0", "1"),), buses=("0", "1")))
    assert fd.bus_ids == ("0", "1")
    assert fd.non_root_buses == ("1",)


def test_lines_are_oriented_away_from_root():
    fd = feeder_from_dict(feeder_data(lines=(("l1", "1", "0"), ("l2", "2", "1"))))
    assert {(ln.from_bus, ln.to_bus) for ln in fd.lines} == {("0", "1"), ("1", "2")}


def test_duplicate_line_rejected():
    with pytest.raises(ModelError, match="radiality"):
        feeder_from_dict(feeder_data(lines=(("l1", "0", "1"), ("l2", "1", "0"), ("l3", "1", "2"))))


def test_cycle_rejected():
    with pytest.raises(ModelError, match="cycle"):
        feeder_from_dict(feeder_data(lines=(("l1", "0", "1"), ("l2", "1", "2"), ("l3", "2", "0"))))


def test_disconnected_bus_rejected():
    with pytest.raises(ModelError, match="disconnected"):
        feeder_from_dict(feeder_data(lines=(("l1", "0", "1"),)))


def test_missing_tso_bus_rejected():
    with pytest.raises(ModelError, match="TSO"):
        feeder_from_dict(feeder_data(root="9"))


def test_invalid_json(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    with pytest.raises(ModelError, match="JSON"):
        load_feeder(f)


# ── 4. Scenarios ───────────────────────────────────────────────────────────

def test_load_scale_stretches_demand(sioux_falls):
    fd = sioux_falls.feeder
    scaled = apply_scenario(fd, ScenarioSpec("s", load_scale=1.5))
    for b0, b1 in zip(fd.buses, scaled.buses):
        assert b1.demand_floor == pytest.approx(1.5 * b0.demand_floor)
        assert b1.q_load == pytest.approx(1.5 * b0.q_load)
        if b0.inverse_demand is not None:
            a0, bb0 = b0.inverse_demand
            a1, bb1 = b1.inverse_demand
            assert a1 == pytest.approx(a0 / 1.5) and bb1 == bb0
            # quantity demanded at any price scales by k
            price = 0.5 * bb0
            assert (price - bb1) / a1 == pytest.approx(1.5 * (price - bb0) / a0)


def test_identity_scenario_returns_same_feeder(sioux_falls):
    assert apply_scenario(sioux_falls.feeder, ScenarioSpec("base")) is sioux_falls.feeder


def test_island_scenario_components(sioux_falls):
    sc = sioux_falls.scenarios["island"]
    fd = apply_scenario(sioux_falls.feeder, sc)
    islands = fd.islands()
    assert len(islands) == 3
    assert islands[0][0] == "150"
    assert {h for h, _ in islands[1:]} == {"18", "72"}
    assert sum(len(b) for _, b in islands) == 123
    assert len(fd.lines) == 120


def test_outage_of_nonexistent_line(sioux_falls):
    with pytest.raises(ModelError, match="nonexistent"):
        apply_scenario(sioux_falls.feeder, ScenarioSpec("x", outages=(("1", "999"),)))


def test_scenario_file_parsing():
    sc = load_scenario('name = "stress"\nload_scale = 1.5\noutages = [["1", "2"]]\nv2g = false\n')
    assert sc == ScenarioSpec("stress", 1.5, (("1", "2"),), False, None)


# ── 5. Round trips ─────────────────────────────────────────────────────────

@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 6), data=st.data())
def test_transport_round_trip(n, data):
    arcs = []
    for u in range(1, n + 1):
        for v in range(1, n + 1):
            if u != v and data.draw(st.booleans()):
                arcs.append(Arc(u, v, data.draw(st.floats(0.01, 5.0)), data.draw(st.floats(1.0, 1e4)),
                                data.draw(st.floats(0.1, 50.0)), 0.2))
    if not arcs:
        arcs.append(Arc(1, 2, 1.0, 10.0, 1.0, 0.2))
    demands = {(1, n): (data.draw(st.floats(0.0, 100.0)), data.draw(st.floats(0.01, 100.0)))}
    stations = {2: ChargingStation(2, 0.1, 0.02, 3, "b1")}
    net = TransportNetwork(tuple(range(1, n + 1)), tuple(arcs), stations, demands)
    assert transport_from_dict(transport_to_dict(net)) == net
    text, trips, side = dump_transport_tntp(net)
    back = load_transport_tntp(text, trips, side)
    assert back.arcs == net.arcs and back.stations == net.stations
    for od, (dev, dfv) in net.demands.items():
        assert back.demands[od] == pytest.approx((dev, dfv))


def test_feeder_round_trip(sioux_falls):
    fd = sioux_falls.feeder
    assert feeder_from_dict(feeder_to_dict(fd)) == fd
    assert load_feeder(dump_feeder(fd)) == fd


def test_params_round_trip(sioux_falls):
    ev, market = params_from_mapping(params_to_mapping(sioux_falls.ev, sioux_falls.market))
    assert ev == sioux_falls.ev and market == sioux_falls.market


# ── 6. Market parameter checks ──────────────────────────────────────────────

def _simple_case(rho=2.0, gen_bus="1"):
    net = TransportNetwork((1, 2), (Arc(1, 2, 0.5, 100.0, 10.0, 0.2),), {}, {(1, 2): (0.0, 1.0)})
    fd = PowerFeeder((Bus("0"), Bus("1", inverse_demand=(-0.01, 1.0))),
                     (Line("l1", "0", "1", 0.01, 0.01, 100.0),), "0")
    market = MarketParams((Lse("A", (Generator(gen_bus, 1e-3, 0.1),)),), shedding_penalty=rho)
    ev = EvParams()
    return net, fd, ev, market


def test_shedding_penalty_must_exceed_intercept():
    net, fd, ev, market = _simple_case(rho=0.5)
    with pytest.raises(ModelError, match="shedding"):
        CoupledProblem(net, fd, ev, market, generate_catalog(net, ev))


def test_generator_on_tso_bus_rejected():
    net, fd, ev, market = _simple_case(gen_bus="0")
    with pytest.raises(ModelError, match="TSO"):
        CoupledProblem(net, fd, ev, market, generate_catalog(net, ev))


def test_generator_cost_must_be_positive():
    with pytest.raises(ModelError):
        MarketParams((Lse("A", (Generator("1", 0.0, 0.1),)),))
    with pytest.raises(ModelError):
        MarketParams((Lse("A", (Generator("1", 1e-3, 0.1),)), Lse("A", (Generator("2", 1e-3, 0.1),))))


def test_infinite_bounds_survive_json():
    fd = feeder_from_dict(feeder_data())
    assert math.isinf(fd.tso_active_bounds[1])
    assert math.isinf(feeder_from_dict(feeder_to_dict(fd)).tso_active_bounds[1])
