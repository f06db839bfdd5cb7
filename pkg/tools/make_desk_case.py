"""Write the synthetic desk-scale cases into src/v2geq/data/.

``desk`` is the ten-node / ten-bus case used for the scenario sweep;
``rerouting`` is a single OD with two routes, the longer one passing a
station on a supply-short bus.

Layout
------
Transport (10 nodes, two-way arcs, km):

    1 --40-- 3 --30-- 4 (hub station) --50-- 5 (station, pocket bus) --10-- 7
    2 --35--/         |  \\--35-- 6 --15----------------------------------/
                      |--50-- 8 (station, island bus) --10-- 10
                      \\--35-- 9 --15-----------------------------/

Long trips (1,2 -> 7,10) exceed the usable range and must charge at the hub.
The routes through stations 5 and 8 are the longer alternatives; a vehicle
leaving the hub full can discharge there and still reach its destination.

Feeder (10 buses): trunk 1(TSO)-2-3-4-5, a load pocket 3-6-7 behind a rated
line, and a branch 2-8-9-10 that becomes an island when line 2-8 is cut.

All values are synthetic and chosen to exhibit the qualitative regimes.
"""

import json
import sys
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "v2geq" / "data"

EDGES = [(1, 3, 40), (2, 3, 35), (3, 4, 30), (4, 5, 50), (5, 7, 10), (4, 6, 35), (6, 7, 15),
         (4, 8, 50), (8, 10, 10), (4, 9, 35), (9, 10, 15)]
SPEED = 60.0  # km/h
CAPACITY = 60.0  # veh/h
TRIPS = {(1, 7): 16.0, (2, 7): 16.0, (1, 10): 16.0, (2, 10): 16.0, (1, 4): 10.0}

STATIONS = [
    {"node": 4, "base_wait": 0.05, "congestion_rate": 0.01, "piles": 30, "bus": "5"},
    {"node": 5, "base_wait": 0.05, "congestion_rate": 0.02, "piles": 8, "bus": "7"},
    {"node": 8, "base_wait": 0.05, "congestion_rate": 0.02, "piles": 8, "bus": "10"},
]

BUSES = {  # id: (demand floor kW, a $/kWh per kW, b $/kWh)
    "2": (80.0, -0.002, 0.30), "3": (80.0, -0.002, 0.30), "4": (80.0, -0.002, 0.30),
    "5": (80.0, -0.002, 0.30), "6": (110.0, -0.002, 0.35), "7": (110.0, -0.002, 0.35),
    "8": (60.0, -0.002, 0.35), "9": (60.0, -0.002, 0.35), "10": (60.0, -0.002, 0.35),
}
LINES = [("1", "2", 3000.0), ("2", "3", 3000.0), ("3", "4", 3000.0), ("4", "5", 3000.0),
         ("3", "6", 250.0), ("6", "7", 3000.0), ("2", "8", 3000.0), ("8", "9", 3000.0),
         ("9", "10", 3000.0)]


def net_tntp():
    arcs = [(u, v, d) for u, v, d in EDGES] + [(v, u, d) for u, v, d in EDGES]
    arcs.sort()
    out = ["<NUMBER OF ZONES> 10", "<NUMBER OF NODES> 10", "<FIRST THRU NODE> 1",
           f"<NUMBER OF LINKS> {len(arcs)}", "<END OF METADATA>", "",
           "~\tinit\tterm\tcapacity\tlength\tfree_flow_time\tb\tpower\t;"]
    for u, v, d in arcs:
        out.append(f"\t{u}\t{v}\t{CAPACITY!r}\t{float(d)!r}\t{d / SPEED!r}\t0.15\t4.0\t;")
    return "\n".join(out) + "\n"


def trips_tntp():
    out = ["<NUMBER OF ZONES> 10", f"<TOTAL OD FLOW> {sum(TRIPS.values())!r}", "<END OF METADATA>", ""]
    for r in sorted({r for r, _ in TRIPS}):
        out.append(f"Origin {r}")
        out.append("".join(f"\t{s} : {v!r};" for (o, s), v in sorted(TRIPS.items()) if o == r))
    return "\n".join(out) + "\n"


def feeder_json():
    buses = [{"id": "1", "q_load": 0.0}]
    for bid, (floor, a, b) in BUSES.items():
        buses.append({"id": bid, "q_load": 0.0, "demand_floor": floor, "inverse_demand": [a, b]})
    lines = [{"id": f"L{f}-{t}", "from": f, "to": t, "r": 0.003, "x": 0.003, "rating": rating}
             for f, t, rating in LINES]
    return {"name": "desk-10bus", "tso_bus": "1", "base_kva": 1000.0,
            "voltage_bounds": [0.95 ** 2, 1.05 ** 2], "voltage_reference": 1.0,
            "tso_active_bounds": [0.0, 5000.0], "wholesale_price": 0.05,
            "buses": buses, "lines": lines}


PARAMS = """\
# Synthetic parameters for the desk-scale case (hours, km, kW, kWh, $).

[transport]
time_unit = "h"
length_unit = "km"
period = 1.0
consumption_rate = 0.2
ev_share = 0.5
stations = [
{stations}
]

[ev]
battery_capacity = 24.0
post_discharge_level = 8.0
range_anxiety = 0.2
time_value_ev = 20.0
time_value_fv = 20.0
degradation_cost = 0.03
pile_power = 50.0

[market]
shedding_penalty = 2.0

[[market.lse]]
name = "A"
generators = [
  {{ bus = "4", d = 0.0002, e = 0.04, p_max = 400.0 }},
  {{ bus = "9", d = 0.0004, e = 0.05, p_max = 40.0 }},
]

[[market.lse]]
name = "B"
generators = [
  {{ bus = "5", d = 0.0002, e = 0.045, p_max = 400.0 }},
  {{ bus = "9", d = 0.0004, e = 0.05, p_max = 40.0 }},
]
"""

SCENARIOS = {
    "base": "load_scale = 1.0\noutages = []\n",
    "stress": "load_scale = 1.5\noutages = []\n",
    "island": "load_scale = 1.0\noutages = [[\"2\", \"8\"]]\n",
}


def write_desk(out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "net.tntp").write_text(net_tntp())
    (out / "trips.tntp").write_text(trips_tntp())
    (out / "feeder.json").write_text(json.dumps(feeder_json(), indent=1) + "\n")
    st = ",\n".join("  { " + ", ".join(f"{k} = {json.dumps(v)}" for k, v in s.items()) + " }"
                    for s in STATIONS)
    (out / "params.toml").write_text(PARAMS.format(stations=st))
    for name, body in SCENARIOS.items():
        (out / f"{name}.toml").write_text(f'name = "{name}"\n' + body)
    return out


# -- rerouting toy: 1-2-4 (60 km) or 1-3-4 (70 km) with a station at 3 -------------

REROUTE_NET = [(1, 2, 30), (2, 4, 30), (1, 3, 60), (3, 4, 10)]

REROUTE_PARAMS = """\
# Synthetic two-route case: the station at node 3 sits on a supply-short bus.
k = 4

[transport]
time_unit = "h"
length_unit = "km"
period = 1.0
consumption_rate = 0.2
ev_share = 0.5
stations = [
  { node = 3, base_wait = 0.05, congestion_rate = 0.02, piles = 10, bus = "3" },
]

[ev]
battery_capacity = 24.0
post_discharge_level = 8.0
range_anxiety = 0.2
time_value_ev = 20.0
time_value_fv = 20.0
degradation_cost = 0.03
pile_power = 50.0

[market]
shedding_penalty = 2.0

[[market.lse]]
name = "A"
generators = [ { bus = "2", d = 0.0002, e = 0.04, p_max = 400.0 } ]
"""


def write_rerouting(out):
    out.mkdir(parents=True, exist_ok=True)
    arcs = sorted([(u, v, d) for u, v, d in REROUTE_NET] + [(v, u, d) for u, v, d in REROUTE_NET])
    net = ["<NUMBER OF ZONES> 4", "<NUMBER OF NODES> 4", "<FIRST THRU NODE> 1",
           f"<NUMBER OF LINKS> {len(arcs)}", "<END OF METADATA>", "",
           "~\tinit\tterm\tcapacity\tlength\tfree_flow_time\tb\tpower\t;"]
    net += [f"\t{u}\t{v}\t{CAPACITY!r}\t{float(d)!r}\t{d / SPEED!r}\t0.15\t4.0\t;" for u, v, d in arcs]
    (out / "net.tntp").write_text("\n".join(net) + "\n")
    (out / "trips.tntp").write_text("<NUMBER OF ZONES> 4\n<TOTAL OD FLOW> 20.0\n<END OF METADATA>\n\n"
                                    "Origin 1\n\t4 : 20.0;\n")
    feeder = {"name": "rerouting-3bus", "tso_bus": "1", "base_kva": 1000.0,
              "tso_active_bounds": [0.0, 5000.0], "wholesale_price": 0.05,
              "buses": [{"id": "1"},
                        {"id": "2", "demand_floor": 50.0, "inverse_demand": [-0.002, 0.3]},
                        {"id": "3", "demand_floor": 150.0, "inverse_demand": [-0.002, 0.35]}],
              "lines": [{"id": "L1-2", "from": "1", "to": "2", "r": 0.003, "x": 0.003, "rating": 3000.0},
                        {"id": "L2-3", "from": "2", "to": "3", "r": 0.003, "x": 0.003, "rating": 100.0}]}
    (out / "feeder.json").write_text(json.dumps(feeder, indent=1) + "\n")
    (out / "params.toml").write_text(REROUTE_PARAMS)
    return out


def main(root=DATA):
    return [write_desk(root / "desk"), write_rerouting(root / "rerouting")]


if __name__ == "__main__":
    for p in main(Path(sys.argv[1]) if len(sys.argv) > 1 else DATA):
        print(p)
