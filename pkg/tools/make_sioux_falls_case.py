"""Convert public Sioux Falls and IEEE-123 data into src/v2geq/data/sioux_falls/.

Inputs (not shipped; pass their directory as the first argument):

* ``sf.sqlite`` -- Sioux Falls network as distributed with AequilibraE
  (``aequilibrae/reference_files/sioux_falls.zip`` in the aequilibrae 1.6.2
  wheel; links with distance in metres, free-flow time in minutes,
  capacity in vehicles per day);
* ``demand.omx`` -- the matching 24x24 demand matrix from the same archive
  (OMX / HDF5, read with h5py);
* ``ieee123_bus_data.csv`` and ``ieee123_branch_data.csv`` -- the IEEE
  123-bus feeder as flat tables (``distopf/cases/csv/ieee123/`` in the
  distopf 1.0.2 wheel; three-phase impedances in p.u. on a 1 MVA per-phase
  base).

Feeder reduction to a single-phase tree of 123 buses and 122 lines:

* the two normally-open tie switches (151-300 and 54-94) are dropped;
* the five regulator / transformer pseudo-buses and the two closed switches
  adjacent to them (150r-149 and 61-61s) have negligible impedance and are
  merged into their upstream bus (150, 9, 25, 61, 160);
* line r and x are the mean of the self-impedances of the phases present;
  the base is 3 MVA three-phase (1 MVA per phase);
* bus loads are the phase sums in kW; each load bus gets a demand floor of
  80 % of its nominal load and an inverse demand that clears the nominal
  load at 0.10 $/kWh;
* generator buses get a symmetric reactive range (inverter / capacitor
  support) so that islands without the upstream grid can balance kVAr;
* line ratings are synthetic: 1.5 times the larger of the nominal load and
  the generation / reactive capability downstream of the line, at least
  150 kW.

Everything marked synthetic in params.toml is chosen for plausibility, not
taken from a published source.
"""

import csv
import json
import sqlite3
import sys
from pathlib import Path

import h5py
import networkx as nx
import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "v2geq" / "data" / "sioux_falls"

MERGE = {"150r": "150", "149": "150", "9r": "9", "25r": "25", "61s": "61", "610": "61", "160r": "160"}
ROOT = "150"
BASE_KVA = 3000.0
FLOOR_SHARE = 0.8
PRICE_AT_NOMINAL = 0.10  # $/kWh
RETAIL_INTERCEPT = 0.30  # $/kWh
MIN_RATING = 150.0  # kW
RATING_MARGIN = 1.5
REACTIVE_SUPPORT = {"13": 800.0, "25": 900.0, "60": 800.0, "87": 700.0}  # kVAr, synthetic
ISLAND_CUTS = [["13", "18"], ["67", "72"]]

# Sioux Falls charging stations -> feeder buses (synthetic assignment)
STATIONS = {3: "7", 6: "29", 8: "52", 11: "60", 12: "76", 18: "101"}
ORIGINS = [1, 2, 4, 7, 9]
DESTINATIONS = [13, 19, 20, 23, 24]

PARAMS = """\
# Sioux Falls + IEEE-123 case.  Values below are synthetic (hours, km, kW,
# kWh, $).  The trip table holds the standard daily matrix; demand_scale
# turns the OD subset into an hourly peak.
k = {k}

[transport]
time_unit = "min"
length_unit = "km"
period = 1.0
consumption_rate = 1.5
ev_share = 0.5
demand_scale = 0.1
origins = {origins}
destinations = {destinations}
stations = [
{stations}
]

[ev]
battery_capacity = 24.0
post_discharge_level = 10.0
range_anxiety = 0.2
time_value_ev = 20.0
time_value_fv = 20.0
degradation_cost = 0.03
pile_power = 50.0

[market]
shedding_penalty = 2.0

{lses}"""

GENERATORS = {  # LSE -> [(bus, d $/kWh^2, e $/kWh, p_max kW)], synthetic
    "A": [("13", 0.00005, 0.04, 1500.0), ("25", 0.0004, 0.05, 500.0)],
    "B": [("60", 0.00005, 0.045, 1500.0), ("87", 0.0004, 0.05, 250.0)],
}

SCENARIOS = {
    "base": "load_scale = 1.0\noutages = []\n",
    "stress": "load_scale = 1.5\noutages = []\n",
    "island": "load_scale = 1.0\noutages = " + json.dumps(ISLAND_CUTS) + "\n",
}


def sioux_falls(src):
    con = sqlite3.connect(src / "sf.sqlite")
    rows = con.execute("select a_node, b_node, capacity_ab, distance, free_flow_time, b, power "
                       "from links order by a_node, b_node").fetchall()
    con.close()
    out = ["<NUMBER OF ZONES> 24", "<NUMBER OF NODES> 24", "<FIRST THRU NODE> 1",
           f"<NUMBER OF LINKS> {len(rows)}", "<END OF METADATA>", "",
           "~\tinit\tterm\tcapacity\tlength\tfree_flow_time\tb\tpower\t;"]
    for a, b, cap, dist, fft, bb, pw in rows:
        out.append(f"\t{a}\t{b}\t{float(cap)!r}\t{round(dist / 1000.0, 4)!r}\t{float(fft)!r}"
                   f"\t{float(bb)!r}\t{float(pw)!r}\t;")
    net = "\n".join(out) + "\n"
    with h5py.File(src / "demand.omx", "r") as f:
        mat = np.asarray(f["data"][next(iter(f["data"]))])
    out = ["<NUMBER OF ZONES> 24", f"<TOTAL OD FLOW> {float(mat.sum())!r}", "<END OF METADATA>", ""]
    for r in range(24):
        out.append(f"Origin {r + 1}")
        out.append("".join(f"\t{s + 1} : {float(mat[r, s])!r};" for s in range(24)))
    return net, "\n".join(out) + "\n"


def ieee123(src):
    buses = {r["id"]: r for r in csv.DictReader(open(src / "ieee123_bus_data.csv"))}
    name = {i: MERGE.get(r["name"], r["name"]) for i, r in buses.items()}
    load = {}
    for r in buses.values():
        n = name[r["id"]]
        p = sum(float(r[f"pl_{ph}"]) for ph in "abc") * 1000.0
        q = sum(float(r[f"ql_{ph}"]) for ph in "abc") * 1000.0
        lp, lq = load.get(n, (0.0, 0.0))
        load[n] = (lp + p, lq + q)
    g = nx.Graph()
    for r in csv.DictReader(open(src / "ieee123_branch_data.csv")):
        if r["status"] == "OPEN":
            continue
        u, v = name[r["fb"]], name[r["tb"]]
        if u == v:
            continue
        ph = r["phases"]
        rr = np.mean([float(r[f"r_{p}{p}"]) for p in ph])
        xx = np.mean([float(r[f"x_{p}{p}"]) for p in ph])
        g.add_edge(u, v, r=float(rr), x=float(xx), id=r["name"])
    assert nx.is_tree(g) and g.number_of_nodes() == 123, "unexpected feeder topology"
    tree = nx.bfs_tree(g, ROOT)
    p_max = {}
    for gens in GENERATORS.values():
        for bus, _, _, pm in gens:
            p_max[bus] = p_max.get(bus, 0.0) + pm
    order = sorted(g.nodes, key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0, s))
    bus_rows = []
    for n in order:
        p, q = load.get(n, (0.0, 0.0))
        row = {"id": n, "q_load": round(q, 3)}
        if n in REACTIVE_SUPPORT:
            row["q_bounds"] = [-REACTIVE_SUPPORT[n], REACTIVE_SUPPORT[n]]
        if p > 0:
            a = -(RETAIL_INTERCEPT - PRICE_AT_NOMINAL) / p
            row.update(demand_floor=round(FLOOR_SHARE * p, 3), inverse_demand=[a, RETAIL_INTERCEPT])
        bus_rows.append(row)
    lines = []
    for u, v in nx.bfs_edges(g, ROOT):
        down = nx.descendants(tree, v) | {v}
        nominal = sum(load.get(b, (0.0, 0.0))[0] for b in down)
        support = sum(max(REACTIVE_SUPPORT.get(b, 0.0), p_max.get(b, 0.0)) for b in down)
        nominal = max(nominal, support)
        e = g.edges[u, v]
        lines.append({"id": f"L{u}-{v}", "from": u, "to": v, "r": e["r"], "x": e["x"],
                      "rating": round(max(MIN_RATING, RATING_MARGIN * nominal), 1)})
    feeder = {"name": "ieee123-single-phase", "tso_bus": ROOT, "base_kva": BASE_KVA,
              "voltage_bounds": [0.9 ** 2, 1.1 ** 2], "voltage_reference": 1.0,
              "tso_active_bounds": [0.0, 3000.0], "wholesale_price": 0.05,
              "note": "IEEE 123-bus feeder reduced to a single-phase equivalent; "
                      "p.u. on 3 MVA (three-phase) / 4.16 kV; loads in kW and kVAr",
              "buses": bus_rows, "lines": lines}
    return feeder


def main(src, out=OUT):
    out.mkdir(parents=True, exist_ok=True)
    net, trips = sioux_falls(src)
    (out / "sf_net.tntp").write_text(net)
    (out / "sf_trips.tntp").write_text(trips)
    (out / "ieee123.json").write_text(json.dumps(ieee123(src), indent=1) + "\n")
    st = ",\n".join(f'  {{ node = {n}, base_wait = 0.05, congestion_rate = 0.002, piles = 20, bus = "{b}" }}'
                    for n, b in STATIONS.items())
    lses = "".join(
        f'\n[[market.lse]]\nname = "{name}"\ngenerators = [\n'
        + "".join(f'  {{ bus = "{b}", d = {d!r}, e = {e!r}, p_max = {pm!r} }},\n' for b, d, e, pm in gens)
        + "]\n" for name, gens in GENERATORS.items())
    (out / "params.toml").write_text(PARAMS.format(k=3, origins=ORIGINS, destinations=DESTINATIONS,
                                                   stations=st, lses=lses))
    for nm, body in SCENARIOS.items():
        (out / f"{nm}.toml").write_text(f'name = "{nm}"\n' + body)
    return out


if __name__ == "__main__":
    print(main(Path(sys.argv[1]), Path(sys.argv[2]) if len(sys.argv) > 2 else OUT))
