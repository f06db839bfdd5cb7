"""Typed data model for the road network, the distribution feeder and the
market/EV parameters, plus readers and writers for the on-disk formats.

Units are normalised when files are read: hours, km, kWh, kW and $/kWh.
Everything downstream of this module works in those units only.

File formats
------------
* Road network: standard TNTP ``_net.tntp`` and ``_trips.tntp`` files plus a
  sidecar (TOML or JSON) holding what TNTP cannot express -- charging station
  attributes, the EV share of demand, units and the analysis period.
* Feeder: a flat JSON document with ``buses[]``, ``lines[]``, ``tso_bus`` and
  bounds (see ``load_feeder``).
* Case parameters (EV + market): TOML or JSON (see ``load_params``).
* Scenario: TOML or JSON with ``load_scale``, ``outages``, ``v2g``,
  ``ev_share``.
"""

from __future__ import annotations

import io
import json
import math
import re
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

import networkx as nx

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib


class ModelError(ValueError):
    """Raised for malformed inputs; ``where`` names the offending element."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where is not None else message)


# ---------------------------------------------------------------------------
# Road network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Arc:
    tail: int
    head: int
    free_flow_time: float  # hours
    capacity: float  # vehicles per period
    distance: float  # km
    consumption_rate: float  # kWh per km
    bpr_b: float = 0.15
    bpr_power: float = 4.0

    @property
    def key(self):
        return (self.tail, self.head)

    @property
    def energy(self):
        """Energy drawn from the battery when traversing the arc (kWh)."""
        return self.consumption_rate * self.distance


@dataclass(frozen=True)
class ChargingStation:
    node: int
    base_wait: float  # hours
    congestion_rate: float  # hours per excess vehicle
    piles: float
    bus: str


@dataclass(frozen=True)
class TransportNetwork:
    nodes: tuple
    arcs: tuple
    stations: Mapping = field(default_factory=dict)  # node -> ChargingStation
    demands: Mapping = field(default_factory=dict)  # (r, s) -> (D_ev, D_fv)
    period: float = 1.0  # hours

    def __post_init__(self):
        self.validate()

    def validate(self):
        nodes = set(self.nodes)
        if len(nodes) != len(self.nodes):
            raise ModelError("duplicate node ids", "nodes")
        seen = set()
        for a in self.arcs:
            where = f"arc {a.tail}->{a.head}"
            if a.tail not in nodes or a.head not in nodes:
                raise ModelError("references an unknown node", where)
            if a.key in seen:
                raise ModelError("duplicate arc", where)
            seen.add(a.key)
            if not (a.capacity > 0 and a.distance > 0 and a.free_flow_time > 0):
                raise ModelError("capacity, distance and free-flow time must be positive", where)
            if a.consumption_rate < 0:
                raise ModelError("consumption rate must be nonnegative", where)
        for n, st in self.stations.items():
            if n not in nodes or st.node != n:
                raise ModelError("station node is not in the network", f"station {n}")
            if st.base_wait < 0 or st.congestion_rate < 0 or st.piles <= 0:
                raise ModelError("invalid station attributes", f"station {n}")
            if not isinstance(st.bus, str) or not st.bus:
                raise ModelError("station must map to one power bus", f"station {n}")
        for (r, s), (dev, dfv) in self.demands.items():
            if r not in nodes or s not in nodes:
                raise ModelError("OD endpoint not in network", f"od {r}->{s}")
            if dev < 0 or dfv < 0:
                raise ModelError("negative demand", f"od {r}->{s}")
        if not self.period > 0:
            raise ModelError("period length must be positive", "period")

    @property
    def arc_index(self):
        return {a.key: k for k, a in enumerate(self.arcs)}

    @property
    def station_nodes(self):
        return tuple(sorted(self.stations))

    def graph(self):
        """Directed networkx graph carrying the arc attributes."""
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for k, a in enumerate(self.arcs):
            g.add_edge(a.tail, a.head, index=k, time=a.free_flow_time,
                       distance=a.distance, energy=a.energy)
        return g

    def od_pairs(self, positive_only=True):
        return sorted(od for od, d in self.demands.items() if not positive_only or sum(d) > 0)


# ---------------------------------------------------------------------------
# Distribution feeder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bus:
    id: str
    q_load: float = 0.0  # kVAr
    demand_floor: float = 0.0  # kW
    q_bounds: tuple = (0.0, 0.0)  # bounds on the reactive balance, kVAr
    inverse_demand: tuple | None = None  # (a < 0, b > 0) or None

    @property
    def is_demand(self):
        return self.inverse_demand is not None


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float  # p.u.
    x: float  # p.u.
    rating: float  # kW


@dataclass(frozen=True)
class PowerFeeder:
    """Radial feeder.  Lines are stored oriented away from the TSO bus.

    After an outage scenario the feeder may be a forest; the component that
    contains the TSO bus is the only one with access to upstream imports.
    """

    buses: tuple
    lines: tuple
    tso_bus: str
    voltage_bounds: tuple = (0.95 ** 2, 1.05 ** 2)  # p.u.^2
    voltage_reference: float = 1.0  # p.u.^2 at the TSO bus and island heads
    tso_active_bounds: tuple = (0.0, math.inf)  # kW
    tso_reactive_bounds: tuple = (-math.inf, math.inf)  # kVAr
    wholesale_price: float = 0.05  # $/kWh
    base_kva: float = 1000.0
    outaged: tuple = ()  # ids of removed lines, kept for reporting
    name: str = "feeder"

    def __post_init__(self):
        self.validate()

    # -- structure --------------------------------------------------------
    def graph(self):
        g = nx.Graph()
        g.add_nodes_from(b.id for b in self.buses)
        for ln in self.lines:
            g.add_edge(ln.from_bus, ln.to_bus, id=ln.id)
        return g

    def validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate bus ids", "buses")
        if self.tso_bus not in ids:
            raise ModelError("TSO bus missing from bus list", f"bus {self.tso_bus}")
        idset = set(ids)
        seen = set()
        for ln in self.lines:
            where = f"line {ln.id}"
            if ln.from_bus not in idset or ln.to_bus not in idset:
                raise ModelError("references an unknown bus", where)
            if ln.from_bus == ln.to_bus:
                raise ModelError("self loop", where)
            pair = frozenset((ln.from_bus, ln.to_bus))
            if pair in seen:
                raise ModelError("duplicate line; radiality violated", where)
            seen.add(pair)
            if not ln.rating > 0:
                raise ModelError("rating must be positive", where)
        lines_ids = [ln.id for ln in self.lines]
        if len(set(lines_ids)) != len(lines_ids):
            raise ModelError("duplicate line ids", "lines")
        g = self.graph()
        comps = list(nx.connected_components(g))
        if len(self.lines) != len(self.buses) - len(comps):
            cycle = nx.find_cycle(g)
            raise ModelError(f"cycle detected through {cycle[0][0]}-{cycle[0][1]}; radiality violated",
                             "lines")
        if not self.outaged and len(comps) > 1:
            stray = sorted(next(c for c in comps if self.tso_bus not in c))[0]
            raise ModelError("disconnected from the TSO bus", f"bus {stray}")
        lo, hi = self.voltage_bounds
        if not 0 <= lo < hi:
            raise ModelError("voltage bounds must satisfy 0 <= lo < hi", "voltage_bounds")
        if not lo <= self.voltage_reference <= hi:
            raise ModelError("reference voltage outside the voltage bounds", "voltage_reference")
        if self.tso_active_bounds[0] > self.tso_active_bounds[1]:
            raise ModelError("unordered TSO active bounds", "tso_active_bounds")
        if self.tso_reactive_bounds[0] > self.tso_reactive_bounds[1]:
            raise ModelError("unordered TSO reactive bounds", "tso_reactive_bounds")
        if not self.base_kva > 0:
            raise ModelError("base power must be positive", "base_kva")
        for b in self.buses:
            where = f"bus {b.id}"
            if b.q_bounds[0] > b.q_bounds[1]:
                raise ModelError("unordered reactive bounds", where)
            if b.inverse_demand is not None:
                a, bb = b.inverse_demand
                if not (a < 0 and bb > 0):
                    raise ModelError("inverse demand needs a < 0 and b > 0", where)
                if b.id == self.tso_bus:
                    raise ModelError("the TSO bus cannot host household demand", where)
            elif b.demand_floor > 0:
                raise ModelError("demand floor on a bus without inverse demand", where)
            if b.demand_floor < 0:
                raise ModelError("negative demand floor", where)
        # orientation: every line must point away from its island head
        for comp in comps:
            head = self._head_of(comp)
            order = nx.bfs_tree(g.subgraph(comp), head)
            for ln in self.lines:
                if ln.from_bus in comp and not order.has_edge(ln.from_bus, ln.to_bus):
                    raise ModelError("line is not oriented away from the root", f"line {ln.id}")

    def _head_of(self, comp):
        if self.tso_bus in comp:
            return self.tso_bus
        to_buses = {ln.to_bus for ln in self.lines}
        heads = [b for b in comp if b not in to_buses]
        return sorted(heads)[0]

    @property
    def bus_map(self):
        return {b.id: b for b in self.buses}

    @property
    def bus_ids(self):
        return tuple(b.id for b in self.buses)

    @property
    def non_root_buses(self):
        return tuple(b.id for b in self.buses if b.id != self.tso_bus)

    def islands(self):
        """Connected components as (head bus, sorted bus ids); TSO component first."""
        g = self.graph()
        comps = [set(c) for c in nx.connected_components(g)]
        out = [(self._head_of(c), tuple(sorted(c))) for c in comps]
        out.sort(key=lambda hc: (self.tso_bus not in hc[1], hc[0]))
        return out

    def tso_component(self):
        return set(self.islands()[0][1])


def orient_lines(buses, lines, root):
    """Return ``lines`` re-oriented so that every line points away from ``root``.

    A component without the root keeps its head when the given orientation
    already has exactly one bus without an incoming line (so a saved island
    reloads unchanged); otherwise its lowest-id bus becomes the head.
    """
    g = nx.Graph()
    g.add_nodes_from(b.id for b in buses)
    for ln in lines:
        g.add_edge(ln.from_bus, ln.to_bus)
    to_buses = {ln.to_bus for ln in lines}
    parent = {}
    for comp in nx.connected_components(g):
        if root in comp:
            head = root
        else:
            heads = sorted(b for b in comp if b not in to_buses)
            head = heads[0] if len(heads) == 1 else sorted(comp)[0]
        for u, v in nx.bfs_edges(g.subgraph(comp), head):
            parent[v] = u
    out = []
    for ln in lines:
        if parent.get(ln.to_bus) == ln.from_bus:
            out.append(ln)
        else:
            out.append(replace(ln, from_bus=ln.to_bus, to_bus=ln.from_bus))
    return tuple(out)


# ---------------------------------------------------------------------------
# EV, market and scenario parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvParams:
    battery_capacity: float = 24.0  # B_max, kWh
    post_discharge_level: float = 8.0  # B_min, kWh
    range_anxiety: float = 0.2  # R_anx
    time_value_ev: float = 20.0  # $/h
    time_value_fv: float = 20.0  # $/h
    degradation_cost: float = 0.03  # $/kWh
    pile_power: float = 50.0  # kW

    def __post_init__(self):
        if not 0 < self.reserve_floor < self.post_discharge_level < self.battery_capacity:
            raise ModelError("need 0 < R_anx*B_max < B_min < B_max", "ev")
        for name in ("time_value_ev", "time_value_fv", "degradation_cost"):
            if getattr(self, name) < 0:
                raise ModelError("must be nonnegative", f"ev.{name}")
        if not self.pile_power > 0:
            raise ModelError("must be positive", "ev.pile_power")

    @property
    def reserve_floor(self):
        """E_min = R_anx * B_max (kWh)."""
        return self.range_anxiety * self.battery_capacity


@dataclass(frozen=True)
class StationMarket:
    fee_charge: float = 0.0  # gamma+, $/kWh
    fee_discharge: float = 0.0  # gamma-, $/kWh
    net_bounds: tuple = (-math.inf, math.inf)  # bounds on p+ - p-, kW


@dataclass(frozen=True)
class Generator:
    bus: str
    d: float  # $/kWh^2
    e: float  # $/kWh
    p_min: float = 0.0
    p_max: float = math.inf


@dataclass(frozen=True)
class Lse:
    name: str
    generators: tuple


@dataclass(frozen=True)
class MarketParams:
    lses: tuple
    stations: Mapping = field(default_factory=dict)  # node -> StationMarket
    shedding_penalty: float = 2.0  # rho, $/kWh

    def __post_init__(self):
        names = [f.name for f in self.lses]
        if len(set(names)) != len(names) or not names:
            raise ModelError("LSE names must be unique and nonempty", "market.lses")
        for f in self.lses:
            if not f.generators:
                raise ModelError("every LSE needs at least one generator", f"lse {f.name}")
            buses = [g.bus for g in f.generators]
            if len(set(buses)) != len(buses):
                raise ModelError("one generator per bus and LSE", f"lse {f.name}")
            for g in f.generators:
                if not (g.d > 0 and g.e > 0):
                    raise ModelError("cost coefficients must be positive", f"lse {f.name} bus {g.bus}")
                if g.p_min > g.p_max:
                    raise ModelError("unordered generation bounds", f"lse {f.name} bus {g.bus}")
        for n, st in self.stations.items():
            if st.net_bounds[0] > st.net_bounds[1]:
                raise ModelError("unordered net exchange bounds", f"station {n}")
        if self.shedding_penalty < 0:
            raise ModelError("must be nonnegative", "market.shedding_penalty")

    def station(self, node):
        return self.stations.get(node, StationMarket())

    def check_against(self, feeder, transport):
        """Cross-model checks that need both networks."""
        buses = feeder.bus_map
        for f in self.lses:
            for g in f.generators:
                if g.bus not in buses:
                    raise ModelError("generator on an unknown bus", f"lse {f.name} bus {g.bus}")
                if g.bus == feeder.tso_bus:
                    raise ModelError("generators cannot sit on the TSO bus", f"lse {f.name}")
        for n, st in transport.stations.items():
            if st.bus not in buses:
                raise ModelError("station mapped to an unknown bus", f"station {n}")
            if st.bus == feeder.tso_bus:
                raise ModelError("station mapped to the TSO bus", f"station {n}")
        b_max = max((b.inverse_demand[1] for b in feeder.buses if b.is_demand), default=0.0)
        if not self.shedding_penalty > b_max:
            raise ModelError("shedding penalty must exceed every retail intercept b_i",
                             "market.shedding_penalty")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "base"
    load_scale: float = 1.0
    outages: tuple = ()  # ((i, j), ...) bus pairs
    v2g: bool = True
    ev_share: float | None = None

    def __post_init__(self):
        if not self.load_scale > 0:
            raise ModelError("load_scale must be positive", "scenario")
        if self.ev_share is not None and not 0 <= self.ev_share <= 1:
            raise ModelError("ev_share must lie in [0, 1]", "scenario")


# ---------------------------------------------------------------------------
# Reading helpers
# ---------------------------------------------------------------------------

def _text(src):
    """Accept a path, bytes, text or a (binary/text) stream and return text."""
    if isinstance(src, (str, Path)) and not (isinstance(src, str) and "\n" in src):
        return Path(src).read_text()
    if isinstance(src, bytes):
        return src.decode()
    if isinstance(src, str):
        return src
    data = src.read()
    return data.decode() if isinstance(data, bytes) else data


def _load_mapping(src):
    """Parse TOML or JSON into a dict (a dict is returned unchanged)."""
    if isinstance(src, Mapping):
        return dict(src)
    text = _text(src)
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    return tomllib.loads(text)


def _num(x):
    """JSON has no infinity literal; accept None/"inf"/"-inf" strings."""
    if x is None:
        return math.inf
    if isinstance(x, str):
        return float(x)
    return float(x)


def _bounds(pair, default=(-math.inf, math.inf)):
    if pair is None:
        return default
    lo, hi = pair
    lo = -math.inf if lo is None else _num(lo)
    hi = math.inf if hi is None else _num(hi)
    return (lo, hi)


def _jsonable(x):
    if isinstance(x, float) and math.isinf(x):
        return None
    return x


# ---------------------------------------------------------------------------
# TNTP
# ---------------------------------------------------------------------------

_META = re.compile(r"^\s*<([^>]+)>\s*(.*)$")
_TIME_UNITS = {"h": 1.0, "hour": 1.0, "hours": 1.0, "min": 1 / 60, "minutes": 1 / 60}
_LENGTH_UNITS = {"km": 1.0, "mi": 1.609344, "miles": 1.609344, "m": 1e-3}


def _read_metadata(lines, fname):
    meta = {}
    body_start = None
    for k, raw in enumerate(lines):
        s = raw.strip()
        if not s:
            continue
        m = _META.match(s)
        if not m:
            raise ModelError("malformed metadata header", f"{fname} line {k + 1}")
        key = m.group(1).strip().upper()
        if key == "END OF METADATA":
            body_start = k + 1
            break
        meta[key] = m.group(2).strip()
    if body_start is None:
        raise ModelError("missing <END OF METADATA>", fname)
    return meta, body_start


def _meta_int(meta, key, fname):
    try:
        return int(float(meta[key]))
    except KeyError:
        raise ModelError(f"missing <{key}>", fname) from None
    except ValueError:
        raise ModelError(f"non-numeric <{key}>", fname) from None


@dataclass(frozen=True)
class TransportSidecar:
    """Road-network data that TNTP does not carry."""

    stations: tuple = ()  # ChargingStation entries
    ev_share: float = 0.5
    ev_share_by_od: Mapping = field(default_factory=dict)
    consumption_rate: float = 0.2  # kWh/km applied to every arc
    time_unit: str = "h"
    length_unit: str = "km"
    period: float = 1.0
    demand_scale: float = 1.0
    od_filter: tuple | None = None  # (origins, destinations) to keep

    @classmethod
    def from_mapping(cls, data):
        data = dict(data or {})
        stations = tuple(
            ChargingStation(node=int(s["node"]), base_wait=float(s["base_wait"]),
                            congestion_rate=float(s["congestion_rate"]),
                            piles=float(s["piles"]), bus=str(s["bus"]))
            for s in data.get("stations", ()))
        by_od = {}
        for item in data.get("ev_share_by_od", ()):
            by_od[(int(item[0]), int(item[1]))] = float(item[2])
        od_filter = None
        if "origins" in data or "destinations" in data:
            od_filter = (tuple(int(x) for x in data.get("origins", ())),
                         tuple(int(x) for x in data.get("destinations", ())))
        return cls(stations=stations, ev_share=float(data.get("ev_share", 0.5)),
                   ev_share_by_od=by_od,
                   consumption_rate=float(data.get("consumption_rate", 0.2)),
                   time_unit=str(data.get("time_unit", "h")),
                   length_unit=str(data.get("length_unit", "km")),
                   period=float(data.get("period", 1.0)),
                   demand_scale=float(data.get("demand_scale", 1.0)),
                   od_filter=od_filter)


def load_sidecar(src):
    return TransportSidecar.from_mapping(_load_mapping(src))


def load_transport_tntp(net_file, trips_file, sidecar=None):
    """Parse TNTP network and trip tables into a validated TransportNetwork.

    ``sidecar`` is a TransportSidecar, a mapping or a TOML/JSON source.
    """
    if sidecar is None:
        sidecar = TransportSidecar()
    elif not isinstance(sidecar, TransportSidecar):
        sidecar = load_sidecar(sidecar)
    try:
        t_scale = _TIME_UNITS[sidecar.time_unit]
        d_scale = _LENGTH_UNITS[sidecar.length_unit]
    except KeyError as exc:
        raise ModelError(f"unknown unit {exc.args[0]!r}", "sidecar") from None

    lines = _text(net_file).splitlines()
    meta, start = _read_metadata(lines, "net")
    n_nodes = _meta_int(meta, "NUMBER OF NODES", "net")
    n_links = _meta_int(meta, "NUMBER OF LINKS", "net")
    arcs = []
    for k in range(start, len(lines)):
        s = lines[k].split("~", 1)[0].strip()
        if not s:
            continue
        s = s.rstrip(";").strip()
        cols = s.split()
        where = f"net line {k + 1}"
        if len(cols) < 5:
            raise ModelError("link row needs at least init, term, capacity, length, time", where)
        try:
            tail, head = int(cols[0]), int(cols[1])
            cap, length, fft = float(cols[2]), float(cols[3]), float(cols[4])
            b = float(cols[5]) if len(cols) > 5 else 0.15
            power = float(cols[6]) if len(cols) > 6 else 4.0
        except ValueError:
            raise ModelError("non-numeric link field", where) from None
        if cap <= 0:
            raise ModelError("nonpositive capacity", where)
        if length <= 0 or fft <= 0:
            raise ModelError("nonpositive length or free-flow time", where)
        if not (1 <= tail <= n_nodes and 1 <= head <= n_nodes):
            raise ModelError(f"dangling node reference {tail}->{head}", where)
        arcs.append(Arc(tail, head, fft * t_scale, cap, length * d_scale,
                        sidecar.consumption_rate, b, power))
    if len(arcs) != n_links:
        raise ModelError(f"found {len(arcs)} links, header says {n_links}", "net")
    nodes = tuple(range(1, n_nodes + 1))

    totals = _parse_trips(_text(trips_file), n_nodes)
    demands = {}
    for (r, s), total in sorted(totals.items()):
        if r == s or total <= 0:
            continue
        if sidecar.od_filter is not None:
            origins, dests = sidecar.od_filter
            if r not in origins or s not in dests:
                continue
        total *= sidecar.demand_scale
        share = sidecar.ev_share_by_od.get((r, s), sidecar.ev_share)
        demands[(r, s)] = (total * share, total * (1 - share))
    stations = {st.node: st for st in sidecar.stations}
    return TransportNetwork(nodes=nodes, arcs=tuple(arcs), stations=stations,
                            demands=demands, period=sidecar.period)


def _parse_trips(text, n_nodes):
    lines = text.splitlines()
    if not any(s.strip() for s in lines):
        return {}
    meta, start = _read_metadata(lines, "trips")
    totals = {}
    origin = None
    for k in range(start, len(lines)):
        s = lines[k].split("~", 1)[0].strip()
        if not s:
            continue
        where = f"trips line {k + 1}"
        if s.lower().startswith("origin"):
            try:
                origin = int(s.split()[1])
            except (IndexError, ValueError):
                raise ModelError("malformed Origin line", where) from None
            if not 1 <= origin <= n_nodes:
                raise ModelError(f"dangling node reference {origin}", where)
            continue
        if origin is None:
            raise ModelError("demand entry before any Origin line", where)
        for entry in s.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            try:
                dest, value = entry.split(":")
                dest, value = int(dest), float(value)
            except ValueError:
                raise ModelError(f"malformed demand entry {entry!r}", where) from None
            if not 1 <= dest <= n_nodes:
                raise ModelError(f"dangling node reference {dest}", where)
            if value < 0:
                raise ModelError("negative demand", where)
            totals[(origin, dest)] = totals.get((origin, dest), 0.0) + value
    return totals


def dump_transport_tntp(net):
    """Write ``net`` as (net text, trips text, sidecar mapping).

    Times are written in hours and lengths in km, so loading the three
    outputs back yields an equal model.
    """
    idx = {n: k + 1 for k, n in enumerate(net.nodes)}
    if any(idx[n] != n for n in net.nodes):
        raise ModelError("TNTP needs nodes numbered 1..N", "nodes")
    rates = {a.consumption_rate for a in net.arcs}
    if len(rates) > 1:
        raise ModelError("TNTP sidecar carries one consumption rate", "arcs")
    out = io.StringIO()
    out.write(f"<NUMBER OF ZONES> {len(net.nodes)}\n<NUMBER OF NODES> {len(net.nodes)}\n")
    out.write(f"<FIRST THRU NODE> 1\n<NUMBER OF LINKS> {len(net.arcs)}\n<END OF METADATA>\n\n")
    out.write("~\tinit\tterm\tcapacity\tlength\tfree_flow_time\tb\tpower\t;\n")
    for a in net.arcs:
        out.write(f"\t{a.tail}\t{a.head}\t{a.capacity!r}\t{a.distance!r}\t{a.free_flow_time!r}"
                  f"\t{a.bpr_b!r}\t{a.bpr_power!r}\t;\n")
    trips = io.StringIO()
    total = sum(sum(d) for d in net.demands.values())
    trips.write(f"<NUMBER OF ZONES> {len(net.nodes)}\n<TOTAL OD FLOW> {total!r}\n"
                "<END OF METADATA>\n\n")
    shares = []
    by_origin = {}
    for (r, s), (dev, dfv) in sorted(net.demands.items()):
        by_origin.setdefault(r, []).append((s, dev + dfv))
        shares.append([r, s, dev / (dev + dfv) if dev + dfv > 0 else 0.5])
    for r in sorted(by_origin):
        trips.write(f"Origin {r}\n")
        trips.write("".join(f"\t{s} : {v!r};" for s, v in by_origin[r]) + "\n")
    sidecar = {
        "time_unit": "h", "length_unit": "km", "period": net.period,
        "consumption_rate": rates.pop() if rates else 0.0,
        "stations": [{"node": st.node, "base_wait": st.base_wait,
                      "congestion_rate": st.congestion_rate, "piles": st.piles, "bus": st.bus}
                     for _, st in sorted(net.stations.items())],
        "ev_share_by_od": shares,
    }
    return out.getvalue(), trips.getvalue(), sidecar


def transport_to_dict(net):
    return {
        "nodes": list(net.nodes),
        "period": net.period,
        "arcs": [[a.tail, a.head, a.free_flow_time, a.capacity, a.distance, a.consumption_rate,
                  a.bpr_b, a.bpr_power] for a in net.arcs],
        "stations": [[st.node, st.base_wait, st.congestion_rate, st.piles, st.bus]
                     for _, st in sorted(net.stations.items())],
        "demands": [[r, s, dev, dfv] for (r, s), (dev, dfv) in sorted(net.demands.items())],
    }


def transport_from_dict(data):
    return TransportNetwork(
        nodes=tuple(data["nodes"]),
        arcs=tuple(Arc(int(t), int(h), *map(float, rest)) for t, h, *rest in data["arcs"]),
        stations={int(n): ChargingStation(int(n), float(w), float(c), float(p), str(b))
                  for n, w, c, p, b in data["stations"]},
        demands={(int(r), int(s)): (float(e), float(f)) for r, s, e, f in data["demands"]},
        period=float(data["period"]))


# ---------------------------------------------------------------------------
# Feeder JSON
# ---------------------------------------------------------------------------

def feeder_from_dict(data):
    try:
        buses = []
        for b in data["buses"]:
            inv = b.get("inverse_demand")
            buses.append(Bus(id=str(b["id"]), q_load=float(b.get("q_load", 0.0)),
                             demand_floor=float(b.get("demand_floor", 0.0)),
                             q_bounds=_bounds(b.get("q_bounds"), (0.0, 0.0)),
                             inverse_demand=None if inv is None else (float(inv[0]), float(inv[1]))))
        root = str(data["tso_bus"])
    except KeyError as exc:
        raise ModelError(f"missing field {exc.args[0]!r}", "feeder") from None
    lines = []
    for k, ln in enumerate(data.get("lines", ())):
        try:
            lines.append(Line(id=str(ln.get("id", f"L{k}")), from_bus=str(ln["from"]),
                              to_bus=str(ln["to"]), r=float(ln["r"]), x=float(ln["x"]),
                              rating=_num(ln["rating"])))
        except KeyError as exc:
            raise ModelError(f"missing field {exc.args[0]!r}", f"line {k}") from None
    ids = {b.id for b in buses}
    for ln in lines:
        if ln.from_bus not in ids or ln.to_bus not in ids:
            raise ModelError("references an unknown bus", f"line {ln.id}")
    if root not in ids:
        raise ModelError("TSO bus missing from bus list", f"bus {root}")
    # a duplicate or cyclic line set cannot be oriented; validate() reports it
    g = nx.Graph()
    g.add_nodes_from(ids)
    g.add_edges_from((ln.from_bus, ln.to_bus) for ln in lines)
    if nx.is_forest(g) and len(lines) == g.number_of_edges():
        lines = orient_lines(buses, lines, root)
    return PowerFeeder(
        buses=tuple(buses), lines=tuple(lines), tso_bus=root,
        voltage_bounds=_bounds(data.get("voltage_bounds"), (0.95 ** 2, 1.05 ** 2)),
        voltage_reference=float(data.get("voltage_reference", 1.0)),
        tso_active_bounds=_bounds(data.get("tso_active_bounds"), (0.0, math.inf)),
        tso_reactive_bounds=_bounds(data.get("tso_reactive_bounds")),
        wholesale_price=float(data.get("wholesale_price", 0.05)),
        base_kva=float(data.get("base_kva", 1000.0)),
        outaged=tuple(data.get("outaged", ())),
        name=str(data.get("name", "feeder")))


def load_feeder(src):
    """Read the feeder JSON schema and validate radiality."""
    text = _text(src)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}", "feeder") from None
    return feeder_from_dict(data)


def feeder_to_dict(feeder):
    return {
        "name": feeder.name,
        "tso_bus": feeder.tso_bus,
        "base_kva": feeder.base_kva,
        "voltage_bounds": list(feeder.voltage_bounds),
        "voltage_reference": feeder.voltage_reference,
        "tso_active_bounds": [_jsonable(v) for v in feeder.tso_active_bounds],
        "tso_reactive_bounds": [_jsonable(v) for v in feeder.tso_reactive_bounds],
        "wholesale_price": feeder.wholesale_price,
        "outaged": list(feeder.outaged),
        "buses": [{"id": b.id, "q_load": b.q_load, "demand_floor": b.demand_floor,
                   "q_bounds": [_jsonable(v) for v in b.q_bounds],
                   "inverse_demand": None if b.inverse_demand is None else list(b.inverse_demand)}
                  for b in feeder.buses],
        "lines": [{"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
                   "rating": _jsonable(ln.rating)} for ln in feeder.lines],
    }


def dump_feeder(feeder):
    return json.dumps(feeder_to_dict(feeder), indent=1)


# ---------------------------------------------------------------------------
# Case parameters and scenarios
# ---------------------------------------------------------------------------

def params_from_mapping(data):
    """Build (EvParams, MarketParams) from the ``[ev]`` / ``[market]`` tables."""
    ev = EvParams(**{k: float(v) for k, v in dict(data.get("ev", {})).items()})
    m = dict(data.get("market", {}))
    lses = []
    for f in m.get("lse", ()):
        gens = tuple(Generator(bus=str(g["bus"]), d=float(g["d"]), e=float(g["e"]),
                               p_min=float(g.get("p_min", 0.0)),
                               p_max=_num(g.get("p_max")))
                     for g in f.get("generators", ()))
        lses.append(Lse(name=str(f["name"]), generators=gens))
    stations = {}
    for s in m.get("station", ()):
        stations[int(s["node"])] = StationMarket(
            fee_charge=float(s.get("fee_charge", 0.0)),
            fee_discharge=float(s.get("fee_discharge", 0.0)),
            net_bounds=_bounds(s.get("net_bounds")))
    market = MarketParams(lses=tuple(lses), stations=stations,
                          shedding_penalty=float(m.get("shedding_penalty", 2.0)))
    return ev, market


def params_to_mapping(ev, market):
    return {
        "ev": {k: getattr(ev, k) for k in EvParams.__dataclass_fields__},
        "market": {
            "shedding_penalty": market.shedding_penalty,
            "lse": [{"name": f.name, "generators": [
                {"bus": g.bus, "d": g.d, "e": g.e, "p_min": g.p_min, "p_max": _jsonable(g.p_max)}
                for g in f.generators]} for f in market.lses],
            "station": [{"node": n, "fee_charge": s.fee_charge, "fee_discharge": s.fee_discharge,
                         "net_bounds": [_jsonable(v) for v in s.net_bounds]}
                        for n, s in sorted(market.stations.items())],
        },
    }


def load_params(src):
    return params_from_mapping(_load_mapping(src))


def load_scenario(src, name=None):
    data = _load_mapping(src)
    if name is None:
        name = Path(src).stem if isinstance(src, (str, Path)) and "\n" not in str(src) else "scenario"
    outages = tuple((str(i), str(j)) for i, j in data.get("outages", ()))
    share = data.get("ev_share")
    return ScenarioSpec(name=str(data.get("name", name)),
                        load_scale=float(data.get("load_scale", 1.0)), outages=outages,
                        v2g=bool(data.get("v2g", True)),
                        ev_share=None if share is None else float(share))


def apply_scenario(feeder, scenario):
    """Scale household load and remove outaged lines, returning a new feeder.

    Scaling by k stretches each bus's demand horizontally: the floor and the
    reactive load are multiplied by k and the inverse-demand slope divided by
    k, so k times as much is bought at any given price.  Components cut off
    from the TSO bus become islands without import access.
    """
    if scenario.load_scale == 1.0 and not scenario.outages:
        return feeder
    by_pair = {frozenset((ln.from_bus, ln.to_bus)): ln for ln in feeder.lines}
    drop = set()
    for i, j in scenario.outages:
        ln = by_pair.get(frozenset((str(i), str(j))))
        if ln is None:
            raise ModelError("outage names a nonexistent line", f"line {i}-{j}")
        drop.add(ln.id)
    k = scenario.load_scale
    buses = tuple(replace(b, demand_floor=b.demand_floor * k, q_load=b.q_load * k,
                          q_bounds=tuple(v * k for v in b.q_bounds),
                          inverse_demand=None if b.inverse_demand is None
                          else (b.inverse_demand[0] / k, b.inverse_demand[1]))
                  for b in feeder.buses)
    lines = tuple(ln for ln in feeder.lines if ln.id not in drop)
    outaged = tuple(feeder.outaged) + tuple(sorted(drop))
    return replace(feeder, buses=buses, lines=lines, outaged=outaged)


def apply_transport_scenario(net, scenario):
    """Re-split OD demand when the scenario overrides the EV share."""
    if scenario.ev_share is None:
        return net
    share = scenario.ev_share
    demands = {od: ((dev + dfv) * share, (dev + dfv) * (1 - share))
               for od, (dev, dfv) in net.demands.items()}
    return replace(net, demands=demands)


def scenario_to_mapping(scenario):
    out = {"name": scenario.name, "load_scale": scenario.load_scale,
           "outages": [list(p) for p in scenario.outages], "v2g": scenario.v2g}
    if scenario.ev_share is not None:
        out["ev_share"] = scenario.ev_share
    return out
