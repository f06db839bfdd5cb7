"""Static SVG figures for a set of runs.

Figures: supply mix, station net load, load shedding, maximum DLMP and the
social-cost stack.  Output is deterministic (fixed SVG id salt, no date).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "v2geq", "svg.fonttype": "none", "font.size": 9}
_META = {"Date": None, "Creator": "v2geq"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def _labels(reports):
    return [r.run_id for r in reports]


def _stacked(ax, labels, series):
    bottom = np.zeros(len(labels))
    for name, vals in series:
        vals = np.asarray(vals, dtype=float)
        ax.bar(labels, vals, bottom=bottom, label=name)
        bottom += vals
    ax.legend(fontsize=7)
    ax.tick_params(axis="x", rotation=30)


def write_plots(reports, out_dir):
    """Write the five figures into ``out_dir``; returns the file paths."""
    labels = _labels(reports)
    paths = []
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        _stacked(ax, labels, [("generation", [r.supply["generation_kw"] for r in reports]),
                              ("import", [r.supply["import_kw"] for r in reports]),
                              ("V2G", [r.supply["v2g_kw"] for r in reports])])
        ax.set_ylabel("kW")
        ax.set_title("Supply mix")
        paths.append(out_dir / "supply_mix.svg")
        _save(fig, paths[-1])

        stations = sorted({n for r in reports for n in r.station_net_load})
        fig, ax = plt.subplots(figsize=(6, 3.5))
        width = 0.8 / max(len(reports), 1)
        x = np.arange(len(stations))
        for k, r in enumerate(reports):
            ax.bar(x + k * width, [r.station_net_load.get(n, 0.0) for n in stations], width,
                   label=r.run_id)
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.set_xticks(x + 0.4 - width / 2, [str(n) for n in stations])
        ax.set_xlabel("station node")
        ax.set_ylabel("net load (kW)")
        ax.set_title("Station net load")
        ax.legend(fontsize=7)
        paths.append(out_dir / "station_net_load.svg")
        _save(fig, paths[-1])

        for name, key, unit in (("load_shedding", "total_ls", "kW"), ("max_dlmp", "max_dlmp", "$/kWh")):
            fig, ax = plt.subplots(figsize=(6, 3.5))
            ax.bar(labels, [getattr(r, key) for r in reports])
            ax.set_ylabel(unit)
            ax.set_title(name.replace("_", " ").capitalize())
            ax.tick_params(axis="x", rotation=30)
            paths.append(out_dir / f"{name}.svg")
            _save(fig, paths[-1])

        fig, ax = plt.subplots(figsize=(6, 3.5))
        parts = [k for k in reports[0].social_cost if k != "total"]
        _stacked(ax, labels, [(k, [r.social_cost[k] for r in reports]) for k in parts])
        ax.set_ylabel("$ per period")
        ax.set_title("Social cost")
        paths.append(out_dir / "social_cost.svg")
        _save(fig, paths[-1])
    return paths
