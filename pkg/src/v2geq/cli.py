"""Command-line interface: ``v2geq solve | gen-paths | dump-mcp | verify | sweep``.

Exit codes: 0 success, 1 solver failure or failed verification, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .assembly import assemble_mcp, dump_mcp
from .network import ModelError, ScenarioSpec, load_scenario
from .paths import PathError
from .scenario import (SCENARIO_ORDER, SolverFailure, VerificationError, bundled_case,
                       build_problem, emit_outputs, load_case, run_scenario, run_sweep,
                       solution_from_dict)
from .solver import SolverConfig

log = logging.getLogger("v2geq")

EXIT_FAILURE = 1
EXIT_INPUT = 2
DEFAULT_CASE = "sioux_falls"


def _on_off(text):
    t = text.lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _add_case_args(p, feeder=True):
    p.add_argument("--net", required=True, type=Path, help="TNTP network file")
    p.add_argument("--trips", required=True, type=Path, help="TNTP trip table")
    if feeder:
        p.add_argument("--feeder", required=True, type=Path, help="feeder JSON")
    p.add_argument("--params", type=Path,
                   help="parameters TOML/JSON (default: params.toml next to --net)")
    p.add_argument("--k", type=int, help="base paths per OD (default: from params, else 10)")


def _add_solver_args(p):
    p.add_argument("--tol", type=float, default=SolverConfig.tolerance, help="FB residual tolerance")
    p.add_argument("--seed", type=int, default=0, help="seed for random restarts")
    p.add_argument("--trace", type=Path, help="write the Newton iterate trace to this CSV")


def _solver_config(args):
    return SolverConfig(tolerance=args.tol, seed=args.seed,
                        trace_path=str(args.trace) if args.trace else None)


def _case_from_args(args, with_feeder=True):
    params = args.params or args.net.parent / "params.toml"
    if not params.exists():
        raise ModelError("parameter file not found (pass --params)", str(params))
    if with_feeder:
        case = load_case(args.net, args.trips, args.feeder, params)
    else:
        from .network import _load_mapping, load_transport_tntp, params_from_mapping

        data = _load_mapping(params)
        transport = load_transport_tntp(args.net, args.trips, data.get("transport", {}))
        ev, _ = params_from_mapping(data)
        return transport, ev, int(args.k or data.get("k", 10))
    if args.k:
        case = replace(case, k=args.k)
    return case


def _scenario_from_args(args):
    sc = load_scenario(args.scenario) if args.scenario else ScenarioSpec(name="base")
    if args.v2g is not None:
        sc = replace(sc, v2g=args.v2g)
    return sc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_solve(args):
    case = _case_from_args(args)
    sc = _scenario_from_args(args)
    t0 = time.perf_counter()
    sol, metrics = run_scenario(case.transport, case.feeder, sc, case.ev, case.market,
                                _solver_config(args), case.k)
    out = emit_outputs([(sol, metrics)], args.out, plots=not args.no_plots)
    print(f"{metrics.run_id}: {sol.report.status} in {time.perf_counter() - t0:.2f}s, "
          f"max DLMP {metrics.max_dlmp:.4f} $/kWh, LS {metrics.total_ls:.2f} kW, "
          f"social cost {metrics.social_cost['total']:.2f} $ -> {out}")
    return 0


def cmd_gen_paths(args):
    transport, ev, k = _case_from_args(args, with_feeder=False)
    from .paths import generate_catalog

    catalog = generate_catalog(transport, ev, k=args.k or k, v2g=args.v2g)
    data = catalog.to_dict()
    if args.od:
        keep = {tuple(od) for od in args.od}
        data["ev"] = [p for p in data["ev"] if tuple(p["od"]) in keep]
        data["fv"] = [p for p in data["fv"] if tuple(p["od"]) in keep]
    text = json.dumps(data, indent=1) + "\n"
    if args.out:
        args.out.write_text(text)
        print(f"{len(data['ev'])} EV and {len(data['fv'])} FV paths -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_dump_mcp(args):
    case = _case_from_args(args)
    sc = _scenario_from_args(args)
    problem = build_problem(case.transport, case.feeder, sc, case.ev, case.market, case.k)
    text = dump_mcp(assemble_mcp(problem)) + "\n"
    if args.out:
        args.out.write_text(text)
        print(f"MCP pattern -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_verify(args):
    data = json.loads(args.solution.read_text())
    try:
        sol = solution_from_dict(data)
    except VerificationError as exc:
        print(f"FAIL {args.solution}: {exc}")
        return EXIT_FAILURE
    for k, v in sol.checks.items():
        if k != "ok":
            print(f"  {k:16s} {v:.3e}")
    print(f"OK {args.solution}")
    return 0


def cmd_sweep(args):
    if args.net:
        scen = [Path(s) for s in args.scenarios] if args.scenarios else \
            [args.net.parent / f"{n}.toml" for n in SCENARIO_ORDER
             if (args.net.parent / f"{n}.toml").exists()]
        case = load_case(args.net, args.trips, args.feeder,
                         args.params or args.net.parent / "params.toml", scen)
        if args.k:
            case = replace(case, k=args.k)
    else:
        case = bundled_case(args.case)
    names = list(case.scenarios) if args.all or not args.only else args.only
    missing = [n for n in names if n not in case.scenarios]
    if missing:
        raise ModelError(f"unknown scenario(s): {', '.join(missing)}", "sweep")
    t0 = time.perf_counter()
    results = run_sweep(case.transport, case.feeder, [case.scenarios[n] for n in names],
                        case.ev, case.market, _solver_config(args), case.k, threads=args.threads)
    out = emit_outputs(results, args.out, plots=not args.no_plots)
    for sol, m in results:
        print(f"{m.run_id:20s} {sol.report.status:18s} {sol.report.wall_time:7.2f}s "
              f"LS {m.total_ls:9.2f} kW  max DLMP {m.max_dlmp:7.4f}  cost {m.social_cost['total']:10.2f}")
    print(f"{len(results)} runs in {time.perf_counter() - t0:.1f}s -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="v2geq", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one scenario and write reports")
    _add_case_args(p)
    p.add_argument("--scenario", type=Path, help="scenario TOML/JSON (default: base, no outages)")
    p.add_argument("--v2g", type=_on_off, help="on/off (overrides the scenario file)")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--no-plots", action="store_true")
    _add_solver_args(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gen-paths", help="write the expanded path catalog as JSON")
    _add_case_args(p, feeder=False)
    p.add_argument("--v2g", type=_on_off, default=True)
    p.add_argument("--od", type=int, nargs=2, action="append", metavar=("R", "S"),
                   help="restrict the output to this OD (repeatable)")
    p.add_argument("--out", type=Path, help="output file (default: stdout)")
    p.set_defaults(func=cmd_gen_paths)

    p = sub.add_parser("dump-mcp", help="write the variable catalog and Jacobian pattern")
    _add_case_args(p)
    p.add_argument("--scenario", type=Path)
    p.add_argument("--v2g", type=_on_off)
    p.add_argument("--out", type=Path, help="output file (default: stdout)")
    p.set_defaults(func=cmd_dump_mcp)

    p = sub.add_parser("verify", help="independently re-check a solution.json")
    p.add_argument("solution", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run every scenario with V2G off and on")
    p.add_argument("--all", action="store_true", help="all scenarios of the case (default)")
    p.add_argument("--only", nargs="+", metavar="NAME", help="subset of scenario names")
    p.add_argument("--case", default=DEFAULT_CASE, help="shipped case (default: %(default)s)")
    p.add_argument("--net", type=Path, help="use files instead of a shipped case")
    p.add_argument("--trips", type=Path)
    p.add_argument("--feeder", type=Path)
    p.add_argument("--params", type=Path)
    p.add_argument("--scenarios", nargs="+", help="scenario files (default: base/stress/island.toml)")
    p.add_argument("--k", type=int)
    p.add_argument("--threads", type=int, help="parallel solves (default: $V2GEQ_THREADS or CPUs)")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--no-plots", action="store_true")
    _add_solver_args(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep" and args.net and not (args.trips and args.feeder):
        ap.error("sweep --net also needs --trips and --feeder")
    try:
        return args.func(args)
    except (SolverFailure, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ModelError, PathError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
