"""Tests for the semismooth Newton solver, its extragradient fallback and the
diagonalization oracle.

Test groups
-----------
1. Small LCPs with known solutions
2. Solver behaviour: determinism, merit decrease, failure reporting
3. Extragradient steps
4. Diagonalization oracle
5. Market structure: Cournot quantities and locational prices
"""

import itertools

import numpy as np
import pytest

from _toys import tiny, two_bus
from v2geq.assembly import CoupledProblem, MCPInstance, assemble_mcp
from v2geq.network import Generator, Lse, MarketParams
from v2geq.oracle import compare, diagonalize_oracle
from v2geq.solver import (CONVERGED, FAILED, SolverConfig, extragradient, extragradient_step,
                          fb_residual, natural_residual, newton, solve)
from v2geq.verify import named

FB_TOL = 1e-8
ORACLE_TOL = 1e-6


def lcp_by_enumeration(M, q):
    """All solutions of 0 <= v _|_ Mv + q >= 0 by trying every active set."""
    n = len(q)
    out = []
    for k in range(n + 1):
        for S in itertools.combinations(range(n), k):
            S = list(S)
            v = np.zeros(n)
            if S:
                try:
                    v[S] = np.linalg.solve(M[np.ix_(S, S)], -q[S])
                except np.linalg.LinAlgError:
                    continue
            w = M @ v + q
            if (v >= -1e-12).all() and (w >= -1e-12).all():
                out.append(v)
    return out


# ── 1. Small LCPs ────────────────────────────────────────────────────────────

def test_one_dimensional_mcp():
    inst = MCPInstance.from_lcp([[1.0]], [-1.0])
    z, report = solve(inst)
    assert report.status == CONVERGED
    assert z == pytest.approx([1.0], abs=1e-10)


def test_two_by_two_lcp():
    inst = MCPInstance.from_lcp([[2.0, 1.0], [1.0, 2.0]], [-1.0, -1.0])
    z, report = solve(inst)
    assert report.ok
    assert z == pytest.approx([1 / 3, 1 / 3], abs=1e-10)
    assert np.max(np.abs(fb_residual(inst, z))) <= FB_TOL


@pytest.mark.parametrize("seed", range(5))
def test_random_lcp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    M = A @ A.T + np.eye(4)
    q = rng.normal(size=4)
    (ref,) = lcp_by_enumeration(M, q)
    z, report = solve(MCPInstance.from_lcp(M, q))
    assert report.ok
    assert z == pytest.approx(ref, abs=1e-8)


# ── 2. Solver behaviour ─────────────────────────────────────────────────────

def test_solve_is_deterministic():
    inst = assemble_mcp(tiny(seed=3, v2g=True))
    z1, r1 = solve(inst)
    z2, r2 = solve(inst)
    assert r1.ok and np.array_equal(z1, z2)
    assert r1.iterations == r2.iterations


def test_merit_never_increases():
    inst = assemble_mcp(tiny(seed=1))
    _, status, _, hist = newton(inst, np.zeros(inst.dim), SolverConfig())
    assert status == CONVERGED and len(hist) > 1
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_converged_report_passes_min_function_check():
    inst = assemble_mcp(tiny(seed=2))
    z, report = solve(inst)
    assert report.ok
    assert natural_residual(inst, z) <= 1e-6
    assert report.complementarity == pytest.approx(natural_residual(inst, z))


def test_infeasible_instance_fails():
    pb = tiny(rating=1.0)
    market = MarketParams((Lse("A", (Generator("1", 1e-4, 0.05, p_max=1.0),)),))
    inst = assemble_mcp(CoupledProblem(pb.transport, pb.feeder, pb.ev, market, pb.paths))
    _, report = solve(inst)
    assert report.status == FAILED
    assert not report.ok
    assert "infeasible" in report.message


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        SolverConfig(backtrack=1.5)


# ── 3. Extragradient ────────────────────────────────────────────────────────

def test_extragradient_step_one_dimension():
    inst = MCPInstance.from_lcp([[1.0]], [-1.0])
    # y = P(0 + 0.5) = 0.5;  v+ = P(0 - 0.5 (0.5 - 1)) = 0.25
    assert extragradient_step(inst, np.zeros(1), 0.5) == pytest.approx([0.25])


def test_extragradient_halves_step_on_stiff_problem():
    inst = MCPInstance.from_lcp([[1000.0]], [-1000.0])
    cfg = SolverConfig(extragradient_step=1.0, extragradient_iterations=400)
    v, z, res, _, hist = extragradient(inst, np.zeros(1), cfg)
    assert res <= cfg.extragradient_tolerance
    assert v == pytest.approx([1.0], abs=1e-6)


def test_fallback_recovers_from_capped_newton():
    inst = assemble_mcp(tiny(seed=4, v2g=True))
    cfg = SolverConfig(max_iterations=1, multistart=1)
    z, report = solve(inst, cfg)
    assert report.ok
    assert np.max(np.abs(fb_residual(inst, z))) <= FB_TOL


# ── 4. Diagonalization oracle ────────────────────────────────────────────────

@pytest.mark.parametrize("v2g", [False, True])
def test_oracle_agrees_with_newton(v2g):
    pb = tiny(dev=12.0, v2g=v2g)
    ref = diagonalize_oracle(pb)
    inst = assemble_mcp(pb)
    z, report = solve(inst)
    assert ref.converged and report.ok
    worst, _ = compare(inst, z, ref)
    assert worst <= ORACLE_TOL


def test_oracle_without_ev_demand_is_decoupled():
    ref = diagonalize_oracle(tiny(dev=0.0, dfv=20.0))
    assert ref.converged and ref.rounds <= 2


def test_oracle_with_zero_demand():
    ref = diagonalize_oracle(tiny(dev=0.0, dfv=0.0))
    assert ref.converged and ref.rounds == 1


# ── 5. Market structure ─────────────────────────────────────────────────────

def test_cournot_duopoly_closed_form():
    a, b, d, e = -0.01, 1.0, 1e-3, 0.1
    inst = assemble_mcp(two_bus(lses=2, a=a, b=b, d=d, e=e, tso_max=0.0))
    z, report = solve(inst)
    assert report.ok
    sell = named(inst, z)["sell"]
    expected = (b - e) / (2 * d - 3 * a)
    assert sell[("L0", "1")] == pytest.approx(expected, rel=1e-8)
    assert sell[("L1", "1")] == pytest.approx(expected, rel=1e-8)


def test_monopoly_closed_form():
    a, b, d, e = -0.01, 1.0, 1e-3, 0.1
    inst = assemble_mcp(two_bus(lses=1, a=a, b=b, d=d, e=e, tso_max=0.0))
    z, report = solve(inst)
    assert report.ok
    assert named(inst, z)["sell"][("L0", "1")] == pytest.approx((b - e) / (2 * d - 2 * a), rel=1e-8)


def test_congested_pocket_price_exceeds_root():
    inst = assemble_mcp(two_bus(rating=5.0, wholesale=0.05))
    z, report = solve(inst)
    assert report.ok
    nz = named(inst, z)
    assert nz["p_line"]["l1"] == pytest.approx(5.0, abs=1e-7)
    assert nz["w"]["1"] > 0.05 + 1e-3


def test_copper_plate_prices_equal_wholesale():
    inst = assemble_mcp(two_bus(rating=1e6, wholesale=0.05))
    z, report = solve(inst)
    assert report.ok
    assert named(inst, z)["w"]["1"] == pytest.approx(0.05, abs=1e-8)
