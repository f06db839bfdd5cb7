"""Numerical solution of the assembled complementarity problem.

The primary method is a semismooth Newton iteration on the Fischer-Burmeister
reformulation Phi(z) = 0 with an Armijo line search on 1/2 ||Phi||^2.  The
model has non-unique multipliers in places (e.g. how TSO purchases are split
across buses), so the Newton matrix can be singular; a diagonal shift is added
when that happens.  If Newton stalls, a projected extragradient method on the
primal variational inequality takes over and Newton polishes its answer.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

CONVERGED = "converged"
FALLBACK_CONVERGED = "fallback-converged"
FAILED = "failed"

_DEGENERATE = 1.0 / math.sqrt(2.0) - 1.0


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 300
    armijo_slope: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    regularization: float = 1e-10  # first diagonal shift tried on a singular Newton matrix
    max_regularization: float = 1e2
    fallback_after: int = 8  # consecutive stalled iterations before switching method
    use_fallback: bool = True
    extragradient_step: float = 1.0
    extragradient_iterations: int = 400
    polish_iterations: int = 100  # Newton iterations after the fallback
    extragradient_tolerance: float = 1e-7
    seed: int = 0
    multistart: int = 3
    stop_at_first: bool = True
    trace_path: str | None = None  # line-delimited JSON iteration log

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.multistart < 1:
            raise ValueError("need at least one start")


@dataclass
class SolveReport:
    status: str
    iterations: int
    residual: float  # infinity norm of the FB residual
    complementarity: float  # infinity norm of the min-function residual
    wall_time: float
    start: str = ""
    wardrop_gap: float = math.nan
    clearing_residual: float = math.nan
    message: str = ""
    merit_history: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)  # (start, status, residual, iterations)

    @property
    def ok(self):
        return self.status in (CONVERGED, FALLBACK_CONVERGED)

    def to_dict(self):
        return {"status": self.status, "iterations": self.iterations, "residual": self.residual,
                "complementarity": self.complementarity, "wall_time": self.wall_time,
                "start": self.start, "wardrop_gap": self.wardrop_gap,
                "clearing_residual": self.clearing_residual, "message": self.message,
                "outcomes": [list(o) for o in self.outcomes]}


def fb_residual(instance, z):
    """Fischer-Burmeister residual vector of the instance at ``z``."""
    return instance.fb_residual(np.asarray(z, dtype=float))


def natural_residual(instance, z):
    """Independent check: max |min(z - l, G)| over bounded rows and |G| over free rows."""
    z = np.asarray(z, dtype=float)
    G = instance.G(z)
    r = np.abs(G)
    b = np.isfinite(instance.lower)
    r[b] = np.abs(np.minimum(z[b] - instance.lower[b], G[b]))
    return float(r.max()) if r.size else 0.0


# ---------------------------------------------------------------------------
# Newton machinery
# ---------------------------------------------------------------------------

class _Newton:
    """Evaluates Phi and its generalised Jacobian with the traffic term kept
    in factored form: the path-path block Rt diag(dtau) L is never formed.
    Instead the link flows enter as auxiliary unknowns y = L d."""

    def __init__(self, inst):
        self.inst = inst
        self.J0 = inst.jacobian_static()
        self.bounded = inst.bounded
        self.lower = inst.lower
        n, dim = inst.n, inst.dim
        if inst.traffic is not None:
            Rt = inst._Rt
            self.m = Rt.shape[1]
            self.Rt_full = sp.vstack([Rt, sp.csr_matrix((dim - n, self.m))], format="csr")
            self.L_full = sp.hstack([inst._L, sp.csr_matrix((self.m, dim - n))], format="csr")
        else:
            self.m = 0

    def phi(self, z):
        G = self.inst.G(z)
        return self.inst.fb_residual(z, G), G

    def diagonals(self, z, G):
        dim = self.inst.dim
        Da = np.zeros(dim)
        Db = np.ones(dim)
        b = self.bounded
        a = z[b] - self.lower[b]
        g = G[b]
        r = np.hypot(a, g)
        nz = r > 0
        da = np.full(a.shape, _DEGENERATE)
        db = np.full(a.shape, _DEGENERATE)
        da[nz] = a[nz] / r[nz] - 1.0
        db[nz] = g[nz] / r[nz] - 1.0
        Da[b] = da
        Db[b] = db
        return Da, Db

    def matrix(self, z, Da, Db):
        """Newton matrix, extended by the link-flow unknowns when traffic is present."""
        top = sp.diags(Da) + sp.diags(Db) @ self.J0
        if not self.m:
            return sp.csc_matrix(top), None
        _, dt, _ = self.inst.traffic_factors(z)
        right = sp.diags(Db) @ self.Rt_full @ sp.diags(dt)
        K = sp.bmat([[top, right], [self.L_full, -sp.identity(self.m)]], format="csc")
        return K, dt

    def grad(self, z, Phi, Da, Db, dt):
        """J_Phi' Phi."""
        u = Db * Phi
        g = Da * Phi + self.J0.T @ u
        if self.m:
            g += self.L_full.T @ (dt * (self.Rt_full.T @ u))
        return g

    def apply(self, z, d, Da, Db, dt):
        """J_Phi d."""
        jd = self.J0 @ d
        if self.m:
            jd += self.Rt_full @ (dt * (self.L_full @ d))
        return Da * d + Db * jd


def _solve_sparse(K, rhs):
    try:
        lu = spla.splu(K, permc_spec="COLAMD")
        x = lu.solve(rhs)
    except (RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(x)):
        return None
    # one step of iterative refinement
    r = rhs - K @ x
    try:
        x = x + lu.solve(r)
    except (RuntimeError, ValueError):
        return None
    return x if np.all(np.isfinite(x)) else None


def _direction(nw, z, Phi, Da, Db, cfg, stats):
    """Newton direction, with diagonal shifts if the matrix is singular or the
    direction is not a usable descent direction; gradient step as last resort."""
    K, dt = nw.matrix(z, Da, Db)
    dim = nw.inst.dim
    grad = nw.grad(z, Phi, Da, Db, dt)
    rhs = np.concatenate([-Phi, np.zeros(nw.m)])
    scale = 1.0 + np.linalg.norm(z)
    nu = 0.0
    while True:
        Kn = K if nu == 0.0 else K + nu * _shift(K.shape[0], dim)
        x = _solve_sparse(Kn, rhs)
        if x is not None:
            d = x[:dim]
            slope = grad @ d
            nd = np.linalg.norm(d)
            if nd < 1e12 * scale and slope < -1e-12 * nd * np.linalg.norm(grad):
                stats["shift"] = nu
                return d, grad, slope, dt
        nu = cfg.regularization if nu == 0.0 else nu * 100.0
        if nu > cfg.max_regularization:
            break
    stats["shift"] = math.inf
    d = -grad
    return d, grad, grad @ d, dt


def _shift(N, dim):
    diag = np.zeros(N)
    diag[:dim] = 1.0
    return sp.diags(diag, format="csc")


def newton(instance, z0, cfg, trace=None):
    """FB semismooth Newton from ``z0``.  Returns (z, status, iterations, history)."""
    nw = _Newton(instance)
    z = np.array(z0, dtype=float)
    Phi, G = nw.phi(z)
    psi = 0.5 * Phi @ Phi
    history = [psi]
    stalled = 0
    best = (np.max(np.abs(Phi)) if Phi.size else 0.0, z.copy())
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        res = max(np.max(np.abs(Phi)) if Phi.size else 0.0,
                  np.max(np.abs(instance.min_residual(z, G))) if Phi.size else 0.0)
        if res <= cfg.tolerance:
            return z, CONVERGED, it - 1, history
        Da, Db = nw.diagonals(z, G)
        stats = {}
        d, grad, slope, _ = _direction(nw, z, Phi, Da, Db, cfg, stats)
        t = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            zt = z + t * d
            Pt, Gt = nw.phi(zt)
            pt = 0.5 * Pt @ Pt
            if pt <= psi + cfg.armijo_slope * t * slope:
                accepted = True
                break
            t *= cfg.backtrack
        if trace is not None:
            trace.write(json.dumps({"iter": it, "merit": psi, "res": res, "step": t if accepted else 0.0,
                                    "shift": stats.get("shift")}) + "\n")
        if not accepted:
            stalled += 1
            if stalled >= 2:
                break
            continue
        improvement = psi - pt
        z, Phi, G, psi = zt, Pt, Gt, pt
        history.append(psi)
        r_inf = np.max(np.abs(Phi)) if Phi.size else 0.0
        if r_inf < best[0]:
            best = (r_inf, z.copy())
        stalled = stalled + 1 if improvement < 1e-6 * max(history[-2], 1e-300) and t < 1e-3 else 0
        if stalled >= cfg.fallback_after:
            break
    res = max(np.max(np.abs(Phi)) if Phi.size else 0.0,
              np.max(np.abs(instance.min_residual(z, G))) if Phi.size else 0.0)
    if res <= cfg.tolerance:
        return z, CONVERGED, it, history
    return best[1], FAILED, it, history


# ---------------------------------------------------------------------------
# Extragradient fallback on the primal VI
# ---------------------------------------------------------------------------

class ProjectionError(RuntimeError):
    pass


class _Projector:
    """Euclidean projection onto {v >= l, B1 v = b1, B2 v <= b2} via a QP."""

    def __init__(self, inst):
        import cvxpy as cp

        self.cp = cp
        self.inst = inst
        n = inst.n
        self.u = cp.Parameter(n)
        self.y = cp.Variable(n)
        cons = []
        lb = np.isfinite(inst.lower_v)
        self.c_lb = None
        if lb.any():
            self.c_lb = self.y[np.flatnonzero(lb)] >= inst.lower_v[lb]
            cons.append(self.c_lb)
        self.c_eq = inst.B1 @ self.y == inst.b1 if inst.n_eq else None
        self.c_in = inst.B2 @ self.y <= inst.b2 if inst.n_ineq else None
        cons += [c for c in (self.c_eq, self.c_in) if c is not None]
        self.prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(self.y - self.u)), cons)

    def __call__(self, u):
        self.u.value = np.asarray(u, dtype=float)
        try:
            self.prob.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12,
                            tol_feas=1e-12)
        except self.cp.error.SolverError as exc:
            raise ProjectionError(str(exc)) from None
        if self.prob.status not in ("optimal", "optimal_inaccurate"):
            raise ProjectionError(f"projection QP is {self.prob.status}: the constraint set is empty")
        return np.asarray(self.y.value, dtype=float)

    def multipliers(self):
        lam = np.asarray(self.c_eq.dual_value, dtype=float) if self.c_eq is not None else np.zeros(0)
        mu = np.asarray(self.c_in.dual_value, dtype=float) if self.c_in is not None else np.zeros(0)
        return lam, np.maximum(mu, 0.0)


def extragradient_step(instance, v, step, projector=None):
    """One Korpelevich step: y = P(v - s H(v)), v+ = P(v - s H(y))."""
    proj = projector if projector is not None else _Projector(instance)
    y = proj(v - step * instance.H(v))
    return proj(v - step * instance.H(y))


def vi_residual(instance, v, projector):
    """Natural residual ||v - P(v - H(v))||_inf of the primal VI."""
    return float(np.max(np.abs(v - projector(v - instance.H(v))))) if instance.n else 0.0


def extragradient(instance, v0, cfg, projector=None):
    """Extragradient with an adaptive step.

    The step is halved whenever the local Lipschitz test fails or the
    natural residual goes up, and grows slowly after accepted steps.  Returns (v, z-estimate, residual, iterations).
    """
    proj = projector if projector is not None else _Projector(instance)
    v = proj(np.asarray(v0, dtype=float))
    step = cfg.extragradient_step
    res = vi_residual(instance, v, proj)
    history = [res]
    it = 0
    for it in range(1, cfg.extragradient_iterations + 1):
        if res <= cfg.extragradient_tolerance:
            break
        hv = instance.H(v)
        y = proj(v - step * hv)
        hy = instance.H(y)
        if step * np.linalg.norm(hv - hy) > 0.9 * np.linalg.norm(v - y) + 1e-15:
            step *= 0.5
            continue
        v_new = proj(v - step * hy)
        res_new = vi_residual(instance, v_new, proj)
        if res_new > res * (1 + 1e-12):
            step *= 0.5
            if step < 1e-14:
                break
            continue
        v, res = v_new, res_new
        history.append(res)
        step *= 1.2  # let the step recover after a run of halvings
    # multipliers of the projection at the fixed point, rescaled by the step
    u = v - step * instance.H(v)
    proj(u)
    lam, mu = proj.multipliers()
    z = np.concatenate([v, lam / step, mu / step])
    return v, z, res, it, history


# ---------------------------------------------------------------------------
# Starts and driver
# ---------------------------------------------------------------------------

def initial_points(instance, cfg):
    """Named starting points; coupled instances get traffic and price warm starts."""
    starts = [("zero", np.zeros(instance.dim))]
    if instance.problem is not None:
        from .oracle import warm_start

        starts.append(("free-flow", warm_start(instance, prices=False)))
        starts.append(("uniform-price", warm_start(instance, prices=True)))
    rng = np.random.default_rng(cfg.seed)
    while len(starts) < cfg.multistart:
        z = rng.uniform(0.0, 1.0, instance.dim)
        starts.append((f"random-{len(starts)}", z))
    return starts[:cfg.multistart]


def solve(instance, config=None, starts=None):
    """Solve the MCP; returns (z, SolveReport).

    Starts are tried in order; with ``stop_at_first`` the first converged run
    is returned, otherwise all runs are recorded and the best is returned.
    """
    cfg = config or SolverConfig()
    t0 = time.perf_counter()
    trace = open(cfg.trace_path, "w") if cfg.trace_path else None
    message = ""
    try:
        starts = starts if starts is not None else initial_points(instance, cfg)
        outcomes = []
        best = None
        for name, z0 in starts:
            z, status, iters, hist = newton(instance, z0, cfg, trace)
            if status != CONVERGED and cfg.use_fallback:
                z, status, iters2, hist2, message = _fallback(instance, z, cfg, trace)
                iters += iters2
                hist = hist + hist2
            res = float(np.max(np.abs(instance.fb_residual(z)))) if instance.dim else 0.0
            outcomes.append((name, status, res, iters))
            cand = (status == FAILED, res, name, z, iters, hist)
            if best is None or cand[:2] < best[:2]:
                best = cand
            if status != FAILED and cfg.stop_at_first:
                break
            if message.startswith("infeasible"):
                break  # no start can help when the constraint set is empty
    finally:
        if trace is not None:
            trace.close()
    _, res, name, z, iters, hist = best
    status = next(o[1] for o in outcomes if o[0] == name)
    report = SolveReport(status=status, iterations=iters, residual=res,
                         complementarity=natural_residual(instance, z),
                         wall_time=time.perf_counter() - t0, start=name,
                         message=message, merit_history=hist, outcomes=outcomes)
    if report.ok and report.complementarity > cfg.tolerance:
        report.status = FAILED
    if instance.problem is not None:
        from .verify import clearing_residual, wardrop_gap

        report.wardrop_gap = wardrop_gap(instance, z)
        report.clearing_residual = clearing_residual(instance, z)
    return z, report


def _fallback(instance, z, cfg, trace):
    """Extragradient from the Newton point's primal part, then Newton polish.
    Returns (z, status, iterations, merit history, message)."""
    try:
        _, z_eg, _, iters, _ = extragradient(instance, z[:instance.n], cfg)
    except ProjectionError as exc:
        log.warning("extragradient fallback failed: %s", exc)
        return z, FAILED, 0, [], f"infeasible: {exc}"
    polish = replace(cfg, max_iterations=cfg.polish_iterations)
    z2, status, it2, hist = newton(instance, z_eg, polish, trace)
    if status == CONVERGED:
        return z2, FALLBACK_CONVERGED, iters + it2, hist, ""
    return z2, FAILED, iters + it2, hist, "no start reached the tolerance"
