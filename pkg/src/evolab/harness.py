"""Verification harness: each check runs solver/kernel/fkmc/compactness
machinery against one of the named claims about the evolution operator
and produces a pass/fail outcome with measured and expected values.

Anchor strings are opaque claim identifiers; the three load-bearing
ones ("stima-sol", "form-fond", "l_bound") tag the sup-norm decay, the
integral identity, and the kernel mass lower bound respectively.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import hypotheses
from .expr import parse
from .fkmc import estimate as fk_estimate
from .kernel import (build_propagator, mass_lower_bound_check,
                     tightness_profile)
from .operator import TestFunction, apply_operator
from .solver import Grid, SolveConfig, solve

__all__ = ["CheckOutcome", "HarnessError", "RunContext", "REGISTRY",
           "check_supnorm", "check_evolution_law", "check_integral_identity",
           "check_lp_bound", "check_c0_preservation", "check_not_c0",
           "check_monotone_dirichlet", "check_dirichlet_neumann_agree",
           "check_kernel_mass", "check_slight_bound", "check_fk_crossval",
           "check_tightness_family"]


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class CheckOutcome:
    check_id: str
    anchor: str
    measured: float
    expected: float
    tolerance: float
    passed: bool
    runtime: float
    notes: str = ""

    def to_record(self):
        line = (f"check={self.check_id}|anchor={self.anchor}"
                f"|measured={self.measured:.12g}"
                f"|expected={self.expected:.12g}"
                f"|tol={self.tolerance:.3g}|pass={self.passed}"
                f"|runtime={self.runtime:.2f}s")
        if self.notes:
            line += f"|notes={self.notes}"
        return line


@dataclass
class RunContext:
    """Shared inputs for a batch of checks, plus a propagator cache."""
    op: object
    grid: Grid
    dt: float
    pairs: list                  # [(s, t), ...]
    window: float
    bc: str = "dirichlet"
    mc: object = None            # FkConfig or None
    seed: int = 0
    tols: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)
    _lock: object = field(default_factory=threading.Lock, repr=False)

    def tol(self, name, default):
        return self.tols.get(name, default)

    def cfg(self, bc=None, dt=None):
        return SolveConfig(bc=bc or self.bc, dt=dt or self.dt)

    def prop(self, s, t, bc=None, dt=None, method="auto"):
        key = (s, t, bc or self.bc, dt or self.dt, method)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build_propagator(
                    self.op, self.cfg(bc, dt), self.grid, s, t,
                    method=method)
            return self._cache[key]

    def test_fields(self):
        """Deterministic bounded probe data: constants, an alternating
        sign pattern and seeded noise."""
        n = self.grid.size
        rng = np.random.default_rng(self.seed)
        return [np.ones(n),
                (-1.0) ** np.arange(n),
                rng.uniform(-1.0, 1.0, n)]


def _outcome(check_id, anchor, measured, expected, tol, passed, start,
             notes=""):
    return CheckOutcome(check_id, anchor, float(measured), float(expected),
                        tol, bool(passed), time.perf_counter() - start,
                        notes)


def _bump_values(grid):
    return np.exp(-np.sum(grid.nodes() ** 2, axis=1))


def check_supnorm(ctx):
    """Sup-norm decay: |G(t,s)f| <= exp(-c0 (t-s)) |f| up to the
    discrete-in-time correction."""
    start = time.perf_counter()
    tol = ctx.tol("supnorm", 1e-3)
    c0 = ctx.op.declared_c0
    worst, worst_bound, ok = -np.inf, 1.0, True
    for s, t in ctx.pairs:
        prop = ctx.prop(s, t)
        bound = math.exp(-c0 * (t - s))
        for f in ctx.test_fields():
            ratio = np.max(np.abs(prop.apply(f))) / np.max(np.abs(f))
            if ratio - bound > worst - worst_bound:
                worst, worst_bound = ratio, bound
            ok &= ratio <= bound + tol
    return _outcome("supnorm", "stima-sol", worst, worst_bound, tol, ok,
                    start)


def check_evolution_law(ctx):
    """Two-parameter composition law, exact on aligned time grids."""
    start = time.perf_counter()
    tol = ctx.tol("evolution_law", 1e-12)
    worst = 0.0
    for s, t in ctx.pairs:
        steps = round((t - s) / ctx.dt)
        if steps < 2:
            continue
        mid = s + (steps // 2) * ctx.dt
        whole = ctx.prop(s, t, method="sequential")
        left = ctx.prop(s, mid, method="sequential")
        right = ctx.prop(mid, t, method="sequential")
        comp = right.matrix @ left.matrix
        for f in ctx.test_fields():
            diff = np.max(np.abs((whole.matrix - comp) @ f)) \
                / np.max(np.abs(f))
            worst = max(worst, diff)
    return _outcome("evolution_law", "evolution-law", worst, 0.0, tol,
                    worst <= tol, start)


def check_integral_identity(ctx, f_source="exp(0-x1^2)", s0=None, s1=None,
                            t=None):
    """G(t,s1)f - G(t,s0)f + integral_{s0}^{s1} G(t,sigma) A(sigma)f
    dsigma = 0, with trapezoid quadrature on the solver's own time
    grid.  The datum decays fast enough to count as compactly
    supported at the box scale."""
    start = time.perf_counter()
    op, grid = ctx.op, ctx.grid
    s, tt = ctx.pairs[0]
    s0 = s if s0 is None else s0
    t = tt if t is None else t
    if s1 is None:
        s1 = s0 + round((t - s0) / 2 / ctx.dt) * ctx.dt
    psi = TestFunction.from_source(f_source, op.dim)
    coords = grid.coords()
    f_nodal = np.broadcast_to(np.asarray(psi(s0, coords), dtype=float),
                              (grid.size,)).copy()
    cfg = ctx.cfg()
    u1 = solve(op, cfg, grid, f_nodal, s1, t).values
    u0 = solve(op, cfg, grid, f_nodal, s0, t).values
    n_sub = round((s1 - s0) / ctx.dt)
    sigmas = s0 + ctx.dt * np.arange(n_sub + 1)
    af_sup = 0.0
    integral = np.zeros(grid.size)
    for k, sig in enumerate(sigmas if n_sub > 0 else []):
        af = np.broadcast_to(np.asarray(
            apply_operator(op, psi, sig, coords), dtype=float),
            (grid.size,)).copy()
        af_sup = max(af_sup, np.max(np.abs(af)))
        term = solve(op, cfg, grid, af, sig, t).values if sig < t else af
        weight = 0.5 if k in (0, n_sub) else 1.0
        integral += weight * ctx.dt * term
    window = ctx.grid.window_mask(ctx.window)
    residual = np.max(np.abs((u1 - u0 + integral)[window]))
    scale = af_sup * (s1 - s0)
    tol = ctx.tol("integral_identity", 5e-3)
    return _outcome("integral_identity", "form-fond", residual, 0.0,
                    tol * scale, residual <= tol * scale, start,
                    notes=f"scale={scale:.3g}")


def check_lp_bound(ctx, p=2, variant="div"):
    """L^p growth bound: either via the divergence condition (rate K_p)
    or via drift compensation (rate K'_p)."""
    start = time.perf_counter()
    if variant == "div":
        rep = hypotheses.check_div(ctx.op, ctx.op.time_interval, p)
        rate, anchor = rep.constants["K_p"], "stima-norma-op-Lp"
    elif variant == "drift":
        rep = hypotheses.check_drift_compensation(
            ctx.op, ctx.op.time_interval, p)
        rate, anchor = rep.constants["Kp_prime"], "stima-norma-op-Lp-bis"
    else:
        raise HarnessError(f"unknown variant {variant!r}")
    if not rep.passed:
        raise HarnessError(f"rate-fitting hypothesis failed: "
                           f"{rep.condition}")
    tol = ctx.tol("lp_bound", 1e-3)
    vol = ctx.grid.cell_volume
    f = _bump_values(ctx.grid)
    norm_f = (vol * np.sum(np.abs(f) ** p)) ** (1 / p)
    worst_ratio, worst_bound, ok = -np.inf, 1.0, True
    for s, t in ctx.pairs:
        u = ctx.prop(s, t).apply(f)
        ratio = (vol * np.sum(np.abs(u) ** p)) ** (1 / p) / norm_f
        bound = math.exp(rate * (t - s))
        if ratio / bound > worst_ratio / worst_bound:
            worst_ratio, worst_bound = ratio, bound
        ok &= ratio <= bound * (1 + tol)
    return _outcome(f"lp_bound[p={p},{variant}]", anchor, worst_ratio,
                    worst_bound, tol, ok, start,
                    notes=f"rate={rate:.6g}")


def check_c0_preservation(ctx, V_source="1/(1+r^2)", supp_radius=2.0):
    """Vanishing at infinity is preserved: for f supported in a ball,
    the solution under the outer shell is controlled by the decaying
    barrier V."""
    start = time.perf_counter()
    op, grid = ctx.op, ctx.grid
    V = TestFunction.from_source(V_source, op.dim)
    rep = hypotheses.check_V(op, V, op.time_interval)
    if not rep.passed:
        raise HarnessError("barrier condition failed; route this "
                           "operator to check_not_c0 instead")
    lam0 = rep.constants["lambda0"]
    pts = grid.nodes()
    rad = np.linalg.norm(pts, axis=1)
    # mollifier-style bump, identically zero outside supp_radius
    f = np.zeros(grid.size)
    inside = rad < supp_radius
    f[inside] = np.exp(-1.0 / (1.0 - (rad[inside] / supp_radius) ** 2))
    coords = grid.coords()
    v_nodal = np.broadcast_to(np.asarray(V(0.0, coords), dtype=float),
                              (grid.size,))
    delta_v = float(v_nodal[rad <= supp_radius].min())
    shell = (rad >= 0.8 * grid.n) & (rad <= 0.95 * grid.n)
    tol = ctx.tol("c0_preservation", 1e-9)
    worst, worst_bound, ok = -np.inf, 1.0, True
    for s, t in ctx.pairs:
        u = ctx.prop(s, t).apply(f)
        measured = float(np.max(np.abs(u[shell])))
        bound = (math.exp(lam0 * (t - s)) / delta_v * np.max(np.abs(f))
                 * float(v_nodal[shell].max()))
        if measured - bound > worst - worst_bound:
            worst, worst_bound = measured, bound
        ok &= measured <= bound + tol
    return _outcome("c0_preservation", "c0-barrier", worst, worst_bound,
                    tol, ok, start, notes=f"lambda0={lam0:.6g}")


def check_not_c0(ctx, threshold=0.05):
    """G(t,s)1 stays uniformly positive, so decay at infinity is NOT
    preserved; cross-validated by the Monte Carlo backend when
    configured."""
    start = time.perf_counter()
    ones = np.ones(ctx.grid.size)
    pts = ctx.grid.nodes()
    rad = np.linalg.norm(pts, axis=1)
    outer = rad >= 0.8 * ctx.grid.n
    worst, ok, notes = np.inf, True, []
    for s, t in ctx.pairs:
        u = ctx.prop(s, t, bc="neumann").apply(ones)
        lowest = float(u.min())
        worst = min(worst, lowest)
        center = float(u[ctx.grid.window_mask(0.0)][0])
        ok &= lowest >= threshold
        ok &= float(u[outer].min()) >= center / 2
    if ctx.mc is not None:
        s, t = ctx.pairs[0]
        est = fk_estimate(ctx.op, parse("1", ctx.op.dim),
                          tuple(0.0 for _ in range(ctx.op.dim)), s, t,
                          ctx.mc)
        u = ctx.prop(s, t, bc="neumann").apply(ones)
        center = float(u[ctx.grid.window_mask(0.0)][0])
        mc_tol = 3 * est.stderr + ctx.tol("fk_crossval", 2e-3)
        ok &= abs(est.mean - center) <= mc_tol and est.reliable
        notes.append(f"mc={est.mean:.6g}+-{est.stderr:.2g}")
    return _outcome("not_c0", "not-c0", worst, threshold,
                    ctx.tol("not_c0", 0.0), ok, start,
                    notes=";".join(notes))


def check_monotone_dirichlet(ctx, n0=None, N0=None, doublings=2):
    """Enlarging the Dirichlet box raises the solution pointwise, and
    consecutive increments shrink."""
    start = time.perf_counter()
    n0 = n0 or ctx.grid.n / (2 ** doublings)
    N0 = N0 or (ctx.grid.N - 1) // (2 ** doublings) + 1
    s, t = ctx.pairs[0]
    grids = [Grid(ctx.op.dim, n0 * 2 ** k, (N0 - 1) * 2 ** k + 1)
             for k in range(doublings + 1)]
    sols = [solve(ctx.op, ctx.cfg(bc="dirichlet"), g, _bump_values(g),
                  s, t) for g in grids]
    worst, sups = np.inf, []
    for small, big in zip(sols, sols[1:]):
        mask = small.grid.window_mask(ctx.window)
        pts = small.grid.nodes()[mask]
        idx = _embed(big.grid, pts)
        inc = big.values[idx] - small.values[mask]
        worst = min(worst, float(inc.min()))
        sups.append(float(np.max(np.abs(inc))))
    tol = ctx.tol("monotone", 1e-10)
    # increment ordering only means something above roundoff noise
    ok = worst >= -tol and all(a >= b - 1e-12
                               for a, b in zip(sups, sups[1:]))
    return _outcome("monotone_dirichlet", "domain-monotonicity", worst,
                    0.0, tol, ok, start,
                    notes="increments=" + ",".join(f"{v:.3g}" for v in sups))


def _embed(grid, pts):
    idx = np.rint((pts + grid.n) / grid.dx).astype(int)
    if grid.dim == 1:
        return idx[:, 0]
    return idx[:, 0] * grid.N + idx[:, 1]


def check_dirichlet_neumann_agree(ctx):
    """Both boundary recipes approximate the same whole-space operator:
    on an inner window they agree at the discretization scale."""
    start = time.perf_counter()
    s, t = ctx.pairs[0]
    f = _bump_values(ctx.grid)
    ud = solve(ctx.op, ctx.cfg(bc="dirichlet"), ctx.grid, f, s, t)
    un = solve(ctx.op, ctx.cfg(bc="neumann"), ctx.grid, f, s, t)
    mask = ctx.grid.window_mask(ctx.window)
    diff = float(np.max(np.abs(ud.values[mask] - un.values[mask])))
    tol = ctx.tol("dn_agree", 2e-3)
    return _outcome("dirichlet_neumann_agree", "domain-limit", diff, 0.0,
                    tol, diff <= tol, start)


def check_kernel_mass(ctx, mass_floor=0.05, dt=None):
    """Row sums obey the exponential decay cap; the mass over the
    observation window stays above a strictly positive floor."""
    start = time.perf_counter()
    s, t = ctx.pairs[0]
    prop = ctx.prop(s, t, dt=dt)
    sums = prop.matrix.sum(axis=1)
    cap = math.exp(-ctx.op.declared_c0 * (t - s))
    tol = ctx.tol("kernel_mass", 1e-6)
    low = mass_lower_bound_check(prop, ctx.window)
    ok = sums.max() <= cap + tol and low["min_mass"] >= mass_floor
    return _outcome("kernel_mass", "1_est;l_bound", low["min_mass"],
                    mass_floor, tol, ok, start,
                    notes=f"max_row_sum={sums.max():.9f},cap={cap:.9f}")


def check_slight_bound(ctx, phi_source="1+r^2"):
    """With c >= 0 and A(t)phi uniformly bounded above by M_J:
    G(t,s)phi <= phi + M_J (t-s).  Box clipping of phi only
    under-counts the left side, keeping the check one-sided safe."""
    start = time.perf_counter()
    op = ctx.op
    if op.declared_c0 < 0:
        raise HarnessError("needs a nonnegative potential")
    phi = TestFunction.from_source(phi_source, op.dim)
    rep = hypotheses.check_bounded_Aphi(op, phi, op.time_interval)
    if not rep.passed:
        raise HarnessError("A(t)phi is not bounded above")
    M_J = max(rep.constants["M_J"], 0.0)
    coords = ctx.grid.coords()
    phi_nodal = np.broadcast_to(
        np.asarray(phi(0.0, coords), dtype=float), (ctx.grid.size,))
    mask = ctx.grid.window_mask(ctx.window)
    tol = ctx.tol("slight_bound", 1e-3)
    worst, worst_bound, ok = -np.inf, 0.0, True
    for s, t in ctx.pairs:
        g_phi = ctx.prop(s, t).apply(phi_nodal)
        excess = float(np.max((g_phi - phi_nodal)[mask]))
        bound = M_J * (t - s)
        if excess - bound > worst - worst_bound:
            worst, worst_bound = excess, bound
        ok &= excess <= bound + tol
    return _outcome("slight_bound", "hyp4bis", worst, worst_bound, tol,
                    ok, start, notes=f"M_J={M_J:.6g}")


def check_fk_crossval(ctx, f_source="exp(0-x1^2)", n_points=9):
    """PDE solver vs Feynman-Kac Monte Carlo at window points."""
    start = time.perf_counter()
    if ctx.mc is None:
        raise HarnessError("no Monte Carlo configuration")
    op = ctx.op
    f_expr = parse(f_source, op.dim)
    psi = TestFunction.from_source(f_source, op.dim)
    coords = ctx.grid.coords()
    f_nodal = np.broadcast_to(np.asarray(psi(0.0, coords), dtype=float),
                              (ctx.grid.size,))
    s, t = ctx.pairs[0]
    prop = ctx.prop(s, t)
    u = prop.apply(f_nodal)
    dx = ctx.grid.dx
    xs = np.rint(np.linspace(-ctx.window, ctx.window, n_points) / dx) * dx
    solver_tol = ctx.tol("fk_crossval", 2e-3)
    worst, ok, unreliable = 0.0, True, 0
    for x in xs:
        x_pt = (x,) if op.dim == 1 else (x, 0.0)
        node = prop.node_index(x_pt)
        est = fk_estimate(op, f_expr, x_pt, s, t, ctx.mc)
        excess = abs(est.mean - u[node]) - 3 * est.stderr
        worst = max(worst, excess)
        ok &= excess <= solver_tol
        unreliable += not est.reliable
    ok &= unreliable == 0
    return _outcome("fk_crossval", "repres-formula", worst, 0.0,
                    solver_tol, ok, start,
                    notes=f"points={n_points},unreliable={unreliable}")


def check_tightness_family(ctx, R_list=(2.0, 3.0, 4.0, 5.0, 6.0),
                           threshold=0.05, n_pairs=9):
    """Tail masses vanish uniformly over a grid of (s,t) pairs and
    base points: the kernel family is tight."""
    start = time.perf_counter()
    lo = min(s for s, _ in ctx.pairs)
    hi = max(t for _, t in ctx.pairs)
    spans = np.linspace(0.1 * (hi - lo), hi - lo, 3)
    starts = np.linspace(lo, hi, 5)[:3]
    profile = np.zeros(len(R_list))
    count = 0
    for s in starts:
        for span in spans:
            t = s + span
            if t > hi + 1e-12 or count >= n_pairs:
                continue
            steps = max(1, round((t - s) / ctx.dt))
            t = s + steps * ctx.dt
            prop = ctx.prop(float(s), float(t))
            prof = tightness_profile(prop, ctx.window, R_list)
            profile = np.maximum(profile, prof["sup_tail"])
            count += 1
    ok = (all(a >= b for a, b in zip(profile, profile[1:]))
          and profile[-1] <= threshold)
    return _outcome("tightness_family", "tight-loc", profile[-1],
                    threshold, 0.0, ok, start,
                    notes="profile=" + ",".join(f"{v:.3g}" for v in profile))


REGISTRY = {
    "supnorm": (check_supnorm, "stima-sol"),
    "evolution_law": (check_evolution_law, "evolution-law"),
    "integral_identity": (check_integral_identity, "form-fond"),
    "lp_bound": (check_lp_bound, "stima-norma-op-Lp"),
    "c0_preservation": (check_c0_preservation, "c0-barrier"),
    "not_c0": (check_not_c0, "not-c0"),
    "monotone_dirichlet": (check_monotone_dirichlet,
                           "domain-monotonicity"),
    "dirichlet_neumann_agree": (check_dirichlet_neumann_agree,
                                "domain-limit"),
    "kernel_mass": (check_kernel_mass, "1_est;l_bound"),
    "slight_bound": (check_slight_bound, "hyp4bis"),
    "fk_crossval": (check_fk_crossval, "repres-formula"),
    "tightness_family": (check_tightness_family, "tight-loc"),
}
