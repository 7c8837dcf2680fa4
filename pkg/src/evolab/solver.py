"""Implicit-Euler finite-difference solver for D_t u = A(t) u on an
exhausting sequence of boxes [-n, n]^d with zero-Dirichlet or
zero-Neumann boundary conditions.

The scheme freezes coefficients at the end of each step and upwinds the
drift, so the stepping matrix I - dt*A_h is an M-matrix whenever the
potential is nonnegative; the discrete maximum principle and positivity
then hold exactly.  Negative potential infima are handled by running on
the shifted operator with potential c - c0 and rescaling the output by
exp(-c0 (t-s)) at read-out.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .expr import free_vars
from .operator import OperatorSpec, shifted_nonnegative

__all__ = [
    "Grid", "SolveConfig", "Field", "SolverError", "CrossTermError",
    "step", "solve", "evolution_limit", "step_matrix_1d", "step_matrix_2d",
    "field_to_csv",
]


class SolverError(Exception):
    pass


class CrossTermError(SolverError):
    """Cross-derivative coefficients would break the M-matrix property."""


@dataclass(frozen=True)
class Grid:
    dim: int
    n: float      # half-width of the box [-n, n]^d
    N: int        # points per axis, odd so the origin is a node

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.N < 3 or self.N % 2 == 0:
            raise ValueError("N must be odd and >= 3")
        if self.n <= 0:
            raise ValueError("n must be positive")

    @property
    def dx(self):
        return 2 * self.n / (self.N - 1)

    @property
    def size(self):
        return self.N ** self.dim

    @property
    def cell_volume(self):
        return self.dx ** self.dim

    def axis(self):
        return np.linspace(-self.n, self.n, self.N)

    def nodes(self):
        """Node coordinates, shape (size, dim); index k = i*N + j in 2D."""
        ax = self.axis()
        if self.dim == 1:
            return ax[:, None]
        X1, X2 = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([X1.ravel(), X2.ravel()], axis=1)

    def coords(self):
        pts = self.nodes()
        return [pts[:, i] for i in range(self.dim)]

    def window_mask(self, half_width):
        """Nodes with |x|_inf <= half_width (plus roundoff slack)."""
        pts = self.nodes()
        return np.all(np.abs(pts) <= half_width + 1e-12, axis=1)

    def doubled(self):
        return Grid(self.dim, 2 * self.n, 2 * (self.N - 1) + 1)


@dataclass(frozen=True)
class SolveConfig:
    bc: str               # "dirichlet" | "neumann"
    dt: float

    def __post_init__(self):
        if self.bc not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition {self.bc!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class Field:
    grid: Grid
    values: np.ndarray
    t: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError("field shape does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


def _is_autonomous(op):
    names = set()
    for row in op.Q:
        for e in row:
            names |= free_vars(e)
    for e in op.b:
        names |= free_vars(e)
    names |= free_vars(op.c)
    return "t" not in names


def step_matrix_1d(op, cfg, grid, t_next):
    """Banded form of M = I - dt*A_h(t_next) for scipy.linalg.solve_banded."""
    dt, dx = cfg.dt, grid.dx
    coords = grid.coords()
    q = op.eval_Q(t_next, coords)[0][0]
    b = op.eval_b(t_next, coords)[0]
    c = op.eval_c(t_next, coords)
    N = grid.N

    sup = -dt * (q / dx ** 2 + np.maximum(b, 0.0) / dx)   # M[i, i+1]
    sub = -dt * (q / dx ** 2 + np.maximum(-b, 0.0) / dx)  # M[i, i-1]
    diag = 1.0 + dt * (2 * q / dx ** 2 + np.abs(b) / dx + c)

    if cfg.bc == "dirichlet":
        diag[0] = diag[-1] = 1.0
        sup[0] = 0.0
        sub[-1] = 0.0
    else:
        # ghost-node mirror: the missing neighbour folds onto the inner one
        coeff0 = 2 * q[0] / dx ** 2 + np.abs(b[0]) / dx
        sup[0] = -dt * coeff0
        diag[0] = 1.0 + dt * (coeff0 + c[0])
        coeffN = 2 * q[-1] / dx ** 2 + np.abs(b[-1]) / dx
        sub[-1] = -dt * coeffN
        diag[-1] = 1.0 + dt * (coeffN + c[-1])

    ab = np.zeros((3, N))
    ab[0, 1:] = sup[:-1]
    ab[1, :] = diag
    ab[2, :-1] = sub[1:]
    return ab


def step_matrix_2d(op, cfg, grid, t_next):
    """Sparse M = I - dt*A_h(t_next) in CSC form (5-point plus potential).

    Cross-derivative terms are rejected: with the 4-point cross stencil
    any nonzero q12 produces a wrong-sign off-diagonal entry, destroying
    the M-matrix structure that positivity relies on.
    """
    dt, dx = cfg.dt, grid.dx
    N = grid.N
    coords = grid.coords()
    Q = op.eval_Q(t_next, coords)
    if np.max(np.abs(Q[0][1])) > 1e-12:
        raise CrossTermError(
            "nonzero cross-diffusion q12 breaks the discrete M-matrix "
            "structure; only diagonal Q is supported in 2D")
    b = op.eval_b(t_next, coords)
    c = op.eval_c(t_next, coords)
    neumann = cfg.bc == "neumann"

    diag = 1.0 + dt * c.reshape(N, N).copy()
    plus = [np.zeros((N, N)), np.zeros((N, N))]   # towards i+1 resp. j+1
    minus = [np.zeros((N, N)), np.zeros((N, N))]  # towards i-1 resp. j-1
    for axis in range(2):
        qd = Q[axis][axis].reshape(N, N)
        bd = b[axis].reshape(N, N)
        cp = qd / dx ** 2 + np.maximum(bd, 0.0) / dx
        cm = qd / dx ** 2 + np.maximum(-bd, 0.0) / dx
        interior = np.zeros((N, N), dtype=bool)
        if axis == 0:
            interior[1:-1, :] = True
        else:
            interior[:, 1:-1] = True
        plus[axis][interior] = cp[interior]
        minus[axis][interior] = cm[interior]
        diag += dt * (plus[axis] + minus[axis])
        if neumann:
            # ghost-node mirror on the two faces of this axis
            face = 2 * qd / dx ** 2 + np.abs(bd) / dx
            lo = (0, slice(None)) if axis == 0 else (slice(None), 0)
            hi = (-1, slice(None)) if axis == 0 else (slice(None), -1)
            plus[axis][lo] = face[lo]
            minus[axis][hi] = face[hi]
            diag[lo] += dt * face[lo]
            diag[hi] += dt * face[hi]

    if cfg.bc == "dirichlet":
        boundary = np.zeros((N, N), dtype=bool)
        boundary[0, :] = boundary[-1, :] = True
        boundary[:, 0] = boundary[:, -1] = True
        for a in (0, 1):
            plus[a][boundary] = 0.0
            minus[a][boundary] = 0.0
        diag[boundary] = 1.0

    P = N * N
    M = scipy.sparse.diags(
        [diag.ravel(),
         -dt * plus[0].ravel()[:P - N], -dt * minus[0].ravel()[N:],
         -dt * plus[1].ravel()[:P - 1], -dt * minus[1].ravel()[1:]],
        offsets=[0, N, -N, 1, -1], format="csc")
    return M


class _Stepper:
    """Per-step linear solves, caching the factorization when the
    operator coefficients do not depend on time."""

    def __init__(self, op, cfg, grid):
        self.op = op
        self.cfg = cfg
        self.grid = grid
        self.autonomous = _is_autonomous(op)
        self._cached_t = None
        self._cached = None
        if cfg.bc == "dirichlet":
            self.boundary = ~grid.window_mask(grid.n - grid.dx / 2)
        else:
            self.boundary = None

    def _factor(self, t_next):
        if self.autonomous and self._cached is not None:
            return self._cached
        if self._cached_t == t_next:
            return self._cached
        if self.grid.dim == 1:
            ab = step_matrix_1d(self.op, self.cfg, self.grid, t_next)
            fac = ("banded", ab)
        else:
            M = step_matrix_2d(self.op, self.cfg, self.grid, t_next)
            fac = ("splu", scipy.sparse.linalg.splu(M))
        self._cached = fac
        self._cached_t = t_next
        return fac

    def apply(self, values, t_next):
        rhs = values
        if self.boundary is not None:
            rhs = values.copy()
            rhs[self.boundary] = 0.0
        kind, fac = self._factor(t_next)
        try:
            if kind == "banded":
                out = scipy.linalg.solve_banded((1, 1), fac, rhs)
            else:
                out = fac.solve(rhs)
        except (np.linalg.LinAlgError, RuntimeError) as err:
            raise SolverError(
                f"linear solve failed at t={t_next:g}: {err}") from err
        if not np.all(np.isfinite(out)):
            raise SolverError(f"non-finite solution at t={t_next:g}")
        return out


def step(op, cfg, u, t_from):
    """One implicit-Euler step from t_from to t_from + dt."""
    t_next = t_from + cfg.dt
    lo, hi = op.time_interval
    if not (lo <= t_from and t_next <= hi + 1e-12):
        raise SolverError(f"step [{t_from}, {t_next}] outside interval")
    stepper = _Stepper(op, cfg, u.grid)
    out = stepper.apply(u.values, t_next)
    return Field(u.grid, out, t_next)


def _n_steps(s, t, dt):
    ratio = (t - s) / dt
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise SolverError(
            f"t - s = {t - s:g} is not an integer multiple of dt = {dt:g}")
    return n


def solve(op, cfg, grid, f, s, t):
    """Evolve initial datum f from time s to t; returns the final Field.

    f may be a Field on `grid`, an array of nodal values, or a callable
    of the coordinate arrays.
    """
    if callable(f):
        values = np.asarray(f(grid.coords()), dtype=float)
    elif isinstance(f, Field):
        values = f.values.copy()
    else:
        values = np.asarray(f, dtype=float).copy()
    if t == s:
        return Field(grid, values, t)
    run_op, c0 = shifted_nonnegative(op)
    n = _n_steps(s, t, cfg.dt)
    stepper = _Stepper(run_op, cfg, grid)
    for k in range(n):
        values = stepper.apply(values, s + (k + 1) * cfg.dt)
    if c0 < 0:
        values = values * math.exp(-c0 * (t - s))
    return Field(grid, values, t)


def evolution_limit(op, cfg, f, s, t, window, tol, n0=4.0, N0=201,
                    max_doublings=5):
    """Box-doubling limit of the approximating problems.

    Solves on boxes of half-width n0, 2*n0, ... at fixed spacing and
    stops when the sup over the observation window (|x|_inf <= window)
    of the change between consecutive solutions drops below tol.

    Returns a dict with the finest field restricted to the window, the
    window node coordinates, n_used and the increment trace.
    """
    grid = Grid(op.dim, n0, N0)
    if window >= grid.n:
        raise SolverError("window must lie strictly inside the first box")
    increments = []
    prev_field = solve(op, cfg, grid, f, s, t)
    prev_grid = grid
    for _ in range(max_doublings):
        grid = prev_grid.doubled()
        cur = solve(op, cfg, grid, f, s, t)
        # previous-grid nodes are a subset of the doubled grid's nodes
        mask_prev = prev_grid.window_mask(window)
        pts_prev = prev_grid.nodes()[mask_prev]
        idx = _node_indices(grid, pts_prev)
        diff = cur.values[idx] - prev_field.values[mask_prev]
        increments.append(float(np.max(np.abs(diff))))
        if increments[-1] <= tol:
            mask = grid.window_mask(window)
            return {
                "values": cur.values[mask],
                "points": grid.nodes()[mask],
                "field": cur,
                "grid": grid,
                "n_used": grid.n,
                "increments": increments,
                "pointwise_increment": diff,
            }
        prev_field, prev_grid = cur, grid
    raise SolverError(
        f"no convergence after {max_doublings} doublings; "
        f"increments: {increments}")


def _node_indices(grid, pts):
    """Flat indices of the given coordinates in `grid` (exact nodes)."""
    dx = grid.dx
    ii = np.rint((pts[:, 0] + grid.n) / dx).astype(int)
    if grid.dim == 1:
        return ii
    jj = np.rint((pts[:, 1] + grid.n) / dx).astype(int)
    return ii * grid.N + jj


def field_to_csv(field, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i+1}" for i in range(field.grid.dim)] + ["value"])
        for p, v in zip(field.grid.nodes(), field.values):
            w.writerow([f"{c:.12g}" for c in p] + [f"{v:.12g}"])
