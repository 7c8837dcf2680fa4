"""Discrete propagator matrix and Green-kernel diagnostics.

The propagator P of a run from s to t collects the solver's action on
every nodal basis vector: (G(t,s)f)(x_i) = sum_j P[i,j] f(y_j).  The
kernel density is P divided by the cell volume; every mass / tail-mass
quantity used by the tightness and lower-bound diagnostics is a row
functional of P.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .operator import shifted_nonnegative
from .solver import Grid, SolveConfig, _n_steps, _node_indices, _Stepper

__all__ = [
    "KernelError", "Propagator", "build_propagator", "mass", "tail_mass",
    "tightness_profile", "mass_lower_bound_check", "kernel_row",
    "profile_to_csv", "row_to_csv",
]

# dense matrix powering pays off only for long autonomous runs on
# moderately sized grids
_POWER_MIN_STEPS = 33
_POWER_MAX_SIZE = 2000


class KernelError(Exception):
    pass


@dataclass(frozen=True)
class Propagator:
    grid: Grid
    s: float
    t: float
    bc: str
    dt: float
    matrix: np.ndarray      # (size, size); rows = source points x
    declared_c0: float

    def apply(self, f_values):
        return self.matrix @ np.asarray(f_values, dtype=float)

    def node_index(self, x):
        pt = np.atleast_2d(np.asarray(x, dtype=float))
        idx = int(_node_indices(self.grid, pt)[0])
        node = self.grid.nodes()[idx]
        if np.max(np.abs(node - pt[0])) > 1e-9:
            raise KernelError(f"{x} is not a grid node")
        return idx

    def row_sum_bound(self):
        """Discrete analogue of the exponential mass-decay bound.

        For a potential floor c0 >= 0 each implicit step divides any
        constant super-solution by at least (1 + c0*dt), so the honest
        discrete bound is (1 + c0*dt)^(-steps); it exceeds
        exp(-c0 (t-s)) by O(dt).  Negative floors are handled by the
        shift-and-rescale device and give exp(-c0 (t-s)) exactly.
        """
        c0, span = self.declared_c0, self.t - self.s
        if c0 <= 0 or span == 0:
            return math.exp(-c0 * span)
        steps = round(span / self.dt)
        return (1.0 + c0 * self.dt) ** -steps


def _validate(prop):
    m = prop.matrix
    if m.min() < -1e-14:
        i, j = np.unravel_index(np.argmin(m), m.shape)
        raise KernelError(
            f"negative kernel entry {m[i, j]:.3e} at ({i},{j})")
    sums = m.sum(axis=1)
    bound = prop.row_sum_bound() + 1e-6
    if sums.max() > bound:
        raise KernelError(
            f"row sum {sums.max():.9f} exceeds mass bound {bound:.9f}")


def _dense_step_matrix(op, cfg, grid, t_next):
    """One implicit step as a dense matrix acting on nodal values."""
    stepper = _Stepper(op, cfg, grid)
    return stepper.apply(np.eye(grid.size), t_next)


def build_propagator(op, cfg, grid, s, t, method="auto"):
    """Assemble the propagator matrix of the run from s to t.

    method: "auto" | "sequential" | "power".  The power method raises
    one dense per-step matrix to the step count by repeated squaring;
    it requires time-independent coefficients and is the only practical
    route when dt is very small.
    """
    if t == s:
        matrix = np.eye(grid.size)
        return Propagator(grid, s, t, cfg.bc, cfg.dt, matrix,
                          op.declared_c0)
    run_op, c0 = shifted_nonnegative(op)
    steps = _n_steps(s, t, cfg.dt)
    stepper = _Stepper(run_op, cfg, grid)
    if method == "auto":
        method = ("power"
                  if stepper.autonomous and steps >= _POWER_MIN_STEPS
                  and grid.size <= _POWER_MAX_SIZE else "sequential")
    if method == "power":
        if not stepper.autonomous:
            raise KernelError("power method needs time-independent "
                              "coefficients")
        S = _dense_step_matrix(run_op, cfg, grid, s + cfg.dt)
        matrix = np.linalg.matrix_power(S, steps)
    elif method == "sequential":
        matrix = np.eye(grid.size)
        for k in range(steps):
            matrix = stepper.apply(matrix, s + (k + 1) * cfg.dt)
    else:
        raise ValueError(f"unknown method {method!r}")
    if c0 < 0:
        matrix = matrix * math.exp(-c0 * (t - s))
    prop = Propagator(grid, s, t, cfg.bc, cfg.dt, matrix, op.declared_c0)
    _validate(prop)
    return prop


def mass(prop, x):
    """Total kernel mass from source point x (row sum)."""
    return float(prop.matrix[prop.node_index(x)].sum())


def _outside(prop, R, norm):
    pts = prop.grid.nodes()
    if norm == "euclid":
        rad = np.linalg.norm(pts, axis=1)
    elif norm == "box":
        rad = np.max(np.abs(pts), axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return rad > R


def tail_mass(prop, x, R, norm="euclid"):
    """Kernel mass outside the ball (or box) of radius R."""
    out = _outside(prop, R, norm)
    return float(prop.matrix[prop.node_index(x)][out].sum())


def tightness_profile(prop, window, R_list, norm="euclid"):
    """sup over source points with |x|_inf <= window of the tail mass,
    for each radius in R_list.  Non-increasing in R by construction."""
    rows = prop.matrix[prop.grid.window_mask(window)]
    profile = []
    for R in R_list:
        out = _outside(prop, R, norm)
        profile.append(float(rows[:, out].sum(axis=1).max())
                       if out.any() else 0.0)
    return {"R": list(R_list), "sup_tail": profile}


def mass_lower_bound_check(prop, window):
    """Minimum kernel mass over the observation window and where it
    is attained."""
    mask = prop.grid.window_mask(window)
    sums = prop.matrix[mask].sum(axis=1)
    k = int(np.argmin(sums))
    return {"min_mass": float(sums[k]),
            "location": tuple(prop.grid.nodes()[mask][k])}


def kernel_row(prop, x):
    """Kernel density g(t,s,x,.) sampled at the grid nodes."""
    return prop.matrix[prop.node_index(x)] / prop.grid.cell_volume


def row_to_csv(prop, x, path):
    dens = kernel_row(prop, x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y{i+1}" for i in range(prop.grid.dim)] + ["density"])
        for p, v in zip(prop.grid.nodes(), dens):
            w.writerow([f"{c:.12g}" for c in p] + [f"{v:.12g}"])


def profile_to_csv(profile, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "sup_tail"])
        for R, v in zip(profile["R"], profile["sup_tail"]):
            w.writerow([f"{R:.12g}", f"{v:.12g}"])
