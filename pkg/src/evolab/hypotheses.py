"""Falsification-by-sampling checks for the structural conditions the
evolution-operator theory needs: Lyapunov bounds, mass lower-bound
conditions, comparison-function domination, divergence/potential bounds
for L^p invariance, and decay conditions for C0 preservation.

A pass never proves an inequality; it reports "consistent on lattice"
for the deterministic sampling lattice recorded in the report.  Fitted
constants are lattice extrema, so substituting them back always puts
the worst margin at exactly zero.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .expr import Num, evaluate
from .lattice import build_lattice
from .operator import apply_operator, beta, div_beta

__all__ = [
    "ConditionReport", "HypothesisError", "check_lyapunov",
    "check_lyapunov_minus_c", "check_W", "check_h", "check_div",
    "check_drift_compensation", "check_V", "check_bounded_Aphi",
]

MARGIN_TOL = -1e-9


class HypothesisError(Exception):
    pass


@dataclass(frozen=True)
class ConditionReport:
    condition: str
    interval: tuple
    passed: bool
    constants: dict
    worst_margin: float
    worst_point: tuple      # (t, x-tuple)
    lattice: str
    notes: str = ""

    def to_record(self):
        consts = ",".join(f"{k}={v:.12g}" for k, v in self.constants.items())
        t, x = self.worst_point
        xs = ",".join(f"{c:.6g}" for c in x)
        line = (f"condition={self.condition}|interval=[{self.interval[0]:g},"
                f"{self.interval[1]:g}]|pass={self.passed}"
                f"|margin={self.worst_margin:.12g}|constants={consts}"
                f"|worst=(t={t:.6g};x={xs})|{self.lattice}")
        if self.notes:
            line += f"|notes={self.notes}"
        return line


def _field_over_lattice(op, psi, lattice):
    """A(t)psi sampled on the lattice, shape (n_t, n_p)."""
    coords = lattice.coords()
    return np.stack([np.broadcast_to(
        np.asarray(apply_operator(op, psi, t, coords), dtype=float),
        (len(lattice.points),)) for t in lattice.times])


def _values_over_lattice(psi, lattice):
    coords = lattice.coords()
    return np.stack([np.broadcast_to(
        np.asarray(psi(t, coords), dtype=float), (len(lattice.points),))
        for t in lattice.times])


def _shell_masks(lattice):
    return [np.isclose(lattice.radii, rho) for rho in lattice.shell_radii]


def _shell_max(lattice, values):
    """Max over (time, shell) of a lattice field, per shell radius."""
    return np.array([values[:, m].max() for m in _shell_masks(lattice)])


def _diverges(shell_values):
    """Heuristic divergence detector: the extremum sits in the last
    quarter of the shells and clearly exceeds the previous quarter's
    level (robust to oscillating coefficients)."""
    v = np.asarray(shell_values, dtype=float)
    half = v[len(v) // 2:]
    cut = len(half) // 2
    q3, q4 = half[:cut].max(), half[cut:].max()
    in_last_quarter = np.argmax(v) >= len(v) - cut
    return bool(in_last_quarter and q4 - q3 > 0.1 * (abs(q3) + 1.0))


def _worst(lattice, margins):
    it, ip = np.unravel_index(np.argmin(margins), margins.shape)
    return float(margins[it, ip]), (float(lattice.times[it]),
                                    tuple(lattice.points[ip]))


def _require_positive(name, values):
    if values.min() <= 0:
        raise HypothesisError(f"{name} must be positive on the lattice "
                              f"(min {values.min():.3e})")


def _require_blowup(name, lattice, values):
    """phi -> +infinity probed as growth of shell minima on the outer
    half of the lattice."""
    mins = np.array([values[:, m].min() for m in _shell_masks(lattice)])
    outer = mins[lattice.shell_radii >= lattice.r_check]
    if not np.all(np.diff(outer) > 0):
        raise HypothesisError(f"{name} does not grow along outer shells")


def _require_bounded_decay(name, lattice, values, strict=False):
    maxima = np.array([values[:, m].max() for m in _shell_masks(lattice)])
    outer = maxima[lattice.shell_radii >= lattice.r_check / 2]
    diffs = np.diff(outer)
    ok = np.all(diffs < 0) if strict else np.all(diffs <= 1e-12)
    if not ok:
        raise HypothesisError(f"{name} shell maxima are not "
                              f"{'decreasing' if strict else 'bounded'}")


def check_lyapunov(op, phi, J, lattice=None):
    """Fit the smallest lambda with A(t)phi <= lambda*phi on the
    lattice; fails when the ratio keeps growing with |x|."""
    lattice = lattice or build_lattice(op.dim, J)
    pv = _values_over_lattice(phi, lattice)
    _require_positive("phi", pv)
    _require_blowup("phi", lattice, pv)
    av = _field_over_lattice(op, phi, lattice)
    ratio = av / pv
    lam = float(ratio.max())
    margins = lam * pv - av
    worst_margin, worst_point = _worst(lattice, margins)
    passed = not _diverges(_shell_max(lattice, ratio))
    return ConditionReport("lyapunov", J, passed, {"lambda": lam},
                           worst_margin, worst_point, lattice.describe())


def check_lyapunov_minus_c(op, phi, J, lattice=None):
    """Same fit for the zero-potential part A(t) + c(t,.)."""
    op0 = dataclasses.replace(op, c=Num(0.0), declared_c0=0.0)
    rep = check_lyapunov(op0, phi, J, lattice)
    return dataclasses.replace(rep, condition="lyapunov-minus-c")


def check_W(op, W, mu, R, J, lattice=None):
    """A(t)W - mu*W >= 0 outside the ball of radius R, for a bounded
    W with positive infimum there (mass lower-bound condition)."""
    lattice = lattice or build_lattice(op.dim, J)
    wv = _values_over_lattice(W, lattice)
    far = lattice.radii >= R
    if not far.any():
        raise HypothesisError(f"R={R:g} leaves no lattice points")
    if wv[:, far].min() <= 0:
        raise HypothesisError("W has no positive infimum outside R")
    _require_bounded_decay("W", lattice, wv)
    av = _field_over_lattice(op, W, lattice)
    margins = (av - mu * wv)[:, far]
    it, ip = np.unravel_index(np.argmin(margins), margins.shape)
    worst_margin = float(margins[it, ip])
    worst_point = (float(lattice.times[it]),
                   tuple(lattice.points[far][ip]))
    return ConditionReport("mass-lower-bound-W", J,
                           worst_margin >= MARGIN_TOL,
                           {"mu": mu, "R": R}, worst_margin, worst_point,
                           lattice.describe())


def check_h(op, phi, J, h_form=None, l=None, lattice=None):
    """A(t)phi <= -h(phi) with h(z) = gamma z^l - C'.

    Either verify a given h_form = {gamma, C_prime, l} or auto-fit:
    gamma = 0.9 * worst outer-shell ratio (-A phi)/phi^l, then the
    smallest nonnegative C' making the margin vanish.
    """
    lattice = lattice or build_lattice(op.dim, J)
    pv = _values_over_lattice(phi, lattice)
    _require_positive("phi", pv)
    av = _field_over_lattice(op, phi, lattice)
    if h_form is not None:
        gamma, c_prime, l = (h_form["gamma"], h_form["C_prime"],
                             h_form["l"])
        if gamma <= 0 or l < 2 or l != int(l):
            raise HypothesisError("need gamma > 0 and integer l >= 2")
        fitted = False
    else:
        if l is None or l < 2:
            raise HypothesisError("auto-fit needs an integer l >= 2")
        outer = lattice.radii >= lattice.r_check / 2
        gamma = 0.9 * float((-av[:, outer] / pv[:, outer] ** l).min())
        if gamma <= 0:
            return ConditionReport(
                "comparison-h", J, False,
                {"gamma": gamma, "C_prime": math.nan, "l": l},
                -math.inf, (float(lattice.times[0]), tuple(lattice.points[0])),
                lattice.describe(), notes="A(t)phi not eventually negative")
        c_prime = max(0.0, float((av + gamma * pv ** l).max()))
        fitted = True
    margins = -(gamma * pv ** l - c_prime) - av
    worst_margin, worst_point = _worst(lattice, margins)
    return ConditionReport(
        "comparison-h", J, worst_margin >= MARGIN_TOL,
        {"gamma": gamma, "C_prime": c_prime, "l": l},
        worst_margin, worst_point, lattice.describe(),
        notes="auto-fit" if fitted else "")


def check_div(op, J, p, lattice=None):
    """c + div(beta) >= -K; reports K and the induced L^p growth rate
    K_p with p*K_p = K - (p-1)*c0."""
    if p < 1:
        raise HypothesisError("p must be >= 1")
    lattice = lattice or build_lattice(op.dim, J)
    coords = lattice.coords()
    db = div_beta(op)
    vals = np.stack([np.broadcast_to(np.asarray(
        evaluate(db, t, coords) + evaluate(op.c, t, coords), dtype=float),
        (len(lattice.points),)) for t in lattice.times])
    K = max(0.0, -float(vals.min()))
    K_p = (K - (p - 1) * op.declared_c0) / p
    margins = vals + K
    worst_margin, worst_point = _worst(lattice, margins)
    passed = not _diverges(_shell_max(lattice, -vals))
    return ConditionReport("divergence-bound", J, passed,
                           {"K": K, "K_p": K_p, "p": p},
                           worst_margin, worst_point, lattice.describe())


def check_drift_compensation(op, J, p, lattice=None):
    """|beta|^2 / (4 (p-1) eta) - c <= K'_p with eta the declared
    ellipticity profile; the potential must dominate the drift."""
    if p <= 1:
        raise HypothesisError("p must be > 1")
    lattice = lattice or build_lattice(op.dim, J)
    coords = lattice.coords()
    bs = beta(op)
    eta_expr = op.eta_profile if op.eta_profile is not None \
        else Num(op.declared_eta0)
    n_p = len(lattice.points)
    rows = []
    for t in lattice.times:
        b2 = sum(np.broadcast_to(
            np.asarray(evaluate(bi, t, coords), dtype=float), (n_p,)) ** 2
            for bi in bs)
        eta = np.broadcast_to(
            np.asarray(evaluate(eta_expr, t, coords), dtype=float), (n_p,))
        if eta.min() <= 0:
            raise HypothesisError("ellipticity profile not positive")
        cv = np.broadcast_to(
            np.asarray(evaluate(op.c, t, coords), dtype=float), (n_p,))
        rows.append(b2 / (4 * (p - 1) * eta) - cv)
    vals = np.stack(rows)
    K_p_prime = float(vals.max())
    margins = K_p_prime - vals
    worst_margin, worst_point = _worst(lattice, margins)
    passed = not _diverges(_shell_max(lattice, vals))
    return ConditionReport("drift-compensation", J, passed,
                           {"Kp_prime": K_p_prime, "p": p},
                           worst_margin, worst_point, lattice.describe())


def check_V(op, V, J, lam0=None, lattice=None):
    """lambda0 V - A(t)V >= 0 for a positive V vanishing at infinity
    (C0-preservation barrier); lambda0 auto-fitted when omitted."""
    lattice = lattice or build_lattice(op.dim, J)
    vv = _values_over_lattice(V, lattice)
    _require_positive("V", vv)
    _require_bounded_decay("V", lattice, vv, strict=True)
    av = _field_over_lattice(op, V, lattice)
    fitted = lam0 is None
    if fitted:
        lam0 = max(0.0, float((av / vv).max()))
    margins = lam0 * vv - av
    worst_margin, worst_point = _worst(lattice, margins)
    # a fitted lambda0 that keeps growing with |x| is vacuous: the
    # barrier only works when A(t)V/V is bounded above
    passed = (worst_margin >= MARGIN_TOL
              and not _diverges(_shell_max(lattice, av / vv)))
    return ConditionReport("decay-barrier-V", J, passed,
                           {"lambda0": lam0}, worst_margin, worst_point,
                           lattice.describe(),
                           notes="auto-fit" if fitted else "")


def check_bounded_Aphi(op, phi, J, lattice=None):
    """A(t)phi <= M_J uniformly; fails when the shell maxima of
    A(t)phi keep growing."""
    lattice = lattice or build_lattice(op.dim, J)
    av = _field_over_lattice(op, phi, lattice)
    M_J = float(av.max())
    margins = M_J - av
    worst_margin, worst_point = _worst(lattice, margins)
    passed = not _diverges(_shell_max(lattice, av))
    return ConditionReport("bounded-Aphi", J, passed, {"M_J": M_J},
                           worst_margin, worst_point, lattice.describe())
