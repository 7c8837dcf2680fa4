"""Elliptic operators A(t) = sum q_ij D_ij + sum b_j D_j - c with
expression-valued coefficients, plus the two built-in parametric
families used throughout the verification suites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .expr import Expr, Num, Var, evaluate, diff, desugar_r, to_source
from .lattice import SampleLattice, build_lattice

__all__ = [
    "OperatorSpec", "TestFunction", "OperatorError", "FamilyError",
    "ValidationError", "apply_operator", "beta", "div_beta",
    "confining_family", "radial_family", "heat_operator", "ou_operator",
    "validate_sampled", "shifted_nonnegative",
]


class OperatorError(Exception):
    pass


class FamilyError(OperatorError):
    """A parametric-family constraint failed."""


class ValidationError(OperatorError):
    """A sampled operator invariant was falsified."""


def _one_plus_r2(dim):
    s = ex.pow_(Var("x1"), Num(2.0))
    for i in range(2, dim + 1):
        s = ex.add(s, ex.pow_(Var(f"x{i}"), Num(2.0)))
    return ex.add(Num(1.0), s)


@dataclass(frozen=True)
class OperatorSpec:
    """The triple (Q, b, c) with declared analytic constants.

    Q is stored as a full d x d tuple of expressions but is symmetric by
    construction (the off-diagonal entries are the same objects).
    declared_c0 is the analytic lower bound of c and declared_eta0 the
    analytic ellipticity floor; both are config inputs validated by
    sampling, never inferred.  eta_profile, when set, is the pointwise
    ellipticity function eta(t, x) used by the drift-compensation check;
    it defaults to the constant declared_eta0.
    """

    dim: int
    Q: tuple
    b: tuple
    c: Expr
    declared_c0: float
    declared_eta0: float
    time_interval: tuple
    eta_profile: Expr | None = None
    name: str = "custom"

    def q(self, i, j):
        return self.Q[i][j]

    def eval_Q(self, t, coords):
        """Q(t,x) evaluated at coordinate arrays; nested d x d lists."""
        base = np.asarray(coords[0], dtype=float)
        return [[np.broadcast_arrays(
            np.asarray(evaluate(self.Q[i][j], t, coords), dtype=float),
            base)[0]
            for j in range(self.dim)] for i in range(self.dim)]

    def eval_b(self, t, coords):
        base = np.asarray(coords[0], dtype=float)
        return [np.broadcast_arrays(
            np.asarray(evaluate(self.b[j], t, coords), dtype=float), base)[0]
            for j in range(self.dim)]

    def eval_c(self, t, coords):
        base = np.asarray(coords[0], dtype=float)
        return np.broadcast_arrays(
            np.asarray(evaluate(self.c, t, coords), dtype=float), base)[0]

    def describe(self):
        rows = "; ".join(
            ",".join(to_source(self.Q[i][j]) for j in range(self.dim))
            for i in range(self.dim))
        return (f"{self.name}: d={self.dim}, Q=[{rows}], "
                f"b=[{','.join(to_source(e) for e in self.b)}], "
                f"c={to_source(self.c)}, c0={self.declared_c0:g}, "
                f"eta0={self.declared_eta0:g}, "
                f"I=[{self.time_interval[0]:g},{self.time_interval[1]:g}]")


def make_operator(dim, Q_upper, b, c, c0, eta0, interval, eta_profile=None,
                  name="custom"):
    """Assemble an OperatorSpec from the upper triangle of Q.

    Q_upper maps (i, j) with i <= j to an Expr (missing entries are 0).
    """
    rows = []
    for i in range(dim):
        row = []
        for j in range(dim):
            key = (i, j) if i <= j else (j, i)
            row.append(Q_upper.get(key, Num(0.0)))
        rows.append(tuple(row))
    return OperatorSpec(dim=dim, Q=tuple(rows), b=tuple(b), c=c,
                        declared_c0=float(c0), declared_eta0=float(eta0),
                        time_interval=(float(interval[0]), float(interval[1])),
                        eta_profile=eta_profile, name=name)


class TestFunction:
    """A C^2 test function with cached symbolic gradient and Hessian."""

    __test__ = False  # not a pytest class

    def __init__(self, value, dim):
        self.dim = dim
        self.value = value
        flat = desugar_r(value, dim)
        self.grad = [diff(flat, f"x{i+1}") for i in range(dim)]
        self.hess = [[diff(self.grad[i], f"x{j+1}") for j in range(dim)]
                     for i in range(dim)]

    @classmethod
    def from_source(cls, source, dim):
        return cls(ex.parse(source, dim), dim)

    def __call__(self, t, coords):
        return np.asarray(evaluate(self.value, t, coords), dtype=float)

    def gradient(self, t, coords):
        return [np.asarray(evaluate(g, t, coords), dtype=float)
                for g in self.grad]

    def hessian(self, t, coords):
        return [[np.asarray(evaluate(self.hess[i][j], t, coords), dtype=float)
                 for j in range(self.dim)] for i in range(self.dim)]


def apply_operator(op, psi, t, coords):
    """Pointwise (A(t)psi)(x) at coordinate arrays."""
    if not (op.time_interval[0] <= t <= op.time_interval[1]):
        raise OperatorError(f"t={t} outside operator interval")
    d = op.dim
    acc = 0.0
    H = psi.hessian(t, coords)
    for i in range(d):
        for j in range(d):
            acc = acc + np.asarray(evaluate(op.Q[i][j], t, coords)) * H[i][j]
    G = psi.gradient(t, coords)
    for j in range(d):
        acc = acc + np.asarray(evaluate(op.b[j], t, coords)) * G[j]
    acc = acc - np.asarray(evaluate(op.c, t, coords)) * psi(t, coords)
    return np.asarray(acc, dtype=float)


def beta(op):
    """Divergence-corrected drift: beta_i = b_i - sum_j D_j q_ij."""
    out = []
    for i in range(op.dim):
        e = op.b[i]
        for j in range(op.dim):
            e = ex.sub(e, diff(desugar_r(op.Q[i][j], op.dim), f"x{j+1}"))
        out.append(e)
    return out


def div_beta(op):
    """sum_i D_i beta_i as an expression."""
    bs = beta(op)
    e = Num(0.0)
    for i in range(op.dim):
        e = ex.add(e, diff(desugar_r(bs[i], op.dim), f"x{i+1}"))
    return e


def shifted_nonnegative(op):
    """Operator with potential c - c0 (>= 0) when declared_c0 < 0.

    Returns (shifted_op, c0).  The evolution operators differ exactly by
    the factor exp(-c0 (t-s)) at read-out; shifting keeps the implicit
    time-stepping matrix an M-matrix unconditionally.
    """
    c0 = op.declared_c0
    if c0 >= 0:
        return op, 0.0
    shifted = OperatorSpec(
        dim=op.dim, Q=op.Q, b=op.b,
        c=ex.sub(op.c, Num(c0)),
        declared_c0=0.0, declared_eta0=op.declared_eta0,
        time_interval=op.time_interval, eta_profile=op.eta_profile,
        name=op.name + "+shift")
    return shifted, c0


# ---------------------------------------------------------------------------
# sampled validation

def validate_sampled(op, lattice=None, seed=0, n_xi=20, tol=1e-12):
    """Falsification-by-sampling of the declared operator invariants."""
    if lattice is None:
        lattice = build_lattice(op.dim, op.time_interval)
    rng = np.random.default_rng(seed)
    coords = lattice.coords()
    for t in lattice.times:
        qm = op.eval_Q(t, coords)
        cv = op.eval_c(t, coords)
        if np.min(cv) < op.declared_c0 - tol:
            k = int(np.argmin(cv))
            raise ValidationError(
                f"potential below declared_c0 at t={t:g}, "
                f"x={lattice.points[k]}: {cv[k]:g} < {op.declared_c0:g}")
        for _ in range(n_xi):
            xi = rng.normal(size=op.dim)
            xi /= np.linalg.norm(xi)
            quad = 0.0
            for i in range(op.dim):
                for j in range(op.dim):
                    quad = quad + qm[i][j] * xi[i] * xi[j]
            if np.min(quad) < op.declared_eta0 - tol:
                k = int(np.argmin(quad))
                raise ValidationError(
                    f"ellipticity below declared_eta0 at t={t:g}, "
                    f"x={lattice.points[k]}: {quad[k]:g}")
    return True


def _round_down(v, decimals=9):
    return math.floor(v * 10 ** decimals) / 10 ** decimals


# ---------------------------------------------------------------------------
# built-in families

def confining_family(dim, k, m, l, omega, C1, c, b, interval, r_check=10.0):
    """Power-weight Laplacian with strongly confining drift.

    A(t) = omega(t) (1+|x|^2)^k Delta + <b, grad> - c(t,x) (1+|x|^2)^m
    with <b(t,x), x> <= -C1(t) (1+|x|^2)^l outside some ball, l > (m+2) v k.
    omega and C1 are expressions in t, c in (t, x); b is a d-vector of
    expressions.
    """
    if not l > max(m + 2, k):
        raise FamilyError(
            f"need l > max(m+2, k) = {max(m + 2, k)}, got l={l}")
    lat = build_lattice(dim, interval, r_check=r_check)
    omega_t = np.array([evaluate(omega, t, [np.zeros(1)] * dim)
                        for t in lat.times], dtype=float).ravel()
    if omega_t.min() <= 0:
        raise FamilyError("omega must have positive infimum on the interval")

    # radial drift bound, checked by sampling: find a shell radius beyond
    # which <b, x> <= -C1(t) (1+|x|^2)^l holds at every sampled point
    coords = lat.coords()
    radii2 = 1.0 + lat.radii ** 2
    ok_beyond = None
    margins = np.full(len(lat.points), np.inf)
    for t in lat.times:
        bx = sum(np.asarray(evaluate(b[i], t, coords)) * coords[i]
                 for i in range(dim))
        c1 = float(evaluate(C1, t, [np.zeros(1)] * dim))
        margins = np.minimum(margins, -c1 * radii2 ** l - bx)
    for rho in lat.shell_radii:
        if np.all(margins[lat.radii >= rho] >= -1e-12):
            ok_beyond = rho
            break
    if ok_beyond is None:
        raise FamilyError(
            "drift does not satisfy the radial confinement bound on any "
            "sampled outer region")

    w2k = ex.pow_(_one_plus_r2(dim), Num(float(k)))
    q_diag = ex.mul(omega, w2k)
    c_full = ex.mul(c, ex.pow_(_one_plus_r2(dim), Num(float(m))))

    c_min = np.inf
    for t in lat.times:
        cv = np.asarray(evaluate(c_full, t, coords), dtype=float)
        c_min = min(c_min, float(np.min(cv)))
    op = make_operator(
        dim,
        {(i, i): q_diag for i in range(dim)},
        list(b), c_full,
        c0=_round_down(c_min),
        eta0=_round_down(float(omega_t.min())),
        interval=interval,
        eta_profile=q_diag,
        name=f"confining(d={dim},k={k},m={m},l={l})")
    validate_sampled(op, lat)
    return op


def radial_family(dim, m, r, q, Q_upper, b, c, C_J, interval,
                  require_decay_exponent=False, r_check=10.0):
    """Power-weight trace diffusion with radial drift.

    A(t) = (1+|x|^2)^m Tr(Q(t,x) D^2) + (1+|x|^2)^r b(t) <x, grad> - c(t,x)
    with b(t) <= 0, bounded Q, and c >= C_J (1+|x|^2)^q.
    require_decay_exponent additionally enforces q > max(r, m-1, 1),
    which the C0/Lp suites rely on.
    """
    lat = build_lattice(dim, interval, r_check=r_check)
    coords = lat.coords()
    zeros = [np.zeros(1)] * dim
    b_t = np.array([evaluate(b, t, zeros) for t in lat.times],
                   dtype=float).ravel()
    if b_t.max() > 0:
        raise FamilyError("clause (i) failed: b(t) <= 0 is violated")
    case_a = (r > m - 1) and (b_t.max() < 0)
    case_b = (q > m - 1) and (C_J > 0)
    if not (case_a or case_b):
        raise FamilyError(
            "neither clause (iv-a) [r > m-1 and b(t) < 0] nor clause "
            "(iv-b) [q > m-1 and C_J > 0] holds")
    if require_decay_exponent and not q > max(r, m - 1, 1):
        raise FamilyError(
            f"clause (v) failed: need q > max(r, m-1, 1) = {max(r, m - 1, 1)}")

    radii2 = 1.0 + lat.radii ** 2
    for t in lat.times:
        cv = np.asarray(evaluate(c, t, coords), dtype=float)
        if np.min(cv - C_J * radii2 ** q) < -1e-12:
            raise FamilyError(
                f"clause (ii) failed: c < C_J (1+|x|^2)^q at t={t:g}")

    w2m = ex.pow_(_one_plus_r2(dim), Num(float(m)))
    w2r = ex.pow_(_one_plus_r2(dim), Num(float(r)))
    Q_full = {}
    for (i, j), e in Q_upper.items():
        Q_full[(i, j)] = ex.mul(w2m, e)
    drift = [ex.mul(ex.mul(w2r, b), Var(f"x{i+1}")) for i in range(dim)]

    # ellipticity floor of the unweighted Q via sampled min eigenvalue
    eta0 = np.inf
    for t in lat.times:
        mats = [[np.broadcast_arrays(
            np.asarray(evaluate(Q_upper.get((min(i, j), max(i, j)), Num(0.0)),
                                t, coords), dtype=float), coords[0])[0]
            for j in range(dim)] for i in range(dim)]
        if dim == 1:
            eta0 = min(eta0, float(np.min(mats[0][0])))
        else:
            a, bq, dq = mats[0][0], mats[0][1], mats[1][1]
            lam = 0.5 * ((a + dq) - np.sqrt((a - dq) ** 2 + 4 * bq ** 2))
            eta0 = min(eta0, float(np.min(lam)))
    if eta0 <= 0:
        raise FamilyError("clause (iii) failed: Q is not uniformly elliptic")

    c_min = np.inf
    for t in lat.times:
        cv = np.asarray(evaluate(c, t, coords), dtype=float)
        c_min = min(c_min, float(np.min(cv)))

    op = make_operator(
        dim, Q_full, drift, c,
        c0=_round_down(c_min),
        eta0=_round_down(eta0),
        interval=interval,
        eta_profile=ex.mul(Num(_round_down(eta0)), w2m),
        name=f"radial(d={dim},m={m},r={r},q={q})")
    validate_sampled(op, lat)
    return op


# ---------------------------------------------------------------------------
# convenience operators for golden runs

def heat_operator(dim=1, c=0.0, interval=(0.0, 10.0)):
    """Q = I, b = 0, constant potential c."""
    return make_operator(
        dim, {(i, i): Num(1.0) for i in range(dim)},
        [Num(0.0)] * dim, Num(float(c)),
        c0=float(c), eta0=1.0, interval=interval,
        name=f"heat(d={dim},c={c:g})")


def ou_operator(interval=(0.0, 10.0)):
    """1D Ornstein-Uhlenbeck-type operator: D^2 - x D."""
    return make_operator(
        1, {(0, 0): Num(1.0)},
        [ex.Unary("neg", Var("x1"))], Num(0.0),
        c0=0.0, eta0=1.0, interval=interval, name="ou")
