import dataclasses
import math

import numpy as np
import pytest

from evolab.compactness import (
    CompactnessError, HFunction, PrerequisiteError, compactness_diagnostic,
    solve_comparison, uniform_bound, ybar,
)
from evolab.expr import Num
from evolab.kernel import build_propagator
from evolab.operator import TestFunction, heat_operator
from evolab.solver import Grid, SolveConfig
from tests.test_operator import sec61_operator

PHI = TestFunction.from_source("1+x1^2", 1)
W_FN = TestFunction.from_source("1+1/(1+x1^2)", 1)
H_SQ = HFunction(gamma=1.0, C_prime=0.0, l=2)


def test_hfunction_root():
    h = HFunction(gamma=2.0, C_prime=16.0, l=3)
    assert h.x_h == pytest.approx(2.0)
    assert h(h.x_h) == pytest.approx(0.0)
    assert H_SQ.x_h == 0.0


def test_hfunction_validation():
    with pytest.raises(CompactnessError):
        HFunction(gamma=-1.0, C_prime=0.0, l=2)
    with pytest.raises(CompactnessError):
        HFunction(gamma=1.0, C_prime=0.0, l=1)


def test_comparison_separable_closed_form():
    # y' = -y^2, y(0) = 2  =>  y(r) = 2 / (1 + 2r)
    out = solve_comparison(H_SQ, C=1.0, y0=2.0, horizon=1.0)
    exact = 2.0 / (1.0 + 2.0 * out["r"])
    assert np.max(np.abs(out["y"] - exact)) <= 1e-9
    assert out["y"][-1] == pytest.approx(2.0 / 3.0, abs=1e-9)


def test_comparison_equilibrium():
    h = HFunction(gamma=1.0, C_prime=1.0, l=2)
    out = solve_comparison(h, C=1.0, y0=h.x_h, horizon=2.0)
    assert np.max(np.abs(out["y"] - h.x_h)) <= 1e-10


def test_comparison_time_change():
    slow = solve_comparison(H_SQ, C=1.0, y0=3.0, horizon=2.0, n_samples=101)
    fast = solve_comparison(H_SQ, C=2.0, y0=3.0, horizon=1.0, n_samples=101)
    # y_{2C}(r) = y_C(2r): the sample grids line up two-to-one
    assert np.max(np.abs(fast["y"] - slow["y"])) <= 1e-9


def test_comparison_monotone_above_root():
    h = HFunction(gamma=1.0, C_prime=8.0, l=3)
    out = solve_comparison(h, C=0.5, y0=10.0, horizon=1.0)
    assert np.all(np.diff(out["y"]) < 0)
    assert out["y"][-1] >= h.x_h - 1e-9


def test_comparison_below_root_stays_below():
    h = HFunction(gamma=1.0, C_prime=8.0, l=3)
    out = solve_comparison(h, C=1.0, y0=1.0, horizon=3.0)
    assert np.max(out["y"]) <= h.x_h + 1e-9


def test_uniform_bound_closed_form():
    # integral_M^inf z^-2 dz = 1/M = C*delta
    assert uniform_bound(H_SQ, C=1.0, delta=0.5) == pytest.approx(2.0,
                                                                  abs=1e-8)
    assert uniform_bound(H_SQ, C=2.0, delta=0.25) == pytest.approx(2.0,
                                                                   abs=1e-8)


def test_uniform_bound_monotone_in_delta():
    ms = [uniform_bound(H_SQ, 1.0, d) for d in (0.1, 0.2, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(ms, ms[1:]))


def test_trajectory_dominated_by_uniform_bound():
    h = HFunction(gamma=0.7, C_prime=3.0, l=3)
    C, delta = 0.4, 0.3
    bound = ybar(h, C, delta)
    rng = np.random.default_rng(21)
    for y0 in rng.uniform(h.x_h + 0.1, 100.0, 20):
        out = solve_comparison(h, C, float(y0), horizon=delta)
        assert out["y"][-1] <= bound + 1e-8


@pytest.fixture(scope="module")
def sec61_prop():
    op = sec61_operator()
    grid = Grid(1, 8.0, 401)
    cfg = SolveConfig(bc="dirichlet", dt=1e-3)
    return op, build_propagator(op, cfg, grid, 0.0, 0.5)


def test_diagnostic_confining_instance(sec61_prop):
    op, prop = sec61_prop
    diag = compactness_diagnostic(op, PHI, W_FN, mu=0.0, R_W=2.0,
                                  prop=prop, window=2.0,
                                  R_list=[2.0, 3.0, 4.0, 5.0], delta=0.1)
    assert diag["verdict"] == "consistent-with-compactness"
    assert all(m <= b + 1e-6
               for m, b in zip(diag["measured_tail"], diag["bound"]))
    # literal inequality from the bound chain: tail <= sup G phi / inf phi
    assert all(m <= b + 1e-6
               for m, b in zip(diag["measured_tail"],
                               diag["proof_chain_bound"]))
    assert diag["C_source"] == "measured-min-mass"
    assert diag["C"] > 0.05


def test_diagnostic_refuses_heat():
    op = heat_operator(1)
    grid = Grid(1, 8.0, 201)
    prop = build_propagator(op, SolveConfig(bc="dirichlet", dt=1e-2),
                            grid, 0.0, 0.5)
    with pytest.raises(PrerequisiteError, match="comparison-h"):
        compactness_diagnostic(op, PHI, W_FN, mu=0.0, R_W=2.0, prop=prop,
                               window=2.0, R_list=[3.0], delta=0.1)


def test_negative_floor_rescaling_identity():
    # shifting the potential down by kappa multiplies the propagator by
    # exp(kappa (t-s)) exactly (the solver runs the same linear algebra)
    op = sec61_operator()
    low = dataclasses.replace(op, c=Num(-1.0), declared_c0=-1.0)
    floor0 = dataclasses.replace(op, c=Num(0.0), declared_c0=0.0)
    grid = Grid(1, 6.0, 121)
    cfg = SolveConfig(bc="dirichlet", dt=1e-2)
    base = build_propagator(floor0, cfg, grid, 0.0, 0.5)
    shifted = build_propagator(low, cfg, grid, 0.0, 0.5)
    np.testing.assert_allclose(shifted.matrix,
                               base.matrix * math.exp(1.0 * 0.5),
                               rtol=0, atol=1e-12)


def test_diagnostic_handles_negative_floor(sec61_prop):
    op, _ = sec61_prop
    low = dataclasses.replace(op, c=Num(-1.0), declared_c0=-1.0)
    grid = Grid(1, 8.0, 401)
    cfg = SolveConfig(bc="dirichlet", dt=1e-3)
    prop = build_propagator(low, cfg, grid, 0.0, 0.5)
    diag = compactness_diagnostic(low, PHI, W_FN, mu=0.0, R_W=2.0,
                                  prop=prop, window=2.0,
                                  R_list=[2.0, 3.0, 4.0, 5.0], delta=0.1)
    assert diag["rescaled_negative_floor"]
    assert diag["verdict"] == "consistent-with-compactness"
