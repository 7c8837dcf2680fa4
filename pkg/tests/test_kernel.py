import math

import numpy as np
import pytest
from scipy.special import erfc

from evolab.kernel import (
    KernelError, build_propagator, kernel_row, mass, mass_lower_bound_check,
    tail_mass, tightness_profile,
)
from evolab.operator import heat_operator
from evolab.solver import Grid, SolveConfig, solve
from tests.test_operator import sec61_operator


def normal_tail(z):
    """P(N(0,1) > z)."""
    return 0.5 * erfc(z / math.sqrt(2))


@pytest.fixture(scope="module")
def heat_prop():
    op = heat_operator(1)
    grid = Grid(1, 8.0, 801)
    cfg = SolveConfig(bc="dirichlet", dt=1e-3)
    return build_propagator(op, cfg, grid, 0.0, 0.5)


def test_identity_at_equal_times():
    op = heat_operator(1)
    grid = Grid(1, 2.0, 21)
    prop = build_propagator(op, SolveConfig(bc="dirichlet", dt=1e-2),
                            grid, 0.3, 0.3)
    assert np.array_equal(prop.matrix, np.eye(grid.size))


def test_heat_row_close_to_gaussian(heat_prop):
    # kernel from x=0 after time 0.5 is N(0, 2*0.5): compare the
    # normalized row with the discretized Gaussian in total variation
    grid = heat_prop.grid
    row = heat_prop.matrix[heat_prop.node_index(0.0)]
    y = grid.axis()
    gauss = np.exp(-y ** 2 / 2) / math.sqrt(2 * math.pi) * grid.dx
    tv = 0.5 * np.sum(np.abs(row / row.sum() - gauss / gauss.sum()))
    assert tv <= 2e-3


def test_apply_matches_solve(heat_prop):
    op = heat_operator(1)
    grid = heat_prop.grid
    cfg = SolveConfig(bc="dirichlet", dt=1e-3)
    f = np.exp(-grid.axis() ** 2)
    direct = solve(op, cfg, grid, f, 0.0, 0.5)
    assert np.max(np.abs(heat_prop.apply(f) - direct.values)) <= 1e-12


def test_chapman_kolmogorov(heat_prop):
    op = heat_operator(1)
    grid = heat_prop.grid
    cfg = SolveConfig(bc="dirichlet", dt=1e-3)
    first = build_propagator(op, cfg, grid, 0.0, 0.2)
    second = build_propagator(op, cfg, grid, 0.2, 0.5)
    composed = second.matrix @ first.matrix
    assert np.max(np.abs(composed - heat_prop.matrix)) <= 1e-12


def test_power_and_sequential_agree():
    op = sec61_operator()
    grid = Grid(1, 6.0, 121)
    cfg = SolveConfig(bc="dirichlet", dt=1e-2)
    a = build_propagator(op, cfg, grid, 0.0, 0.5, method="power")
    b = build_propagator(op, cfg, grid, 0.0, 0.5, method="sequential")
    assert np.max(np.abs(a.matrix - b.matrix)) <= 1e-13


def test_mass_constant_potential_neumann():
    op = heat_operator(1, c=1.0)
    grid = Grid(1, 4.0, 81)
    cfg = SolveConfig(bc="neumann", dt=1e-2)
    prop = build_propagator(op, cfg, grid, 0.0, 0.5)
    expected = (1 + 1e-2) ** -50
    for x in (-2.0, 0.0, 1.5):
        assert mass(prop, x) == pytest.approx(expected, abs=1e-12)


def test_mass_conserved_without_potential():
    op = heat_operator(1)
    grid = Grid(1, 4.0, 81)
    prop = build_propagator(op, SolveConfig(bc="neumann", dt=1e-2),
                            grid, 0.0, 0.5)
    assert mass(prop, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_dirichlet_mass_strictly_submarkov(heat_prop):
    assert mass(heat_prop, 0.0) < 1.0


def test_tail_mass_gaussian_oracle(heat_prop):
    # kernel std = 1, so the mass beyond R=5 is 2 * normal_tail(5)
    got = tail_mass(heat_prop, 0.0, 5.0)
    assert got == pytest.approx(2 * normal_tail(5.0), abs=1e-7)


def test_tail_mass_outside_box_is_zero(heat_prop):
    assert tail_mass(heat_prop, 0.0, heat_prop.grid.n) == 0.0


def test_tail_mass_partition(heat_prop):
    origin = heat_prop.node_index(0.0)
    origin_entry = heat_prop.matrix[origin, origin]
    got = tail_mass(heat_prop, 0.0, 0.0)
    assert got == pytest.approx(mass(heat_prop, 0.0) - origin_entry,
                                abs=1e-14)


def test_tightness_profile_monotone(heat_prop):
    prof = tightness_profile(heat_prop, 2.0, [1.0, 2.0, 3.0, 5.0, 8.0])
    tails = prof["sup_tail"]
    assert all(a >= b for a, b in zip(tails, tails[1:]))
    assert tails[-1] == 0.0
    # sup over |x| <= 2 of the Gaussian tail beyond R=5 is attained at
    # the window edge: P(|x + N(0,1)| > 5)
    expected = normal_tail(3.0) + normal_tail(7.0)
    assert tails[-2] == pytest.approx(expected, abs=5e-5)


def test_mass_lower_bound_neumann_no_potential():
    op = heat_operator(1)
    grid = Grid(1, 4.0, 81)
    prop = build_propagator(op, SolveConfig(bc="neumann", dt=1e-2),
                            grid, 0.0, 0.5)
    out = mass_lower_bound_check(prop, 2.0)
    assert out["min_mass"] == pytest.approx(1.0, abs=1e-12)


def test_mass_lower_bound_small_box_absorbs():
    # heat run in a unit box over a full time unit loses most mass
    op = heat_operator(1)
    grid = Grid(1, 1.0, 41)
    prop = build_propagator(op, SolveConfig(bc="dirichlet", dt=1e-2),
                            grid, 0.0, 1.0)
    out = mass_lower_bound_check(prop, 1.0)
    assert out["min_mass"] < 0.5


def test_row_sum_bound_enforced():
    op = sec61_operator()
    grid = Grid(1, 6.0, 121)
    cfg = SolveConfig(bc="dirichlet", dt=1e-2)
    prop = build_propagator(op, cfg, grid, 0.0, 0.5)
    sums = prop.matrix.sum(axis=1)
    assert sums.max() <= prop.row_sum_bound() + 1e-6
    assert prop.matrix.min() >= -1e-14


def test_kernel_row_integrates_to_mass(heat_prop):
    dens = kernel_row(heat_prop, 1.0)
    assert dens.sum() * heat_prop.grid.cell_volume == pytest.approx(
        mass(heat_prop, 1.0), abs=1e-12)


def test_node_lookup_rejects_off_grid(heat_prop):
    with pytest.raises(KernelError):
        heat_prop.node_index(0.013)
