import dataclasses
import math

import numpy as np
import pytest

from evolab.fkmc import FkConfig
from evolab.harness import (
    REGISTRY, HarnessError, RunContext, check_c0_preservation,
    check_dirichlet_neumann_agree, check_evolution_law, check_fk_crossval,
    check_integral_identity, check_kernel_mass, check_lp_bound,
    check_monotone_dirichlet, check_not_c0, check_slight_bound,
    check_supnorm, check_tightness_family,
)
from evolab.operator import heat_operator
from evolab.solver import Grid
from tests.test_hypotheses import sec62_operator
from tests.test_operator import sec61_operator


def heat_ctx(**kw):
    args = dict(op=heat_operator(1), grid=Grid(1, 8.0, 401), dt=1e-2,
                pairs=[(0.0, 0.5), (0.2, 0.7)], window=2.0)
    args.update(kw)
    return RunContext(**args)


def sec61_ctx(**kw):
    args = dict(op=sec61_operator(), grid=Grid(1, 8.0, 401), dt=1e-3,
                pairs=[(0.0, 0.5)], window=2.0)
    args.update(kw)
    return RunContext(**args)


def test_supnorm_heat_contraction():
    out = check_supnorm(heat_ctx())
    assert out.passed
    assert out.measured <= 1.0 + out.tolerance
    assert out.anchor == "stima-sol"


def test_supnorm_decay_with_potential():
    # dt must be small enough that the discrete decay factor
    # (1+c0*dt)^(-steps) sits within 1e-3 of the continuous one
    out = check_supnorm(heat_ctx(op=heat_operator(1, c=1.0), dt=1e-3))
    assert out.passed
    assert out.expected == pytest.approx(math.exp(-0.5))


def test_evolution_law_exact():
    out = check_evolution_law(heat_ctx())
    assert out.passed
    assert out.measured <= 1e-12


def test_integral_identity_heat():
    out = check_integral_identity(heat_ctx())
    assert out.passed
    assert "scale=" in out.notes


def test_integral_identity_degenerate_interval():
    ctx = heat_ctx()
    out = check_integral_identity(ctx, s0=0.0, s1=0.0, t=0.5)
    assert out.measured == 0.0


def test_integral_identity_first_order_in_dt():
    coarse = check_integral_identity(heat_ctx(dt=2e-2))
    fine = check_integral_identity(heat_ctx(dt=1e-2))
    assert coarse.measured / fine.measured >= 1.7


def test_lp_bound_heat_contraction():
    out = check_lp_bound(heat_ctx(), p=2)
    assert out.passed
    assert out.measured <= 1.0
    assert "rate=0" in out.notes


def test_lp_bound_radial_instance():
    ctx = heat_ctx(op=sec62_operator(), dt=1e-3, pairs=[(0.0, 0.5)])
    for p in (1, 2):
        out = check_lp_bound(ctx, p=p)
        assert out.passed, out.to_record()


def test_lp_bound_drift_variant_heat():
    out = check_lp_bound(heat_ctx(), p=2, variant="drift")
    assert out.passed
    assert out.anchor == "stima-norma-op-Lp-bis"


def test_c0_preservation_heat():
    out = check_c0_preservation(heat_ctx())
    assert out.passed
    assert out.measured <= out.expected + out.tolerance


def test_c0_preservation_routes_confining_away():
    with pytest.raises(HarnessError, match="not_c0"):
        check_c0_preservation(sec61_ctx())


def test_not_c0_confining():
    ctx = sec61_ctx(mc=FkConfig(n_paths=20_000, dt_mc=1e-3, seed=11))
    out = check_not_c0(ctx)
    assert out.passed
    assert out.measured >= 0.05
    assert "mc=" in out.notes


def test_not_c0_heat_trivial():
    out = check_not_c0(heat_ctx())
    assert out.passed
    assert out.measured == pytest.approx(1.0, abs=1e-9)


def test_monotone_dirichlet():
    out = check_monotone_dirichlet(sec61_ctx(), n0=4.0, N0=201,
                                   doublings=2)
    assert out.passed
    assert out.measured >= -1e-10


def test_dirichlet_neumann_agree():
    out = check_dirichlet_neumann_agree(sec61_ctx())
    assert out.passed
    assert out.measured <= 2e-3


def test_kernel_mass_confining():
    out = check_kernel_mass(sec61_ctx(), dt=2.5e-6)
    assert out.passed, out.to_record()
    assert out.measured >= 0.05


def test_slight_bound_heat_saturates():
    out = check_slight_bound(heat_ctx())
    assert out.passed
    # the heat run attains the second-moment bound 2d(t-s) up to
    # discretization loss
    assert out.measured == pytest.approx(out.expected, abs=5e-3)


def test_slight_bound_confining_large_slack():
    out = check_slight_bound(sec61_ctx())
    assert out.passed
    assert out.measured < out.expected


def test_slight_bound_rejects_negative_floor():
    op = heat_operator(1, c=-1.0)
    with pytest.raises(HarnessError):
        check_slight_bound(heat_ctx(op=op))


def test_fk_crossval_confining():
    ctx = sec61_ctx(mc=FkConfig(n_paths=20_000, dt_mc=1e-3, seed=3))
    out = check_fk_crossval(ctx)
    assert out.passed, out.to_record()
    assert "unreliable=0" in out.notes


def test_fk_crossval_needs_mc_config():
    with pytest.raises(HarnessError):
        check_fk_crossval(sec61_ctx())


def test_tightness_family_confining():
    out = check_tightness_family(sec61_ctx())
    assert out.passed
    assert out.measured <= 0.05


def test_registry_covers_required_anchors():
    anchors = ";".join(a for _, a in REGISTRY.values())
    for needed in ("stima-sol", "form-fond", "l_bound"):
        assert needed in anchors
    assert len(REGISTRY) == len(set(REGISTRY))


def test_outcomes_deterministic_up_to_runtime():
    a = check_supnorm(heat_ctx())
    b = check_supnorm(heat_ctx())
    strip = lambda o: dataclasses.replace(o, runtime=0.0)
    assert strip(a) == strip(b)
