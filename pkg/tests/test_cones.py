import math

import numpy as np
import pytest

from sectflow.cones import (ConeParams, cone_coordinate_bounds_check, cone_invariance_report, cone_membership,
                            estimate_splitting, one_step_backward_bound_check, sectional_expansion_check,
                            splitting_series, unit_area_expansion)
from sectflow.errors import ConfigurationError, SplittingEstimationError
from sectflow.flow import integrate_orbit, linear_saddle, suspension_shift, tangent_flow
from sectflow.poincare import normal_cocycle, unit_cocycles


@pytest.fixture(scope="module")
def saddle_cocycle():
    spec = linear_saddle((-2.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    seg = integrate_orbit(spec, (0.0, 0.0, 0.0), 24.0)
    return normal_cocycle(spec, tangent_flow(spec, seg), stride=200)


def test_saddle_splitting_is_exact(saddle_cocycle):
    fr = estimate_splitting(saddle_cocycle, window=8)
    assert abs(abs(fr.E[0, 0]) - 1) < 1e-8 and abs(abs(fr.F[1, 0]) - 1) < 1e-8
    assert fr.residual < 1e-8
    assert fr.transversality == pytest.approx(math.pi / 2, abs=1e-8)


def test_zero_window_is_rejected(saddle_cocycle):
    with pytest.raises(SplittingEstimationError):
        estimate_splitting(saddle_cocycle, window=0)
    with pytest.raises(SplittingEstimationError):
        estimate_splitting(saddle_cocycle, window=100)


def test_lorenz_splitting_converges(lorenz, lorenz_points):
    coc = unit_cocycles(lorenz, lorenz_points[:50], 20)
    _, _, res, _ = splitting_series(coc, 8, 1, [10])
    assert np.quantile(res, 0.9) < 1e-3


def test_cone_membership_conventions(saddle_cocycle):
    fr = estimate_splitting(saddle_cocycle, window=8)
    f, e = fr.F[:, 0], fr.E[:, 0]
    for a in (1e-3, 0.1, 0.9):
        assert cone_membership(3 * f, fr, a)
        assert not cone_membership(e, fr, a)
        assert cone_membership(f + a * e, fr, a)
        assert not cone_membership(f + 1.01 * a * e, fr, a)


def test_cone_params_validate():
    with pytest.raises(ConfigurationError):
        ConeParams(0.0)
    with pytest.raises(ConfigurationError):
        ConeParams(0.1, "G")


def test_saddle_cone_contraction(saddle_cocycle):
    idx = np.arange(10, 14)
    E, F, _, _ = splitting_series(saddle_cocycle, 8, 1, idx)
    rep = cone_invariance_report(saddle_cocycle, E, F, 0.1, idx)
    assert rep.all_inside
    assert np.allclose(rep.theta, math.exp(-3), rtol=1e-6)


def test_cone_report_flags_without_erroring():
    # expansion along E beats F: the cone image leaves the cone, reported as theta > 1
    spec = linear_saddle((1.0, -2.0, 0.0), (0.0, 0.0, 1.0))
    seg = integrate_orbit(spec, (0.0, 0.0, 0.0), 6.0)
    coc = normal_cocycle(spec, tangent_flow(spec, seg), stride=200)
    idx = np.array([2, 3])
    E = np.tile(np.array([[1.0], [0.0]]), (2, 1, 1))
    F = np.tile(np.array([[0.0], [1.0]]), (2, 1, 1))
    rep = cone_invariance_report(coc, E, F, 0.1, idx)
    assert not rep.all_inside and rep.theta[0] == pytest.approx(math.exp(3), rel=1e-6)


def test_sectional_expansion_examples():
    spec = linear_saddle((1.0, 2.0, -1.0))
    seg = integrate_orbit(spec, (1.0, 1.0, 1.0), 1.0)
    g = sectional_expansion_check(tangent_flow(spec, seg), np.eye(3)[:, :2])
    assert np.prod(g) == pytest.approx(math.exp(3), rel=1e-8)
    flat = suspension_shift()
    seg = integrate_orbit(flat, (0.0, 0.0, 0.0), 0.5)
    assert np.allclose(sectional_expansion_check(tangent_flow(flat, seg), np.eye(3)[:, :2]), 1.0)
    with pytest.raises(ConfigurationError):
        sectional_expansion_check(tangent_flow(flat, seg), np.ones((3, 2)))


def test_one_step_bound_constant_speed():
    spec = suspension_shift()
    seg = integrate_orbit(spec, (0.0, 0.0, 0.0), 3.0)
    coc = normal_cocycle(spec, tangent_flow(spec, seg), stride=200)
    F = np.array([[0.0], [1.0]])
    # identity cocycle: ||psi*_{-1}|| = 1, so the residual is 1 - 1/lam_bar
    assert one_step_backward_bound_check(coc, F, 1, 2.0) == pytest.approx(0.5)


def test_one_step_bound_saddle_exact(saddle_cocycle):
    E, F, _, _ = splitting_series(saddle_cocycle, 8, 1, [10])
    r = one_step_backward_bound_check(saddle_cocycle, F[0], 10, 1.5)
    assert r == pytest.approx(math.exp(-1) - 1 / 1.5, abs=1e-9)
    J = unit_area_expansion(saddle_cocycle, np.repeat(F, 11, axis=0))
    assert J[10] == pytest.approx(math.e, rel=1e-8)


def test_cone_bounds_trivial_limit():
    b, viol = cone_coordinate_bounds_check(2000, 1e-6, seed=1)
    assert viol == 0
    # L0 is the measured requirement (1 in the limit) times the 1.1 headroom
    assert b.L0 < 1.1 * 1.001 and b.L1 < 1e-3


def test_cone_bounds_at_recorded_constants():
    b, viol = cone_coordinate_bounds_check(20000, 0.01, seed=5, L0=4.0)
    assert viol == 0 and b.L0 == 4.0
