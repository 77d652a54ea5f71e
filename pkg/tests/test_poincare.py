import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sectflow.errors import ConfigurationError, SingularityError
from sectflow.flow import evaluate_field, integrate_orbit, linear_saddle, lorenz63, suspension_shift, tangent_flow
from sectflow.poincare import (TubularParams, frames_along, linear_poincare, normal_cocycle, normal_frame,
                               normal_project, scaled_linear_poincare, scaled_shadowing_check,
                               sectional_poincare_point, unit_cocycles)


@pytest.fixture(scope="module")
def saddle3():
    return linear_saddle((-2.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def test_frame_of_2d_saddle_spans_e2():
    fr = normal_frame(linear_saddle((-2.0, 1.0)), (1.0, 0.0))
    assert fr.basis.shape == (2, 1)
    assert abs(abs(fr.basis[1, 0]) - 1) < 1e-15


def test_frame_for_vertical_field(saddle3):
    fr = normal_frame(saddle3, (0.0, 0.0, 5.0))
    assert np.allclose(fr.basis, np.eye(3)[:, :2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_frames_are_orthonormal_and_normal(x):
    spec = lorenz63()
    x = np.asarray(x)
    if np.linalg.norm(evaluate_field(spec, x)) < 1e-6:
        return
    fr = normal_frame(spec, x)
    B = fr.basis
    assert np.allclose(B.T @ B, np.eye(2), atol=1e-12)
    assert np.max(np.abs(B.T @ fr.direction)) < 1e-12


def test_no_frame_at_a_singularity(lorenz):
    with pytest.raises(SingularityError):
        normal_frame(lorenz, (0.0, 0.0, 0.0))


def test_projection_examples(lorenz):
    x = np.array([1.0, 2.0, 3.0])
    fr = normal_frame(lorenz, x)
    X = evaluate_field(lorenz, x)
    assert np.linalg.norm(normal_project(fr, X)) < 1e-12
    w = fr.basis @ np.array([0.3, -0.4])
    assert np.linalg.norm(normal_project(fr, w)) == pytest.approx(0.5, abs=1e-14)
    assert np.allclose(normal_project(fr, X + w), [0.3, -0.4], atol=1e-12)


def _saddle_setup(t=1.0):
    spec = linear_saddle((-2.0, 1.0))
    seg = integrate_orbit(spec, (1.0, 0.0), t)
    return spec, tangent_flow(spec, seg), frames_along(spec, seg.samples)


def test_linear_poincare_saddle():
    _, tc, fr = _saddle_setup()
    assert np.allclose(linear_poincare(tc, fr, 0), np.eye(1))
    psi = linear_poincare(tc, fr, tc.matrices.shape[0])
    assert abs(psi[0, 0]) == pytest.approx(math.e, rel=1e-8)
    # the flow speed decays like e^{-2t}: psi* = psi |X(x)| / |X(x_t)|
    psi_s = scaled_linear_poincare(tc, fr, tc.matrices.shape[0])
    assert abs(psi_s[0, 0]) == pytest.approx(math.e ** 3, rel=1e-7)


def test_scaled_equals_unscaled_for_constant_speed():
    spec = suspension_shift()
    seg = integrate_orbit(spec, (0.1, 0.2, 0.3), 0.5)
    tc = tangent_flow(spec, seg)
    fr = frames_along(spec, seg.samples)
    k = tc.matrices.shape[0]
    assert np.array_equal(linear_poincare(tc, fr, k), scaled_linear_poincare(tc, fr, k))


def test_normal_cocycle_split_product(lorenz, lorenz_points):
    seg = integrate_orbit(lorenz, lorenz_points[2], 10.0)
    coc = normal_cocycle(lorenz, tangent_flow(lorenz, seg), stride=200)
    for scaled in (False, True):
        whole = coc.product(0, 10, scaled)
        split = coc.product(4, 10, scaled) @ coc.product(0, 4, scaled)
        assert np.linalg.norm(whole - split) / np.linalg.norm(whole) < 1e-6


def test_domination_ratio_is_scale_free(lorenz, lorenz_points):
    coc = unit_cocycles(lorenz, lorenz_points[:20], 5)
    u, v = np.random.default_rng(0).normal(size=(2, 20, 5, 2, 1))
    def ratio(M):
        return np.linalg.norm(M @ u, axis=(-2, -1)) / np.linalg.norm(M @ v, axis=(-2, -1))
    a, b = ratio(coc.psi), ratio(coc.psi_star)
    assert np.max(np.abs(a - b) / a) < 1e-12


def test_batched_cocycle_matches_single_orbit(lorenz, lorenz_points):
    x = lorenz_points[7]
    coc = unit_cocycles(lorenz, x[None], 3)
    seg = integrate_orbit(lorenz, x, 3.0)
    single = normal_cocycle(lorenz, tangent_flow(lorenz, seg), stride=200)
    sv1 = np.linalg.svd(coc.psi[0], compute_uv=False)
    sv2 = np.linalg.svd(single.psi, compute_uv=False)
    assert np.allclose(sv1, sv2, rtol=1e-8)


def test_sectional_point_of_x_is_x_t(lorenz, lorenz_points):
    x = lorenz_points[0]
    p, tau = sectional_poincare_point(lorenz, x, 1.0, x)
    assert tau == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(p, integrate_orbit(lorenz, x, 1.0).final, atol=1e-12)


def test_sectional_saddle_map_is_analytic(saddle3):
    x = np.zeros(3)
    y = np.array([0.01, -0.02, 0.0])
    p, tau = sectional_poincare_point(saddle3, x, 1.0, y)
    assert np.allclose(p, [0.01 * math.exp(-2), -0.02 * math.e, 1.0], atol=1e-6)
    assert abs(tau - 1.0) <= 0.05


def test_hitting_time_bounded_on_lorenz(lorenz, lorenz_points):
    for x in lorenz_points[:10]:
        fr = normal_frame(lorenz, x)
        y = x + 0.01 * fr.speed * fr.basis[:, 0]
        _, tau = sectional_poincare_point(lorenz, x, 1.0, y)
        assert abs(tau - 1.0) <= 3 * 0.05


def test_shadowing_trivial(lorenz, lorenz_points):
    r = scaled_shadowing_check(lorenz, lorenz_points[0], lorenz_points[0], 5, TubularParams())
    assert r.success and r.fail_step is None and max(r.rel_displacements) == 0


def test_shadowing_decays_along_stable_direction(saddle3):
    x = np.zeros(3)
    y = np.array([0.1 * 0.05, 0.0, 0.0])  # 0.1 rho |X(x)| along E^s
    r = scaled_shadowing_check(saddle3, x, y, 5, TubularParams())
    rel = np.asarray(r.rel_displacements)
    assert r.success
    assert np.allclose(rel[1:] / rel[:-1], math.exp(-2), rtol=1e-6)


def test_shadowing_fails_far_from_the_orbit(lorenz, lorenz_points):
    x = lorenz_points[4]
    fr = normal_frame(lorenz, x)
    params = TubularParams()
    y = x + 10 * params.rho * fr.speed * fr.basis[:, 1]
    r = scaled_shadowing_check(lorenz, x, y, 5, params)
    assert not r.success and r.fail_step <= 1


def test_shadowing_needs_y_on_the_normal_plane(lorenz, lorenz_points):
    x = lorenz_points[0]
    with pytest.raises(ConfigurationError):
        scaled_shadowing_check(lorenz, x, x + evaluate_field(lorenz, x) * 1e-3, 2, TubularParams())


def test_tubular_params_validate():
    with pytest.raises(ConfigurationError):
        TubularParams(rho0=0.05, K0=0.5)
    with pytest.raises(ConfigurationError):
        TubularParams(rho0=0.05, rho=0.1)
