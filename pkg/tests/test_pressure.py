import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sectflow.errors import ConfigurationError, UnsupportedSystemError
from sectflow.flow import linear_saddle, lorenz63
from sectflow.pressure import (EmpiricalMeasure, Potential, birkhoff_integral, bowen_distance,
                               constant_potential, empirical_measures, flow_bundle, greedy_separated_set,
                               height_potential, log_speed_clamped, measure_pressure_toy, partition_function,
                               phi_eps, pressure_estimate, pressure_gap_check, shift_bundle,
                               sup_bowen_integral, zero_potential)
from sectflow.shift import ShiftSystem, cylinder_potential


@pytest.fixture(scope="module")
def toy():
    system = ShiftSystem(8)
    words = system.random_words(4000, 24, seed=1)
    return system, words


# ---------------------------------------------------------------- single orbits

def test_bowen_distance_examples(lorenz, lorenz_points):
    x, y = lorenz_points[0], lorenz_points[0] + 1e-3
    assert bowen_distance(lorenz, x, x, 2.0) == 0
    assert bowen_distance(lorenz, x, y, 0.0) == pytest.approx(np.linalg.norm(y - x))
    sink = linear_saddle((-1.0, -2.0))
    a, b = np.array([1.0, 2.0]), np.array([-0.5, 0.3])
    assert bowen_distance(sink, a, b, 3.0) == pytest.approx(np.linalg.norm(a - b), abs=1e-15)


def test_birkhoff_examples(lorenz, lorenz_points):
    x = lorenz_points[1]
    assert birkhoff_integral(lorenz, x, 2.0, zero_potential()) == 0
    assert birkhoff_integral(lorenz, x, 2.0, constant_potential(1.5)) == pytest.approx(3.0)
    sad = linear_saddle((-2.0, 1.0))
    phi = Potential(lambda v: v[..., 0], "user")
    assert birkhoff_integral(sad, (1.0, 0.0), 1.0, phi) == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-6)


def test_sup_bowen_integral(lorenz, lorenz_points):
    x = lorenz_points[2]
    phi = height_potential(0.1)
    a, b, _ = sup_bowen_integral(lorenz, x, 1.0, phi, 0.0)
    assert a == b == pytest.approx(birkhoff_integral(lorenz, x, 1.0, phi))
    c, _, _ = sup_bowen_integral(lorenz, x, 1.0, constant_potential(2.0), 0.5, probes=8)
    assert c == pytest.approx(2.0)
    e, p0, var = sup_bowen_integral(lorenz, x, 1.0, phi, 0.5, probes=16)
    assert p0 <= e <= p0 + 1.0 * var + 1e-12


# ---------------------------------------------------------------- separated sets

def test_singleton_and_copies(lorenz, lorenz_points):
    b = flow_bundle(lorenz, lorenz_points[:1], 1.0)
    s = greedy_separated_set(b, 1.0, 0.5)
    assert list(s.indices) == [0]
    assert partition_function(s) == 0
    b = flow_bundle(lorenz, np.repeat(lorenz_points[:1], 5, axis=0), 1.0)
    assert len(greedy_separated_set(b, 1.0, 0.5)) == 1


def test_shift_set_is_maximal(toy):
    system, words = toy
    b = shift_bundle(system, words, 6)
    s = greedy_separated_set(b, 6, 0.25)
    assert len(s) == 2 ** 6
    assert partition_function(s) == pytest.approx(6 * math.log(2))
    # exhaustive oracle: 2^6 cylinder representatives, no two of them closer than 0.25 apart
    reps = np.array([list(c) + [0] * 7 for c in itertools.product((0, 1), repeat=6)], np.int8)
    d = min(system.bowen_distance(a, b2, 6) for a, b2 in itertools.combinations(reps[:16], 2))
    assert d > 0.25
    assert s.verify(b)


def test_shift_distance_closed_form(toy):
    system, words = toy
    rng = np.random.default_rng(0)
    for _ in range(50):
        i, j = rng.integers(0, len(words), 2)
        t = int(rng.integers(1, 10))
        n = int(np.argmax(words[i] != words[j])) if np.any(words[i] != words[j]) else 99
        expect = 0.0 if n >= t - 1 + system.window else 0.5 ** (max(n - t + 1, 0) + 1)
        assert system.bowen_distance(words[i], words[j], t) == expect


def test_monotonicity_of_Lambda(toy):
    system, words = toy
    phi = Potential(cylinder_potential([0.5, -0.3], -0.2, 0.4), "user")
    b = shift_bundle(system, words, 8, phi)
    est = pressure_estimate(b, [2, 4, 6, 8], [0.25, 0.125], [0.0, 0.125])
    L = est.log_lambda  # deltas are stored largest first
    assert np.all(np.diff(L, axis=1) >= -1e-12)
    assert np.all(np.diff(L, axis=2) >= -1e-12)
    for a, t in enumerate(est.t_grid):
        w, p0, var = phi_eps(b, t, 0.125)
        assert np.all(np.abs(w - p0) <= t * var + 1e-12)


# ---------------------------------------------------------------- pressure

def test_toy_entropy_slope(toy):
    system = ShiftSystem(8)
    words = system.random_words(20000, 24, seed=0)
    est = pressure_estimate(shift_bundle(system, words, 12), range(1, 13), [0.25])
    assert 0.59 <= est.P <= 0.79


def test_constant_shifts_slope_by_c(toy):
    system, words = toy
    e0 = pressure_estimate(shift_bundle(system, words, 8), [2, 4, 6, 8], [0.25])
    e1 = pressure_estimate(shift_bundle(system, words, 8, constant_potential(0.7)), [2, 4, 6, 8], [0.25])
    assert e1.P - e0.P == pytest.approx(0.7, abs=1e-9)


def test_pressure_needs_four_times(toy):
    system, words = toy
    with pytest.raises(ConfigurationError):
        pressure_estimate(shift_bundle(system, words, 3), [1, 2, 3], [0.25])


def test_estimate_serializes(toy, tmp_path):
    system, words = toy
    est = pressure_estimate(shift_bundle(system, words, 6), [3, 4, 5, 6], [0.25])
    est.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,delta,eps,logLambda" and len(lines) == 5
    assert "plot" in est.gnuplot_script("p.csv")
    assert '"P"' in est.to_json()


# ---------------------------------------------------------------- measures

def test_empirical_measures_uniform_for_zero_potential(toy):
    system, words = toy
    b = shift_bundle(system, words, 6)
    s = greedy_separated_set(b, 6, 0.25)
    nu, mu = empirical_measures(s, b)
    assert np.allclose(nu.weights, 1 / len(s))
    assert mu.weights.sum() == pytest.approx(1.0)
    # mu(first symbol = 1) equals the averaged visit frequency, by direct counting
    direct = np.mean(words[s.indices][:, :6])
    assert mu.mass(lambda p: system.decode(p)[:, 0] == 1) == pytest.approx(direct)


def test_singleton_measures(lorenz, lorenz_points):
    b = flow_bundle(lorenz, lorenz_points[:1], 1.0)
    s = greedy_separated_set(b, 1.0, 0.5)
    nu, mu = empirical_measures(s, b)
    assert nu.weights.tolist() == [1.0]
    assert np.allclose(mu.weights, 1 / b.n_samples(1.0))


def test_bernoulli_measure_entropy():
    system = ShiftSystem(8)
    words = system.random_words(60000, 8, seed=3)
    mu = EmpiricalMeasure(system.orbit_samples(words, 1)[:, 0], np.full(len(words), 1 / len(words)),
                          "mu", 1, 0.25)
    assert measure_pressure_toy(system, mu, zero_potential()) == pytest.approx(math.log(2), abs=0.05)
    point = EmpiricalMeasure(system.orbit_samples(words[:1], 1)[:, 0], np.ones(1), "mu", 1, 0.25)
    assert measure_pressure_toy(system, point, zero_potential()) == 0


@pytest.mark.parametrize("coefs,clamp", [((), None), ((0.5, -0.3), (-0.2, 0.4)), ((1.0,), (0.0, 0.6))])
def test_variational_inequality(coefs, clamp):
    system = ShiftSystem(8)
    words = system.random_words(20000, 24, seed=0)
    phi = Potential(cylinder_potential(coefs, *clamp), "user") if coefs else zero_potential()
    est = pressure_estimate(shift_bundle(system, words, 12, phi), range(1, 13), [0.25], keep_sets=True)
    sep = est.sets[(12.0, 0.25, 0.0)]
    _, mu = empirical_measures(sep, shift_bundle(system, words, 12, phi))
    assert est.P <= measure_pressure_toy(system, mu, phi) + 0.05


def test_measure_pressure_rejects_flows(lorenz):
    with pytest.raises(UnsupportedSystemError):
        measure_pressure_toy(lorenz, EmpiricalMeasure(np.zeros((1, 3)), np.ones(1), "mu", 1, 1), zero_potential())


def test_pressure_gap(lorenz, toy):
    system, words = toy
    est = pressure_estimate(shift_bundle(system, words, 8), [2, 4, 6, 8], [0.25])
    assert pressure_gap_check(lorenz, zero_potential(), est)[0] == pytest.approx(est.P)
    assert pressure_gap_check(lorenz, constant_potential(est.P + 1), est)[0] == pytest.approx(-1)
    phi = log_speed_clamped(lorenz, 0.01)
    assert pressure_gap_check(lorenz, phi, est)[0] > 0


def test_potential_tags():
    with pytest.raises(ConfigurationError):
        Potential(lambda x: 0, "nonsense")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.sampled_from([0.5, 0.25, 0.125, 0.0625]))
def test_prefix_classes_match_distance(t, radius):
    system = ShiftSystem(8)
    words = system.random_words(40, t + 8, seed=t)
    labels = system.class_labels(words, t, radius)
    for i, j in itertools.combinations(range(12), 2):
        close = system.bowen_distance(words[i], words[j], t) <= radius
        assert close == (labels[i] == labels[j])
