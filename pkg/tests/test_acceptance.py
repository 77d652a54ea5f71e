"""Acceptance suite: one PASS/FAIL line per criterion.

Every criterion runs at the default run configuration.  The Lorenz criteria
share one calibration, computed on first use in a temporary directory.  Set
SECTFLOW_ACCEPT_OUT to a directory to keep the calibration and the result
cache between invocations (timings then include cache hits).
"""
import itertools
import json
import math
import os
import time
from dataclasses import asdict, replace
from fractions import Fraction

import numpy as np
import pytest

from oracles import (classify_by_definition, pliss_brute, pliss_brute_batch, recurrence_brute,
                     recurrence_endpoint, suffix_margin)
from sectflow.calibration import CalibrationFile, cocycle_norm_samples
from sectflow.cones import cone_coordinate_bounds_check
from sectflow.config import RunConfig
from sectflow.decomposition import UnstableTubes, decompose, grid_W_mask
from sectflow.flow import attractor_points, integrate_orbit, lorenz63, tangent_flow
from sectflow.pliss import (PlissConfig, glue_check, pliss_mask, pliss_times, recurrence_pliss_times)
from sectflow.poincare import normal_cocycle, unit_cocycles
from sectflow.pressure import (Potential, empirical_measures, flow_bundle, height_potential,
                               measure_pressure_toy, phi_eps, pressure_estimate, shift_bundle,
                               zero_potential)
from sectflow.regularity import forward_attraction, stable_leaves
from sectflow.scenarios import Context, pooled_segments, run_scenario
from sectflow.cache import Cache
from sectflow.shift import ShiftSystem, cylinder_potential

pytestmark = pytest.mark.slow

CFG = PlissConfig(A=1.0, b1=0.25, b2=0.5)
PRODUCED = []  # (label, estimate, bundle or None) for the monotonicity criterion


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    out = os.environ.get("SECTFLOW_ACCEPT_OUT") or str(tmp_path_factory.mktemp("acceptance"))
    cfg = RunConfig()
    cfg.run = replace(cfg.run, out=out)
    path = cfg.calibration_path
    fresh = replace(cfg.calibration, seed=cfg.run.seed, h=cfg.system.h)
    stale = True
    if path.is_file():
        stale = CalibrationFile.read(path).settings != json.loads(json.dumps(asdict(fresh)))
    if stale:
        run_scenario(cfg, "calibrate")
    return cfg, CalibrationFile.read(path)


def run(cfg, name):
    t0 = time.perf_counter()
    out, _, _ = run_scenario(cfg, name)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- 1-3: Pliss structure

def test_01_pliss_exactness(verdict):
    rng = np.random.default_rng(101)
    spent, mismatches, density_fail, checked = 0.0, 0, 0, 0
    for N in range(1, 13):
        rows = np.array(list(itertools.product((0.0, 0.5, 1.0), repeat=N)))
        t0 = time.perf_counter()
        mask = pliss_mask(rows, CFG.b1)
        spent += time.perf_counter() - t0
        mismatches += int(np.sum(np.any(mask != pliss_brute_batch(rows, CFG.b1), axis=1)))
        held = rows.sum(axis=1) >= CFG.b2 * N
        density_fail += int(np.sum(mask[held].sum(axis=1) <= CFG.theta0 * N))
        checked += len(rows)
    n_random = 0
    while n_random < 1000:
        N = int(rng.integers(1, 51))
        a = rng.integers(-8, 65, N) / 64.0
        if a.sum() < CFG.b2 * N:
            continue
        n_random += 1
        t0 = time.perf_counter()
        rec = pliss_times(a, CFG)
        spent += time.perf_counter() - t0
        mismatches += rec.indices != pliss_brute(a, CFG.b1)
        density_fail += rec.count <= CFG.theta0 * N
    ok = mismatches == 0 and density_fail == 0 and spent < 5.0
    verdict(1, "Pliss lemma exactness", ok,
            f"{checked} exhaustive + 1000 random sequences, mismatches={mismatches}, "
            f"density failures={density_fail}, runtime={spent:.2f}s")


def test_02_recurrence_structure(verdict):
    rng = np.random.default_rng(202)
    betas = [Fraction(1, 4), Fraction(3, 10), Fraction(1, 3), Fraction(1, 2), Fraction(2, 3)]
    bad_brute = bad_entry = bad_count = lemma_cases = 0
    for i in range(3000):
        beta = betas[i % len(betas)]
        kappa = Fraction([1, 2, 5][i % 3], 10)
        beta1 = beta * (1 - kappa) * (1 - Fraction(1, 10 ** 6))
        N = int(rng.integers(0, 60))
        p = float(beta1) * (0.5 if i % 2 else 1.5)
        v = rng.random(N + 1) < p
        rec = recurrence_pliss_times(v, beta)
        bad_brute += rec.indices != recurrence_brute(v, beta)
        for k in rec.indices:
            seen = np.flatnonzero(v[:k + 1])
            # the first-entry bound: time since the last visit, in exact integers
            if seen.size and (k - int(seen[-1])) < 1 / beta - 1:
                bad_entry += 1
        if Fraction(int(v.sum())) <= beta1 * (N + 1):
            lemma_cases += 1
            bad_count += rec.count < kappa * (N + 1)
    ok = bad_brute == bad_entry == bad_count == 0 and lemma_cases > 500
    verdict(2, "recurrence Pliss structure", ok,
            f"3000 sequences, brute mismatches={bad_brute}, first-entry violations={bad_entry}, "
            f"count failures={bad_count} over {lemma_cases} sequences under the visit bound")


def _real(rng, n: int, certified: bool):
    while True:
        a = rng.integers(-32, 65, n) / 64.0
        if (suffix_margin(a, n, CFG.b1) >= 0) == certified:
            return a


def _visits(rng, n: int, first: bool, certified: bool, beta):
    while True:
        v = rng.random(n + 1) < 0.2
        v[0] = first
        if recurrence_endpoint(v, beta) == certified:
            return v


def test_03_gluing_closure(verdict):
    rng = np.random.default_rng(303)
    beta = Fraction(1, 3)
    glued = controls = 0
    for _ in range(1000):
        n1, n2 = (int(k) for k in rng.integers(1, 30, 2))
        a, b = _real(rng, n1, True), _real(rng, n2, True)
        # a leading visit needs at least three samples before the endpoint can be certified
        va = _visits(rng, n1, n1 >= 2 and bool(rng.random() < 0.2), True, beta)
        vb = _visits(rng, n2, bool(va[-1]), True, beta)
        ab, vab = np.r_[a, b], np.r_[va, vb[1:]]
        # glued endpoints, re-certified from the definitions
        glued += (glue_check(a, b, b1=CFG.b1) and suffix_margin(ab, n1 + n2, CFG.b1) >= 0
                  and glue_check(va, vb, "recurrence", beta=beta) and recurrence_endpoint(vab, beta)
                  and glue_check((a, va), (b, vb), "simultaneous", b1=CFG.b1, beta=beta))
        # negative controls: the second piece does not end at a certified time
        nb = _real(rng, n2, False)
        nv = _visits(rng, n2, bool(va[-1]), False, beta)
        controls += not (glue_check(a, nb, b1=CFG.b1) or glue_check(va, nv, "recurrence", beta=beta)
                         or glue_check((a, va), (nb, vb), "simultaneous", b1=CFG.b1, beta=beta)
                         or glue_check((a, va), (b, nv), "simultaneous", b1=CFG.b1, beta=beta))
    verdict(3, "gluing closure", glued == 1000 and controls == 1000,
            f"certified pairs glued {glued}/1000 (generic, recurrence, simultaneous), "
            f"negative controls rejected {controls}/1000")


# ---------------------------------------------------------------- 4-6, 10: pressure

def test_04_toy_entropy(env, verdict):
    cfg, _ = env
    out, secs = run(cfg, "toyshift")
    P = out.result["P"]
    ok = 0.59 <= P <= 0.79 and secs < 60
    PRODUCED.append(("toyshift scenario", out, None))
    verdict(4, "toy-system entropy", ok, f"slope={P:.4f} (log 2={math.log(2):.4f}), runtime={secs:.1f}s")


def test_05_variational_inequality(verdict):
    system = ShiftSystem(8)
    words = system.random_words(20000, 24, seed=0)
    potentials = {"zero": zero_potential(),
                  "clamped A": Potential(cylinder_potential((0.5, -0.3), -0.2, 0.4), "user"),
                  "clamped B": Potential(cylinder_potential((1.0,), 0.0, 0.6), "user")}
    parts, ok = [], True
    for name, phi in potentials.items():
        bundle = shift_bundle(system, words, 12, phi)
        est = pressure_estimate(bundle, range(1, 13), [0.25], keep_sets=True)
        _, mu = empirical_measures(est.sets[(12.0, 0.25, 0.0)], bundle)
        Pmu = measure_pressure_toy(system, mu, phi)
        ok &= est.P <= Pmu + 0.05
        parts.append(f"{name}: P={est.P:.4f} P_mu={Pmu:.4f}")
        PRODUCED.append((f"toy {name}", est, bundle))
    verdict(5, "variational inequality", ok, "; ".join(parts))


def test_06_lorenz_entropy(env, verdict):
    cfg, _ = env
    out, secs = run(cfg, "pressure")
    P = out.result["P"]
    PRODUCED.append(("lorenz pressure scenario", out, None))
    verdict(6, "Lorenz entropy positivity", P > 0.05 and secs < 600,
            f"slope at delta=0.5={P:.4f}, pool={out.result['pool']}, runtime={secs:.0f}s")


# ---------------------------------------------------------------- 7-9: cocycles and cones

def test_07_scaled_cocycle(env, verdict):
    cfg, cal = env
    spec = lorenz63()
    P = attractor_points(spec, 20, seed=cfg.run.seed + 70)
    defect = 0.0
    for x in P:
        coc = normal_cocycle(spec, tangent_flow(spec, integrate_orbit(spec, x, 10.0)), stride=200)
        for scaled in (False, True):
            whole = coc.product(0, 10, scaled)
            split = coc.product(4, 10, scaled) @ coc.product(0, 4, scaled)
            defect = max(defect, np.linalg.norm(whole - split) / np.linalg.norm(whole))
    coc = unit_cocycles(spec, P, 5)
    u, v = np.random.default_rng(7).normal(size=(2, 20, 5, 2, 1))

    def ratio(M):
        return np.linalg.norm(M @ u, axis=(-2, -1)) / np.linalg.norm(M @ v, axis=(-2, -1))
    ident = float(np.max(np.abs(ratio(coc.psi) - ratio(coc.psi_star)) / ratio(coc.psi)))
    fresh = attractor_points(spec, 1000, seed=cfg.run.seed + 71, h=cfg.system.h, n_orbits=1000)
    norms = cocycle_norm_samples(spec, fresh, cfg.system.h)
    ok = defect < 1e-6 and ident < 1e-12 and norms.max() <= cal.C_tau
    verdict(7, "scaled-cocycle invariants", ok,
            f"split defect={defect:.2e}, ratio identity={ident:.2e}, "
            f"max ||psi*_(+-1)|| on 1000 fresh samples={norms.max():.3e} vs C_tau={cal.C_tau:.3e}")


def test_08_domination_and_contraction(env, verdict):
    cfg, cal = env
    out, _ = run(cfg, "splitting")
    r = out.result
    verdict(8, "domination and contraction", all(out.checks.values()),
            f"segments={r['segments']}, E log rate={r['E_log_rate_geometric_mean']:.3f}, "
            f"E/F slope={r['E_over_F_log_slope']:.3f}, one-step bound on "
            f"{100 * r['one_step_fraction']:.2f}% at c={cal.c:g}, lam_bar={cal.lam_bar:.3f}")


def test_09_cone_bounds(env, verdict):
    cfg, cal = env
    bounds, viol = cone_coordinate_bounds_check(100_000, 0.01, seed=cfg.run.seed + 90,
                                                L0=cal.L0, L1=cal.L1, L2=cal.L2)
    verdict(9, "cone coordinate bounds", viol == 0 and cal.alpha == 0.01,
            f"1e5 trials at alpha=0.01, L0={cal.L0:.4f}, L1={cal.L1:.2e}, violations={viol}")


def test_10_monotonicity(verdict):
    system = ShiftSystem(8)
    words = system.random_words(4000, 24, seed=10)
    phi = Potential(cylinder_potential((0.5, -0.3), -0.2, 0.4), "user")
    b = shift_bundle(system, words, 8, phi)
    PRODUCED.append(("toy clamped, eps grid", pressure_estimate(b, [2, 4, 6, 8], [0.25, 0.125],
                                                                [0.0, 0.125, 0.25]), b))
    spec = lorenz63()
    b = flow_bundle(spec, attractor_points(spec, 1500, seed=11), 1.6, height_potential(0.1))
    PRODUCED.append(("lorenz height, eps grid", pressure_estimate(b, [0.4, 0.8, 1.2, 1.6], [2.0, 1.0, 0.5],
                                                                  [0.0, 0.25, 0.5]), b))
    bad = []
    for label, est, bundle in PRODUCED:
        if bundle is None:  # a scenario outcome: its own exact check on the written grid
            if not est.checks["monotone_delta_eps"]:
                bad.append(label)
            continue
        L = est.log_lambda  # deltas largest first
        if np.any(np.diff(L, axis=1) < 0) or np.any(np.diff(L, axis=2) < 0):
            bad.append(label)
        for t in est.t_grid:
            for e in est.eps:
                w, p0, var = phi_eps(bundle, t, e)
                if np.any(np.abs(w - p0) > t * var):
                    bad.append(f"{label} Var bound at t={t:g}, eps={e:g}")
    verdict(10, "partition-function monotonicity", not bad,
            f"{len(PRODUCED)} instances checked" + (f", failing: {bad}" if bad else ""))


# ---------------------------------------------------------------- 11: decomposition

def test_11_decomposition_soundness(env, verdict):
    cfg, cal = env
    out, _ = run(cfg, "decompose")
    ctx = Context(cfg, lorenz63(), Cache(cfg.out_dir / "cache"), cal)
    s = cfg.decompose
    dcfg = ctx.decomposition_config(s.N1 or cal.N1)
    tubes = UnstableTubes(ctx.spec, s.tube_radius, s.tube_length)
    pre = attractor_points(ctx.spec, s.segments, seed=ctx.seed, h=ctx.h, n_orbits=s.segments)
    pool = pooled_segments(ctx, pre, s.t, tubes)
    mismatch = tight = 0
    for d in pool:
        lab = decompose(d, dcfg)
        kind, tau, near = classify_by_definition(d, dcfg)
        tight += near
        if not near and (lab.kind != kind or (kind == "D" and lab.tau != tau)):
            mismatch += 1
    ok = all(out.checks.values()) and mismatch == 0 and len(pool) == 1000
    verdict(11, "decomposition soundness", ok,
            f"{len(pool)} segments, counts={out.result['counts']}, scenario checks={out.checks}, "
            f"oracle mismatches={mismatch} (tie cases skipped={tight}), "
            f"B2 bound asserted on {out.result['b2_bound_checked']}")


# ---------------------------------------------------------------- 12-14: regularity

@pytest.mark.xfail(strict=True, reason="known failure: the control pool plateaus like G, because "
                   "companions that stay in the Bowen ball contract onto the stable leaf within a few "
                   "time units; analysed in the decisions ledger")
def test_12_distortion_plateau(env, verdict):
    cfg, _ = env
    out, _ = run(cfg, "distortion")
    r = out.result
    verdict(12, "distortion plateau", all(out.checks.values()),
            f"G segments={r['G_segments']}, growth t=20->80: G={r['growth_ratio']['G']:.3f} "
            f"(need <=1.5), control={r['growth_ratio']['control']:.3f} (need >3)")


def test_13_stable_leaves(env, verdict):
    cfg, _ = env
    spec = lorenz63()
    pre = attractor_points(spec, 200, seed=cfg.run.seed + 130, n_orbits=200)
    leaves, fr = stable_leaves(spec, pre, radius_scaled=0.025, iterations=30)
    inW, _ = grid_W_mask(spec, Context(cfg, spec, None).neighborhoods(), fr.points[:, 0])
    keep = np.flatnonzero(~inW)[:100]
    res = np.array([leaves[i].residual for i in keep])
    d = forward_attraction(spec, fr, leaves, steps=5, window=1.0)[keep]
    halved = np.all(np.nanmin(d[:, :, 1:], axis=-1) <= 0.5 * d[:, :, 0], axis=1)
    f_res, f_att = float(np.mean(res < 1e-4)), float(np.mean(halved))
    verdict(13, "stable-leaf invariance", len(keep) == 100 and f_res >= 0.95 and f_att >= 0.95,
            f"{len(keep)} base points outside W_r, residual<1e-4 on {100 * f_res:.0f}%, "
            f"distance halved within 5 units on {100 * f_att:.0f}%")


def test_14_specification(env, verdict):
    cfg, _ = env
    out, _ = run(cfg, "spec-search")
    r = out.result
    verdict(14, "specification sanity", all(out.checks.values()),
            f"k=1 {r['single_segment']}, periodic self-gluing {r['periodic']['success']}, "
            f"success rate inside={r['success_rate']['inside']:.2f} "
            f"outside={r['success_rate']['outside']:.2f}")
