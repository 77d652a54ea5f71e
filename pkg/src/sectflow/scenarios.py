"""Scenario pipelines behind the command line.

Each ``run_<name>`` takes a :class:`Context` and returns an :class:`Outcome`:
a JSON-able result, named pass/fail checks, CSV tables and a gnuplot script.
Writing files and mapping failures to exit codes is left to :mod:`sectflow.cli`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from .cache import Cache
from .calibration import CalibrationFile, _jsonable, calibrate
from .cones import one_step_backward_bound_check, splitting_series
from .config import RunConfig
from .decomposition import (DecompositionConfig, G_membership, SingularNeighborhood, UnstableTubes,
                            b2_fraction, bad_segment_visit_statistics, decompose, grid_W_mask,
                            s_tilde, segment_pool)
from .errors import ConfigurationError
from .flow import VectorFieldSpec, attractor_points, evaluate_field, integrate_batch
from .parallel import chunks, parallel_map
from .pliss import hyperbolic_time_brute, pliss_mask, recurrence_mask, recurrence_time_brute
from .poincare import unit_cocycles
from .pressure import (OrbitBundle, Potential, PressureEstimate, _certified_min_distance,
                       constant_potential, height_potential, log_speed_clamped, pressure_estimate,
                       shift_bundle, zero_potential)
from .regularity import distortion_pool, find_periodic_orbit, specification_search
from .shift import ShiftSystem, cylinder_potential

CHUNK = 64  # fixed batch size: results must not depend on the worker count
TOY_SLOPE_RANGE = (0.59, 0.79)


@dataclass
class Outcome:
    result: dict
    checks: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> (columns, rows)
    plot: str = ""


@dataclass
class Context:
    cfg: RunConfig
    spec: VectorFieldSpec
    cache: Cache
    calibration: Optional[CalibrationFile] = None

    @property
    def seed(self) -> int:
        return self.cfg.run.seed

    @property
    def h(self) -> float:
        return self.cfg.system.h

    @property
    def workers(self) -> int:
        return self.cfg.run.workers

    def need_calibration(self) -> CalibrationFile:
        if self.calibration is None:
            cal = CalibrationFile.read(self.cfg.calibration_path)
            if cal.spec != self.spec.key():
                raise ConfigurationError(
                    f"calibration file {self.cfg.calibration_path} was produced for system "
                    f"{cal.spec}, not {self.spec.key()}; rerun 'calibrate' for this config")
            self.calibration = cal
        return self.calibration

    def neighborhoods(self) -> list:
        c = self.cfg.calibration
        return [SingularNeighborhood(s, c.r, c.r0, h=self.h) for s in self.spec.active_singularities]

    def decomposition_config(self, N1: int = 0) -> DecompositionConfig:
        c = self.cfg.calibration
        return DecompositionConfig(c.lam0, c.beta, c.kappa, N1)


def flow_potential(spec: VectorFieldSpec, name: str, coef: float) -> Potential:
    if name == "zero":
        return zero_potential()
    if name == "constant":
        return constant_potential(coef)
    if name == "height":
        return height_potential(coef)
    if name in ("log-speed", "log-speed-clamped"):
        return log_speed_clamped(spec, coef)
    raise ConfigurationError(f"unknown potential {name!r}; choose zero, constant, height or log-speed")


def _segments_chunk(spec, t, nbhds, tubes, window, h, starts):
    return segment_pool(spec, starts, t, nbhds, tubes, window=window, h=h)


def pooled_segments(ctx: Context, starts, t: int, tubes=None, window: int = 6) -> list:
    fn = partial(_segments_chunk, ctx.spec, t, ctx.neighborhoods(), tubes, window, ctx.h)
    parts = parallel_map(fn, [starts[a:b] for a, b in chunks(len(starts), CHUNK)], ctx.workers)
    out = []
    for p in parts:
        for d in p:
            d.seg_id = len(out)
            out.append(d)
    return out


# --------------------------------------------------------------------------

def run_calibrate(ctx: Context) -> Outcome:
    settings = replace(ctx.cfg.calibration, seed=ctx.seed, h=ctx.h)
    cal = calibrate(ctx.spec, settings)
    cal.provenance["config_hash"] = ctx.cfg.hash
    path = ctx.cfg.calibration_path
    path.parent.mkdir(parents=True, exist_ok=True)
    cal.write(path)
    ctx.calibration = cal
    keys = ("c", "lam_bar", "C_tau", "K0", "L0", "L1", "L2", "N0", "N1")
    res = {k: getattr(cal, k) for k in keys}
    res.update(theta0=cal.theta0, path=str(path))
    rows = [[k, getattr(cal, k)] for k in keys]
    return Outcome(res, {"constants_positive_finite": True}, {"constants": (["name", "value"], rows)})


def run_simulate(ctx: Context) -> Outcome:
    s = ctx.cfg.simulate
    P = attractor_points(ctx.spec, s.count, seed=ctx.seed, h=ctx.h, n_orbits=s.count)
    n_steps = int(round(s.t / ctx.h))
    orbits = integrate_batch(ctx.spec, P, n_steps, ctx.h, s.stride)
    speed = np.linalg.norm(evaluate_field(ctx.spec, orbits), axis=-1)
    dt = ctx.h * s.stride
    rows = [[i, round(k * dt, 10), *orbits[i, k]] for i in range(len(P)) for k in range(orbits.shape[1])]
    cols = ["orbit", "t"] + [f"x{j}" for j in range(ctx.spec.dim)]
    res = {"orbits": len(P), "t": s.t, "lower": orbits.min(axis=(0, 1)).tolist(),
           "upper": orbits.max(axis=(0, 1)).tolist(),
           "speed_quantiles": np.quantile(speed, [0, 0.5, 1]).tolist()}
    plot = ("set datafile separator ','\nset xlabel 'x0'\nset ylabel 'x1'\nset zlabel 'x2'\n"
            "splot 'simulate_orbits.csv' every ::1 using 3:4:5 with dots notitle\n")
    return Outcome(res, {"finite": bool(np.all(np.isfinite(orbits)))}, {"orbits": (cols, rows)}, plot)


def run_splitting(ctx: Context) -> Outcome:
    """Contraction along E, domination E/F and the one-step backward bound after speed-up."""
    s = ctx.cfg.splitting
    cal = ctx.need_calibration()
    spec, h, w = ctx.spec, ctx.h, s.window
    pre = attractor_points(spec, 3 * s.count, seed=ctx.seed, h=h, n_orbits=3 * s.count)
    coc = unit_cocycles(spec, pre, s.steps + 2 * w + 2, h)
    idx = np.arange(w + 1, w + 2 + s.steps)
    E, F, res, _ = splitting_series(coc, w, 1, idx)
    ends = coc.points[:, idx[[0, -1]]]
    inW, _ = grid_W_mask(spec, ctx.neighborhoods(), ends)
    keep = np.flatnonzero(~inW.any(axis=1))[: s.count]
    A = coc.psi[keep][:, idx[:-1]]
    e_log = np.log(np.linalg.norm(A @ E[keep, :-1], axis=(-2, -1)))
    f_log = np.log(np.linalg.svd(A @ F[keep, :-1], compute_uv=False)[..., -1])
    e_rate = e_log.mean(axis=1)
    ratio = np.cumsum(e_log - f_log, axis=1)
    k = np.arange(1, s.steps + 1)
    ratio_slope = float(np.polyfit(k, ratio.mean(axis=0), 1)[0])

    # one-step bound for the sped-up flow on fresh points
    fresh = attractor_points(spec, 1000, seed=ctx.seed + 1, h=h, n_orbits=1000)
    sp = spec.rescaled(cal.c)
    ww = max(2, int(math.ceil(12.0 / cal.c)))
    hc = 1.0 / (200 * int(math.ceil(cal.c)))
    coc_c = unit_cocycles(sp, fresh, 2 * ww + 3, hc)
    _, Fc, _, _ = splitting_series(coc_c, ww, 1, np.array([ww + 1]))
    resid = one_step_backward_bound_check(coc_c, Fc[:, 0], ww + 1, cal.lam_bar)
    frac = float(np.mean(resid <= 0))

    rows = [[int(i), float(a), float(b)] for i, a, b in zip(keep, e_rate, ratio[:, -1] / s.steps)]
    result = {"segments": int(len(keep)), "steps": s.steps, "window": w,
              "splitting_residual_max": float(res[keep].max()),
              "E_log_rate_geometric_mean": float(e_rate.mean()), "E_over_F_log_slope": ratio_slope,
              "c": cal.c, "lam_bar": cal.lam_bar, "one_step_fraction": frac,
              "one_step_worst_residual": float(resid.max())}
    checks = {"enough_segments": len(keep) == s.count,
              "E_contracts": result["E_log_rate_geometric_mean"] < 0,
              "E_dominated_by_F": ratio_slope < 0,
              "one_step_bound": frac >= cal.settings.get("coverage", 0.999)}
    mean_ratio = ratio.mean(axis=0)
    plot = ("set datafile separator ','\nset xlabel 'segment'\nset ylabel 'rate'\n"
            "plot 'splitting_segments.csv' every ::2 using 1:2 title 'E log rate', "
            "'' every ::2 using 1:3 title 'E/F log ratio per step'\n")
    tables = {"segments": (["segment", "E_log_rate", "EF_log_ratio_per_step"], rows),
              "ratio_curve": (["k", "mean_cumulative_log_ratio"],
                              [[int(a), float(b)] for a, b in zip(k, mean_ratio)])}
    return Outcome(result, checks, tables, plot)


def run_pliss(ctx: Context) -> Outcome:
    s = ctx.cfg.pliss
    c = ctx.cfg.calibration
    pre = attractor_points(ctx.spec, s.segments, seed=ctx.seed, h=ctx.h, n_orbits=s.segments)
    pool = pooled_segments(ctx, pre, s.t, None, s.window)
    b1 = math.log(c.lam0)
    rows, agree = [], True
    for d in pool:
        hyp = pliss_mask(d.a_log, b1)
        rec = recurrence_mask(d.in_W, c.beta)
        both = hyp & rec[1:]
        last = int(np.flatnonzero(both)[-1]) + 1 if both.any() else -1
        rows.append([d.seg_id, int(d.in_W[-1]), int(hyp.sum()), float(hyp.mean()),
                     int(rec.sum()), int(both.sum()), last])
        if d.seg_id < 20:
            agree &= all(hyp[m - 1] == hyperbolic_time_brute(d.a_log, m, c.lam0) for m in range(1, d.t + 1))
            agree &= all(rec[k] == recurrence_time_brute(d.in_W, k, c.beta) for k in range(d.t + 1))
    dens = np.array([r[3] for r in rows])
    res = {"segments": len(pool), "t": s.t, "lam0": c.lam0, "beta": c.beta,
           "density_quantiles": np.quantile(dens, [0, 0.05, 0.5, 1]).tolist(),
           "with_simultaneous_time": float(np.mean([r[5] > 0 for r in rows]))}
    cols = ["segment", "end_in_W", "hyperbolic_times", "density", "recurrence_times",
            "simultaneous_times", "last_simultaneous"]
    plot = ("set datafile separator ','\nset xlabel 'density'\nset ylabel 'count'\n"
            "bin(x) = 0.02*floor(x/0.02)\n"
            "plot 'pliss_segments.csv' every ::2 using (bin($4)):(1) smooth freq with boxes notitle\n")
    return Outcome(res, {"mask_matches_brute_force": bool(agree)}, {"segments": (cols, rows)}, plot)


# --------------------------------------------------------------------------
# pressure with cached separated sets

def cached_pressure(cache: Cache, key: dict, bundle: OrbitBundle, t_grid, deltas, eps=(0.0,),
                    probes: int = 0, seed: int = 0) -> PressureEstimate:
    """Pressure estimate whose separated sets are cached with their separation certificates.

    A cache hit is only accepted after every stored set is re-certified
    against ``bundle``: its exact minimal pair distance must match the
    certificate and exceed delta.
    """
    def compute():
        est = pressure_estimate(bundle, t_grid, deltas, eps, probes, seed, keep_sets=True)
        arrays = {"t_grid": est.t_grid, "deltas": est.deltas, "eps": est.eps,
                  "log_lambda": est.log_lambda, "slopes": est.slopes, "var_bound": est.var_bound}
        cert = {"potential": est.potential, "flags": est.flags, "sets": []}
        for i, (k, sep) in enumerate(sorted(est.sets.items())):
            arrays[f"set_{i}"] = np.asarray(sep.indices, np.int64)
            cert["sets"].append({"t": k[0], "delta": k[1], "eps": k[2], "min_distance": sep.min_distance})
        return arrays, cert

    def verify(arrays, cert):
        for i, c in enumerate(cert.get("sets", [])):
            idx = arrays.get(f"set_{i}")
            if idx is None:
                return False
            md = _certified_min_distance(bundle, idx, c["t"], c["delta"])
            if not (md > c["delta"] and (md == c["min_distance"] or
                                         math.isclose(md, c["min_distance"], rel_tol=1e-12))):
                return False
        return bool(cert.get("sets"))

    arrays, cert = cache.get_or_compute(key, compute, verify)
    return PressureEstimate(np.asarray(arrays["t_grid"]), np.asarray(arrays["deltas"]),
                            np.asarray(arrays["eps"]), np.asarray(arrays["log_lambda"]),
                            np.asarray(arrays["slopes"]), cert["potential"], list(cert["flags"]),
                            np.asarray(arrays["var_bound"]))


def monotone_in_delta_eps(est: PressureEstimate) -> bool:
    L = est.log_lambda
    # deltas are stored largest first: Lambda must not decrease along that axis
    ok_d = np.all(np.diff(L, axis=1) >= -1e-12) if L.shape[1] > 1 else True
    ok_e = np.all(np.diff(L, axis=2) >= -1e-12) if L.shape[2] > 1 else True
    return bool(ok_d and ok_e)


def _pressure_outcome(est: PressureEstimate, name: str, extra: dict) -> Outcome:
    rows = [list(r) for r in est.rows()]
    res = {"P": est.P, "slopes": est.slopes.tolist(), "deltas": est.deltas.tolist(),
           "eps": est.eps.tolist(), "t_grid": est.t_grid.tolist(), "potential": est.potential,
           "flags": est.flags, **extra}
    plot = est.gnuplot_script(f"{name}_pressure.csv")
    return Outcome(res, {"monotone_delta_eps": monotone_in_delta_eps(est)},
                   {"pressure": (["t", "delta", "eps", "logLambda"], rows)}, plot)


def _bundle_key(spec, pool_size, seed, h, t_max, stride):
    return {"kind": "flow-bundle", "spec": spec.key(), "pool": pool_size, "seed": seed, "h": h,
            "t_max": t_max, "stride": stride}


def _recording_stride(t_grid, h: float, candidates=(5, 4, 2, 1)) -> int:
    """Coarsest recording stride on which every grid time is a sample time."""
    for k in candidates:
        if all(abs(t / (h * k) - round(t / (h * k))) < 1e-9 for t in t_grid):
            return k
    raise ConfigurationError(f"pressure t_grid {list(t_grid)} is not on the step grid h={h}")


def run_pressure(ctx: Context) -> Outcome:
    s = ctx.cfg.pressure
    ctx.need_calibration()
    spec, h = ctx.spec, ctx.h
    phi = flow_potential(spec, s.potential, s.coef)
    t_max = float(max(s.t_grid))
    stride = _recording_stride(s.t_grid, h)
    bkey = _bundle_key(spec, s.pool, ctx.seed, h, t_max, stride)

    def build():
        pool = attractor_points(spec, s.pool, seed=ctx.seed, h=h, n_orbits=min(s.pool, 500))
        n_steps = int(round(t_max / h))
        n_steps += (-n_steps) % stride
        samples = integrate_batch(spec, pool, n_steps, h, stride)
        return {"points": pool, "samples": samples}, {"shape": list(samples.shape)}

    arrays, _ = ctx.cache.get_or_compute(bkey, build)
    samples = arrays["samples"]
    bundle = OrbitBundle(spec, arrays["points"], samples, phi(samples), h * stride, phi, h)
    pkey = {"kind": "pressure", "bundle": bkey, "potential": s.potential, "coef": s.coef,
            "t_grid": list(s.t_grid), "deltas": list(s.deltas), "eps": list(s.eps),
            "probes": s.probes, "seed": ctx.seed}
    est = cached_pressure(ctx.cache, pkey, bundle, s.t_grid, s.deltas, s.eps, s.probes, ctx.seed)
    out = _pressure_outcome(est, "pressure", {"pool": s.pool})
    if s.potential == "zero" and spec.family == "lorenz63":
        out.checks["entropy_positive"] = bool(est.P > 0.05)
    return out


def run_toyshift(ctx: Context) -> Outcome:
    s = ctx.cfg.toyshift
    system = ShiftSystem(s.window)
    words = system.random_words(s.words, s.length, ctx.seed)
    if s.potential:
        if s.clamp and len(s.clamp) != 2:
            raise ConfigurationError("toyshift.clamp takes two values: lo, hi")
        lo, hi = s.clamp if s.clamp else (-np.inf, np.inf)
        phi = Potential(cylinder_potential(s.potential, lo, hi, s.window), "user",
                        params={"coefficients": list(s.potential), "clamp": list(s.clamp)})
    else:
        phi = zero_potential()
    t_max = int(max(s.t_grid))
    bundle = shift_bundle(system, words, t_max, phi)
    key = {"kind": "toyshift", "window": s.window, "words": s.words, "length": s.length,
           "seed": ctx.seed, "t_grid": list(s.t_grid), "delta": s.delta, "eps": list(s.eps),
           "potential": list(s.potential), "clamp": list(s.clamp)}
    est = cached_pressure(ctx.cache, key, bundle, s.t_grid, (s.delta,), s.eps, 0, ctx.seed)
    out = _pressure_outcome(est, "toyshift", {"words": s.words, "reference_log2": math.log(2)})
    if not s.potential:
        lo, hi = TOY_SLOPE_RANGE
        out.checks["slope_near_log2"] = bool(lo <= est.P <= hi)
    return out


# --------------------------------------------------------------------------

def run_decompose(ctx: Context) -> Outcome:
    s = ctx.cfg.decompose
    N1 = s.N1 or ctx.need_calibration().N1
    dcfg = ctx.decomposition_config(N1)
    tubes = UnstableTubes(ctx.spec, s.tube_radius, s.tube_length)
    pre = attractor_points(ctx.spec, s.segments, seed=ctx.seed, h=ctx.h, n_orbits=s.segments)
    pool = pooled_segments(ctx, pre, s.t, tubes)
    labels = [decompose(d, dcfg) for d in pool]
    sums = g_ok = b2_ok = True
    b2_checked = 0
    rows = []
    for d, lab in zip(pool, labels):
        extra = ""
        if lab.kind == "D":
            sums &= lab.p + lab.g + lab.s == d.t
            g_ok &= G_membership(d.sub(lab.p, lab.p + lab.g), dcfg)[0]
        elif lab.kind == "B2":
            core = d.sub(lab.p, s_tilde(d))
            if pliss_mask(core.a_log, dcfg.b1).mean() > 1 - dcfg.kappa:
                b2_checked += 1
                b2_ok &= b2_fraction(d, lab) > dcfg.beta1
            extra = f"{b2_fraction(d, lab):.6f}"
        rows.append(lab.row() + [extra])
    counts = {k: sum(lab.kind == k for lab in labels) for k in ("D", "B1", "B2")}
    stats = bad_segment_visit_statistics(pool, labels, ctx.neighborhoods())
    res = {"segments": len(pool), "t": s.t, "N1": N1, "counts": counts,
           "b2_bound_checked": b2_checked, "visit_statistics": stats}
    checks = {"p_g_s_sum": bool(sums), "G_parts_in_G": bool(g_ok), "B2_frequency_bound": bool(b2_ok)}
    plot = ("set datafile separator ','\nset style data histogram\nset style fill solid\n"
            "plot 'decompose_labels.csv' every ::2 using 4:xtic(1) title 'g'\n")
    return Outcome(res, checks,
                   {"labels": (["segment_id", "class", "p", "g", "s", "reason", "b2_fraction"], rows)},
                   plot)


def _distortion_chunk(spec, t_values, coef, eps, n_leaf, n_random, seed, h, starts):
    phi = log_speed_clamped(spec, coef)
    reps = distortion_pool(spec, starts, t_values, phi, eps, n_leaf=n_leaf, n_random=n_random,
                           seed=seed, h=h)
    return [[(r.sup, r.admissible) for r in rs] for rs in reps]


def run_distortion(ctx: Context) -> Outcome:
    """Sup Birkhoff distortion inside Bowen balls for G segments and a non-G control pool."""
    s = ctx.cfg.distortion
    dc = ctx.cfg.decompose
    t_values = tuple(int(t) for t in s.t_values)
    T = max(t_values)
    dcfg = ctx.decomposition_config()
    tubes = UnstableTubes(ctx.spec, dc.tube_radius, dc.tube_length)
    pre = attractor_points(ctx.spec, s.candidates, seed=ctx.seed, h=ctx.h, n_orbits=s.candidates)
    pool = pooled_segments(ctx, pre, T, tubes)
    inG = np.array([[G_membership(d.sub(0, t), dcfg)[0] for t in t_values] for d in pool])
    G = np.flatnonzero(inG.all(axis=1))[: s.segments]
    # control: the segments furthest from G (fewest G prefixes, then most W visits)
    others = np.flatnonzero(~inG.all(axis=1))
    visits = np.array([d.in_W.sum() for d in pool])
    order = np.lexsort((others, -visits[others], inG[others].sum(axis=1)))
    ctrl = others[order][: s.segments]
    groups = {"G": G, "control": ctrl}
    fn = partial(_distortion_chunk, ctx.spec, t_values, s.coef, s.eps, s.n_leaf, s.n_random,
                 ctx.seed, ctx.h)
    rows, sup = [], {}
    for name, ids in groups.items():
        jobs = [pre[ids[a:b]] for a, b in chunks(len(ids), 10)]
        vals = [v for part in parallel_map(fn, jobs, ctx.workers) for v in part]
        per = np.array([[v[0] for v in reps] for reps in vals]).reshape(len(ids), len(t_values))
        sup[name] = per.max(axis=0) if len(ids) else np.zeros(len(t_values))
        for i, reps in zip(ids, vals):
            for t, (sv, adm) in zip(t_values, reps):
                rows.append([name, int(i), t, int(adm), float(sv)])
    a, b = t_values.index(20) if 20 in t_values else 0, len(t_values) - 1
    ratio = {k: float(v[b] / v[a]) if v[a] > 0 else math.inf for k, v in sup.items()}
    res = {"eps": s.eps, "potential": "log-speed-clamped", "coef": s.coef, "t_values": list(t_values),
           "G_segments": int(len(G)), "control_segments": int(len(ctrl)),
           "sup": {k: v.tolist() for k, v in sup.items()}, "growth_ratio": ratio,
           "ratio_times": [t_values[a], t_values[b]]}
    checks = {"enough_G_segments": len(G) >= s.segments,
              "G_plateau": ratio["G"] <= 1.5,
              "control_grows": ratio["control"] > 3.0}
    plot = ("set datafile separator ','\nset xlabel 't'\nset ylabel 'distortion'\nset logscale y\n"
            "plot 'distortion_reports.csv' every ::2 using 3:(stringcolumn(1) eq 'G' ? $5 : 1/0) "
            "title 'G', '' every ::2 using 3:(stringcolumn(1) eq 'control' ? $5 : 1/0) title 'control'\n")
    return Outcome(res, checks,
                   {"reports": (["group", "candidate", "t", "admissible", "sup"], rows)}, plot)


def _gluing_job(spec, delta, tau_max, pool, max_candidates, refine_count, seed, h, job):
    segs = [(np.asarray(x), t) for x, t in job]
    r = specification_search(spec, segs, delta, tau_max, pool=pool, seed=seed, h=h,
                             max_candidates=max_candidates, refine_count=refine_count)
    return bool(r.success), float(max(r.distances)), [float(v) for v in r.taus]


def run_spec_search(ctx: Context) -> Outcome:
    s = ctx.cfg.spec_search
    dc = ctx.cfg.decompose
    spec, h = ctx.spec, ctx.h
    pool = attractor_points(spec, s.pool, seed=ctx.seed, h=h, spacing=0.05, n_orbits=200)
    tubes = UnstableTubes(spec, dc.tube_radius, dc.tube_length)
    outside = pool[~tubes(pool)]
    bp = tubes.branch_points
    centres = np.array([sg.point for sg in spec.active_singularities]).reshape(-1, spec.dim)
    dist = np.min(np.linalg.norm(bp[:, None] - centres[None], axis=-1), axis=1) if len(centres) else 0
    inside = bp[(dist > 0.5) & (dist < 3.0)]
    if len(inside) == 0 or len(outside) == 0:
        raise ConfigurationError("cannot form matched inside/outside start pools for this system")
    rng = np.random.default_rng(ctx.seed + 1)
    jobs, tags = [], []
    for i in range(s.pairs):
        a = outside[rng.integers(len(outside))]
        b_out = outside[rng.integers(len(outside))]
        b_in = inside[rng.integers(len(inside))]
        jobs += [[(a, s.t), (b_out, s.t)], [(a, s.t), (b_in, s.t)]]
        tags += [("outside", i), ("inside", i)]
    fn = partial(_gluing_job, spec, s.delta, s.tau_max, pool, s.max_candidates, s.refine_count,
                 ctx.seed, h)
    single = fn([(outside[0], s.t)])
    po = find_periodic_orbit(spec, t=100.0)
    periodic = fn([(po.point, po.period), (po.point, po.period)])
    results = parallel_map(fn, jobs, ctx.workers)
    rows = [[g, i, int(ok), gap, *(taus or [""])] for (g, i), (ok, gap, taus) in zip(tags, results)]
    rate = {g: float(np.mean([r[0] for (gg, _), r in zip(tags, results) if gg == g]))
            for g in ("outside", "inside")}
    res = {"delta": s.delta, "t": s.t, "tau_max": s.tau_max, "pairs": s.pairs,
           "success_rate": rate, "single_segment": single[0],
           "periodic": {"point": po.point.tolist(), "period": po.period, "defect": po.defect,
                        "success": periodic[0], "max_distance": periodic[1]}}
    checks = {"k1_succeeds": single[0], "periodic_self_gluing": periodic[0],
              "inside_below_outside": rate["inside"] < rate["outside"]}
    plot = ("set datafile separator ','\nset xlabel 'pair'\nset ylabel 'max Bowen distance'\n"
            "plot 'spec_search_pairs.csv' every ::2 using 2:(stringcolumn(1) eq 'outside' ? $4 : 1/0) "
            "title 'outside', '' every ::2 using 2:(stringcolumn(1) eq 'inside' ? $4 : 1/0) title 'inside'\n")
    return Outcome(res, checks, {"pairs": (["group", "pair", "success", "max_distance", "tau"], rows)}, plot)


SCENARIO_FUNCS = {
    "calibrate": run_calibrate, "simulate": run_simulate, "splitting": run_splitting,
    "pliss": run_pliss, "pressure": run_pressure, "decompose": run_decompose,
    "distortion": run_distortion, "spec-search": run_spec_search, "toyshift": run_toyshift,
}


# --------------------------------------------------------------------------
# persistence

def _stamp(cfg_hash: str, cal_hash: Optional[str]) -> str:
    return f"# config_hash={cfg_hash} calibration_hash={cal_hash or 'none'}\n"


def write_outcome(cfg: RunConfig, name: str, out: Outcome, cal_hash: Optional[str]) -> list:
    """Write <stem>.json, one CSV per table and <stem>.gp; returns the paths."""
    d = cfg.out_dir
    d.mkdir(parents=True, exist_ok=True)
    stem = name.replace("-", "_")
    doc = {"scenario": name, "config_hash": cfg.hash, "calibration_hash": cal_hash,
           "config": cfg.canonical(), "result": out.result,
           "checks": {k: bool(v) for k, v in out.checks.items()}}
    paths = [d / f"{stem}.json"]
    paths[0].write_text(json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n")
    for tname, (cols, rows) in out.tables.items():
        p = d / f"{stem}_{tname}.csv"
        with open(p, "w") as fh:
            fh.write(_stamp(cfg.hash, cal_hash))
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(_cell(v) for v in r) + "\n")
        paths.append(p)
    if out.plot:
        p = d / f"{stem}.gp"
        p.write_text(_stamp(cfg.hash, cal_hash) + out.plot)
        paths.append(p)
    return paths


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.12g" % v
    return str(v)


def run_scenario(cfg: RunConfig, name: Optional[str] = None):
    """Run one scenario and write its artifacts; returns (Outcome, written paths, cache)."""
    name = name or cfg.run.scenario
    if name not in SCENARIO_FUNCS:
        raise ConfigurationError(f"unknown scenario {name!r}")
    spec = cfg.system.build()
    ctx = Context(cfg, spec, Cache(Path(cfg.out_dir) / "cache"))
    out = SCENARIO_FUNCS[name](ctx)
    cal_hash = ctx.calibration.hash if ctx.calibration is not None else None
    # cache statistics stay out of the result files, which must not depend on cache state
    return out, write_outcome(cfg, name, out, cal_hash), ctx.cache
