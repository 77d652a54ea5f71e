"""Stable leaves by graph transform, Bowen distortion, gluing search and cu-disk growth.

Stable leaves live in normal planes.  At a base point x the leaf is the graph
of a function g over the E^s_N coordinate, sampled on a uniform grid, with
values in the F^cu_N coordinate (both measured along unit vectors of the
estimated splitting, which need not be orthogonal).  The graph at x_k is
obtained from the graph at x_{k+1} by asking that the unit-time sectional
Poincare image of (u, g_k(u)) lands on the graph at x_{k+1}.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cones import splitting_series
from .errors import ConfigurationError, HyperbolicityTooWeakError
from .flow import (VectorFieldSpec, advance, attractor_points, evaluate_field, integrate_batch,
                   integrate_orbit, rk4_step)
from .poincare import TubularParams, section_hit, shadow_batch, unit_cocycles
from .pressure import Potential, _trapezoid_cum

GRID = 17
CONVERGED = 1e-6
SCHEDULE = (2, 4, 8, 16, 30)


# --------------------------------------------------------------------------
# stable leaves

@dataclass
class StableLeaf:
    base: np.ndarray
    grid: np.ndarray        # E-coordinates u_i
    values: np.ndarray      # F-coordinates g(u_i)
    E: np.ndarray           # ambient unit vectors spanning the coordinates
    F: np.ndarray
    alpha: float
    residual: float
    iterations: int
    residual_history: list = field(default_factory=list)

    @property
    def slope(self) -> float:
        du = np.diff(self.grid)
        return float(np.max(np.abs(np.diff(self.values)) / du)) if len(du) else 0.0

    def points(self, u=None) -> np.ndarray:
        """Ambient points of the leaf at E-coordinates ``u`` (default: the grid)."""
        if u is None:
            u, g = self.grid, self.values
        else:
            u = np.asarray(u, float)
            g = np.interp(u, self.grid, self.values)
        return self.base + u[:, None] * self.E + g[:, None] * self.F

    def to_json(self) -> str:
        return json.dumps({"base": self.base.tolist(), "grid": self.grid.tolist(),
                           "values": self.values.tolist(), "alpha": self.alpha,
                           "slope": self.slope, "residual": self.residual,
                           "iterations": self.iterations})


@dataclass
class OrbitFrames:
    """Unit-grid orbit with ambient splitting vectors, batched over base points."""
    points: np.ndarray  # (B, L, n)
    E: np.ndarray       # (B, L, n)
    F: np.ndarray
    speeds: np.ndarray  # (B, L)
    a_log: np.ndarray   # (B, L-1) log m(psi*_1 | F) per unit step


def orbit_frames(spec: VectorFieldSpec, pre_starts, n_levels: int, window: int = 6,
                 h: float = 0.005) -> OrbitFrames:
    """Splitting along x_0..x_{n_levels-1}, where x_0 lies ``window + 1`` units after each pre-start."""
    X0 = np.atleast_2d(np.asarray(pre_starts, float))
    pre = window + 1
    coc = unit_cocycles(spec, X0, pre + n_levels + window + 1, h)
    idx = np.arange(pre, pre + n_levels)
    E, F, _, _ = splitting_series(coc, window, 1, idx)
    Bk = coc.frames.bases[:, idx]
    Ea = (Bk @ E)[..., 0]
    Fa = (Bk @ F)[..., 0]
    Ea /= np.linalg.norm(Ea, axis=-1, keepdims=True)
    Fa /= np.linalg.norm(Fa, axis=-1, keepdims=True)
    A = coc.psi_star[:, idx[:-1]]
    a_log = np.log(np.linalg.svd(A @ F[:, :-1], compute_uv=False)[..., -1])
    return OrbitFrames(coc.points[:, idx], Ea, Fa, coc.speeds[:, idx], a_log)


def _unit_map(spec, Y, target, h, window):
    """Unit-time sectional map onto N(target) for rows of Y (NaN where the hit fails)."""
    Z = advance(spec, Y, 1.0, h)
    pts, _, ok = section_hit(spec, Z, target, evaluate_field(spec, target), h, window)
    return pts


def _coords(D, E, F):
    """Solve D = a E + b F in the least-squares sense (rows)."""
    M = np.stack([E, F], axis=-1)  # (..., n, 2)
    sol = np.linalg.lstsq(M, D[..., None], rcond=None)[0] if D.ndim == 1 else \
        np.einsum("...ij,...j->...i", np.linalg.pinv(M), D)
    return sol[..., 0], sol[..., 1]


def _interp_rows(g, R, a):
    """Piecewise-linear evaluation of graphs g (B, G) on [-R, R] at a (B, G), linear extrapolation."""
    G = g.shape[-1]
    pos = (a / R[:, None] + 1.0) * 0.5 * (G - 1)
    i = np.clip(np.floor(np.nan_to_num(pos)).astype(int), 0, G - 2)
    fr = pos - i
    g0 = np.take_along_axis(g, i, axis=-1)
    g1 = np.take_along_axis(g, i + 1, axis=-1)
    return g0 + fr * (g1 - g0)


def _graph_sweep(spec, fr: OrbitFrames, rho: np.ndarray, N: int, h: float, window: float,
                 start: Optional[np.ndarray] = None):
    """Pull a graph at level N back to level 0; returns graphs at levels 0..N."""
    B = fr.points.shape[0]
    unit = np.linspace(-1.0, 1.0, GRID)
    g = np.zeros((B, GRID)) if start is None else start
    out = [g]
    for k in range(N - 1, -1, -1):
        Rk = rho * fr.speeds[:, k]
        Rk1 = rho * fr.speeds[:, k + 1]
        u = Rk[:, None] * unit
        xk = fr.points[:, k][:, None, :]
        tgt = np.broadcast_to(fr.points[:, k + 1][:, None, :], (B, GRID, spec.dim)).reshape(-1, spec.dim)
        Ek, Fk = fr.E[:, k][:, None, :], fr.F[:, k][:, None, :]
        Ek1 = np.broadcast_to(fr.E[:, k + 1][:, None, :], (B, GRID, spec.dim))
        Fk1 = np.broadcast_to(fr.F[:, k + 1][:, None, :], (B, GRID, spec.dim))

        def resid(w):
            Y = (xk + u[..., None] * Ek + w[..., None] * Fk).reshape(-1, spec.dim)
            P = _unit_map(spec, Y, tgt, h, window).reshape(B, GRID, spec.dim)
            a, b = _coords(P - fr.points[:, k + 1][:, None, :], Ek1, Fk1)
            return b - _interp_rows(g, Rk1, a)

        # secant iteration; the F-direction is expanded, so the residual is steep in w
        w0 = np.zeros((B, GRID))
        w1 = np.full((B, GRID), 1e-6) * Rk[:, None]
        r0, r1 = resid(w0), resid(w1)
        for _ in range(8):
            den = r1 - r0
            safe = np.abs(den) > 1e-300
            w2 = np.where(safe, w1 - r1 * (w1 - w0) / np.where(safe, den, 1.0), w1)
            w0, r0 = w1, r1
            w1 = w2
            r1 = resid(w1)
            if np.all(np.abs(r1[np.isfinite(r1)]) < 1e-13 * (1 + Rk1.max())):
                break
        g = w1
        out.append(g)
    return out[::-1]


def stable_leaves(spec: VectorFieldSpec, pre_starts, radius_scaled: float = 0.1, alpha: float = 0.1,
                  iterations: int = 30, window: int = 6, h: float = 0.005,
                  hit_window: float = 0.3):
    """Batched graph transform at the points ``window + 1`` units after each pre-start.

    ``radius_scaled`` is the leaf radius in units of |X(x)|.  Returns
    (leaves, frames).  A leaf whose residual increased twice before
    converging is returned with ``residual = inf``.
    """
    sched = [n for n in SCHEDULE if n < iterations] + [iterations]
    fr = orbit_frames(spec, pre_starts, iterations + 2, window, h)
    B = fr.points.shape[0]
    rho = np.full(B, float(radius_scaled))
    best = None
    hist = []
    done = np.zeros(B, bool)
    final_res = np.full(B, np.inf)
    final_g = np.zeros((B, GRID))
    final_n = np.zeros(B, int)
    ups = np.zeros(B, int)
    prev = np.full(B, np.inf)
    for N in sched:
        gs = _graph_sweep(spec, fr, rho, N, h, hit_window)
        gs1 = _graph_sweep(spec, fr, rho, N + 1, h, hit_window)
        res = np.max(np.abs(gs[0] - gs1[0]), axis=-1)
        res = np.where(np.isfinite(res), res, np.inf)
        hist.append(res)
        ups = ups + ((res > prev) & ~done)
        prev = res
        newly = ~done & (res < CONVERGED)
        final_res[~done] = res[~done]
        final_g[~done] = gs1[0][~done]
        final_n[~done] = N + 1
        done |= newly
        if done.all():
            break
    weak = ups >= 2
    unit = np.linspace(-1.0, 1.0, GRID)
    leaves = []
    for b in range(B):
        R = rho[b] * fr.speeds[b, 0]
        leaves.append(StableLeaf(fr.points[b, 0], R * unit, final_g[b], fr.E[b, 0], fr.F[b, 0],
                                 alpha, float("inf") if weak[b] else float(final_res[b]),
                                 int(final_n[b]), [float(r[b]) for r in hist]))
    return leaves, fr


def stable_leaf_graph_transform(spec: VectorFieldSpec, pre_start, radius_scaled: float = 0.1,
                                alpha: float = 0.1, iterations: int = 30, window: int = 6,
                                h: float = 0.005) -> StableLeaf:
    """Single-point version; raises when the transform fails to contract."""
    leaves, _ = stable_leaves(spec, np.asarray(pre_start, float)[None], radius_scaled, alpha,
                              iterations, window, h)
    leaf = leaves[0]
    if not math.isfinite(leaf.residual):
        raise HyperbolicityTooWeakError(
            f"graph-transform residual increased twice (history {leaf.residual_history})")
    return leaf


def leaf_invariance_defect(spec: VectorFieldSpec, leaf: StableLeaf, next_leaf: StableLeaf,
                           x_next, h: float = 0.005, window: float = 0.3) -> float:
    """Sup distance (F-coordinate) between the unit-map image of a leaf and the leaf at x_1."""
    P = _unit_map(spec, leaf.points(), np.broadcast_to(x_next, leaf.points().shape), h, window)
    a, b = _coords(P - x_next, np.broadcast_to(next_leaf.E, P.shape), np.broadcast_to(next_leaf.F, P.shape))
    return float(np.max(np.abs(b - np.interp(a, next_leaf.grid, next_leaf.values))))


def forward_attraction(spec: VectorFieldSpec, fr: OrbitFrames, leaves: Sequence[StableLeaf],
                       steps: int = 5, h: float = 0.005, window: float = 0.3) -> np.ndarray:
    """Normal-plane distances |P^k(y) - x_k| for the two leaf end points, shape (B, 2, steps+1)."""
    B = len(leaves)
    Y = np.stack([lf.points()[[0, -1]] for lf in leaves])  # (B, 2, n)
    out = np.empty((B, 2, steps + 1))
    out[:, :, 0] = np.linalg.norm(Y - fr.points[:, 0][:, None], axis=-1)
    for k in range(1, steps + 1):
        tgt = np.broadcast_to(fr.points[:, k][:, None], Y.shape).reshape(-1, spec.dim)
        Y = _unit_map(spec, Y.reshape(-1, spec.dim), tgt, h, window).reshape(B, 2, spec.dim)
        out[:, :, k] = np.linalg.norm(Y - fr.points[:, k][:, None], axis=-1)
    return out


# --------------------------------------------------------------------------
# Bowen distortion

def leaf_chain(spec: VectorFieldSpec, pre_starts, n_levels: int, radius_scaled=0.025,
               window: int = 6, lead: int = 6, h: float = 0.005, hit_window: float = 0.3,
               radius_abs: Optional[float] = None):
    """Stable-leaf graphs at x_0..x_{n_levels} from one sweep started ``lead`` levels further on.

    The leaf radius at x_k is rho |X(x_k)|; with ``radius_abs`` rho is chosen
    per base point so that the radius at x_0 equals that value.
    Returns (graphs (B, n_levels+1, GRID), frames, rho).
    """
    fr = orbit_frames(spec, pre_starts, n_levels + lead + 1, window, h)
    B = fr.points.shape[0]
    if radius_abs is not None:
        rho = float(radius_abs) / fr.speeds[:, 0]
    else:
        rho = np.full(B, float(radius_scaled))
    gs = _graph_sweep(spec, fr, rho, n_levels + lead, h, hit_window)
    return np.stack(gs[: n_levels + 1], axis=1), fr, rho


@dataclass
class DistortionReport:
    base: list
    potential: str
    eps: float
    t: float
    companions: int
    admissible: int
    sup: float
    flags: list  # per companion: stayed inside B_t(x, eps)
    strategy: list = field(default_factory=list)  # "leaf" or "normal" per companion
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _pin(P, xk, E, F, g, R):
    """Replace the F-coordinate of P (relative to xk) by the leaf value g(a)."""
    a, _ = _coords(P - xk, E, F)
    b = _interp_rows(g, R, a)
    return xk + a[..., None] * E + b[..., None] * F


def _leaf_pseudo_orbits(spec, fr, graphs, rho, units, T, h, hit_window):
    """Unit-time sectional images of leaf points, re-pinned to the leaf at every level.

    ``units`` are E-coordinates at x_0 in units of the leaf radius.  Returns
    (pinned points (B, C, T+1, n), cumulative time drift c_k (B, C, T+1)).
    """
    B, C = graphs.shape[0], len(units)
    n = spec.dim
    pts = np.empty((B, C, T + 1, n))
    drift = np.zeros((B, C, T + 1))
    R0 = rho * fr.speeds[:, 0]
    u0 = R0[:, None] * np.asarray(units)[None, :]
    g0 = _interp_rows(graphs[:, 0], R0, u0)
    p = fr.points[:, 0][:, None] + u0[..., None] * fr.E[:, 0][:, None] + g0[..., None] * fr.F[:, 0][:, None]
    pts[:, :, 0] = p
    for k in range(T):
        Z = advance(spec, p.reshape(-1, n), 1.0, h)
        tgt = np.broadcast_to(fr.points[:, k + 1][:, None], (B, C, n)).reshape(-1, n)
        P, tau, ok = section_hit(spec, Z, tgt, evaluate_field(spec, tgt), h, hit_window)
        P = P.reshape(B, C, n)
        Rk1 = rho * fr.speeds[:, k + 1]
        xk1 = fr.points[:, k + 1][:, None]
        p = _pin(P, xk1, fr.E[:, k + 1][:, None], fr.F[:, k + 1][:, None], graphs[:, k + 1], Rk1)
        pts[:, :, k + 1] = p
        drift[:, :, k + 1] = drift[:, :, k] + np.where(ok, tau, np.nan).reshape(B, C)
    return pts, drift


def distortion_pool(spec: VectorFieldSpec, pre_starts, t_values: Sequence[int], phi: Potential,
                    eps: float, n_leaf: int = 32, n_random: int = 32,
                    seed: int = 0, window: int = 6, h: float = 0.005, hit_window: float = 0.3) -> list:
    """Distortion reports for the points ``window + 1`` units after each pre-start.

    Leaf companions are ``n_leaf`` evenly spaced points of the stable leaf of
    radius eps/2.  Their orbits are built piecewise: each unit-time
    piece starts on the leaf of x_k and its sectional image is re-pinned to
    the leaf of x_{k+1}, which keeps round-off in the expanding direction
    from growing like e^{lambda t}.  Each piece is shifted by the asymptotic
    phase so that companion and base are compared at equal times.  Normal
    companions are ``n_random`` free orbits from normal-plane perturbations at
    radius eps/2.  Only companions whose h-grid distance to x stays below eps
    on [0, t] enter the supremum.
    """
    T = int(max(t_values))
    graphs, fr, rho = leaf_chain(spec, pre_starts, T, window=window, h=h, hit_window=hit_window,
                                 radius_abs=0.5 * eps)
    B, n = fr.points.shape[0], spec.dim
    # evenly spaced leaf points over the eps/2 leaf, the centre excluded
    units = np.linspace(-1.0, 1.0, n_leaf + 1)
    units = units[np.abs(units) > 1e-12] if n_leaf % 2 == 0 else units[1:]
    C = len(units) if n_leaf else 0
    stepsize = int(round(1.0 / h))
    if C:
        pinned, drift = _leaf_pseudo_orbits(spec, fr, graphs, rho, units, T, h, hit_window)
        c_inf = drift[..., -1:]
        delta = np.nan_to_num(c_inf - drift)  # shift so that piece k starts at the base time k
    rng = np.random.default_rng(seed)
    e = fr.points[:, 0]
    Xf = evaluate_field(spec, e)
    d_hat = Xf / np.linalg.norm(Xf, axis=-1, keepdims=True)
    V = rng.normal(size=(B, n_random, n))
    V -= np.einsum("bcn,bn->bc", V, d_hat)[..., None] * d_hat[:, None]
    V /= np.linalg.norm(V, axis=-1, keepdims=True)
    free = e[:, None] + 0.5 * eps * V
    Phi_x = np.zeros((B, T + 1))
    Phi_c = np.zeros((B, C + n_random, T + 1))
    runmax = np.zeros((B, C + n_random, T + 1))
    d0 = np.linalg.norm(np.concatenate([pinned[:, :, 0] if C else np.zeros((B, 0, n)), free], axis=1)
                        - e[:, None], axis=-1)
    runmax[:, :, 0] = d0
    cur_free = free
    for k in range(T):
        x = fr.points[:, k]
        if C:
            z = pinned[:, :, k].reshape(-1, n)
            dk = delta[:, :, k].reshape(-1)
            z = rk4_step(spec, z, dk[:, None])
            z = z.reshape(B, C, n)
            Y = np.concatenate([z, cur_free], axis=1)
        else:
            Y = cur_free
        px = phi(x)
        py = phi(np.nan_to_num(Y))
        accx = np.zeros(B)
        accy = np.zeros(Y.shape[:2])
        rm = runmax[:, :, k].copy()
        for _ in range(stepsize):
            x = rk4_step(spec, x, h)
            Y = rk4_step(spec, Y, h)
            pxn, pyn = phi(x), phi(np.nan_to_num(Y))
            accx += 0.5 * h * (px + pxn)
            accy += 0.5 * h * (py + pyn)
            px, py = pxn, pyn
            dist = np.linalg.norm(Y - x[:, None], axis=-1)
            rm = np.maximum(rm, np.where(np.isfinite(dist), dist, np.inf))
        Phi_x[:, k + 1] = Phi_x[:, k] + accx
        Phi_c[:, :, k + 1] = Phi_c[:, :, k] + accy
        runmax[:, :, k + 1] = rm
        cur_free = np.where(np.isfinite(Y[:, C:]), Y[:, C:], np.nan)
    out = []
    strategy = ["leaf"] * C + ["normal"] * n_random
    for b in range(B):
        reps = []
        for t in t_values:
            inside = runmax[b, :, t] < eps
            diff = np.abs(Phi_c[b, :, t] - Phi_x[b, t])
            sup = float(diff[inside].max()) if inside.any() else 0.0
            reps.append(DistortionReport(fr.points[b, 0].tolist(), phi.tag, eps, float(t), C + n_random,
                                         int(inside.sum()), sup, inside.tolist(), strategy,
                                         not inside.any()))
        out.append(reps)
    return out


def bowen_distortion(spec: VectorFieldSpec, pre_start, t_values: Sequence[int], phi: Potential, eps: float,
                     **kw) -> list:
    """Single-segment wrapper of :func:`distortion_pool`."""
    return distortion_pool(spec, np.asarray(pre_start, float)[None], t_values, phi, eps, **kw)[0]


# --------------------------------------------------------------------------
# specification (gluing) search

@dataclass
class GluingResult:
    segments: list          # [(x_j, t_j)]
    y: Optional[list]
    taus: list
    distances: list         # per-segment Bowen distances
    delta: float
    tau_max: float
    success: bool
    candidates_tried: int = 0

    @property
    def max_gap(self) -> float:
        return max(self.taus) if self.taus else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["segments"] = [[list(map(float, x)), float(t)] for x, t in self.segments]
        d["max_gap"] = self.max_gap
        return json.dumps(d)


def glued_distances(spec: VectorFieldSpec, y, segments, taus, h: float = 0.005) -> list:
    """Recompute d_{t_j}(f_{s_{j-1} + tau_{j-1}} y, x_j) from scratch."""
    y = np.asarray(y, float)
    out = []
    cur = y
    for j, (xj, tj) in enumerate(segments):
        if j > 0:
            cur = advance(spec, cur[None], float(taus[j - 1]), h)[0]
        a = integrate_orbit(spec, cur, tj, h).samples
        b = integrate_orbit(spec, np.asarray(xj, float), tj, h).samples
        out.append(float(np.max(np.linalg.norm(a - b, axis=-1))))
        cur = a[-1]
    return out


def _best_gap(spec, Y, x_next, t_next, tau_max, h, coarse=4):
    """For each row, the transition time in [0, tau_max] minimising d_{t_next}(f_tau y, x_next).

    Returns (tau, dist) on the h-grid: a coarse scan every ``coarse`` steps
    refined to single steps around the coarse optimum.
    """
    K = int(round(tau_max / h))
    L = int(round(t_next / h))
    xs = integrate_batch(spec, np.asarray(x_next, float)[None], L, h)[0]  # (L+1, n)
    orb = integrate_batch(spec, Y, K + L, h, on_blowup="nan")           # (M, K+L+1, n)
    M = len(Y)
    starts = np.arange(0, K + 1, coarse)
    best = np.full(M, np.inf)
    arg = np.zeros(M, int)
    for s in starts:
        d = np.max(np.linalg.norm(orb[:, s:s + L + 1] - xs, axis=-1), axis=1)
        better = d < best
        best[better], arg[better] = d[better], s
    fine_best, fine_arg = best.copy(), arg.copy()
    for off in range(-coarse + 1, coarse):
        s = np.clip(arg + off, 0, K)
        idx = s[:, None] + np.arange(L + 1)
        seg = np.take_along_axis(orb, idx[..., None], axis=1)
        d = np.max(np.linalg.norm(seg - xs, axis=-1), axis=1)
        better = d < fine_best
        fine_best[better], fine_arg[better] = d[better], s[better]
    return fine_arg * h, np.where(np.isfinite(fine_best), fine_best, np.inf)


def specification_search(spec: VectorFieldSpec, segments, delta: float, tau_max: float,
                         pool: Optional[np.ndarray] = None, pool_size: int = 100_000, seed: int = 0,
                         h: float = 0.005, refine_rounds: int = 2, refine_count: int = 200,
                         max_candidates: int = 400) -> GluingResult:
    """Brute-force gluing orbit for up to four segments (x_j, t_j).

    Candidates are pool points near x_1 (plus local refinement around the
    best one); transition times are chosen greedily, segment by segment.
    Durations and transition times live on the h-grid.
    """
    # durations are snapped to the step grid so that stored and recomputed distances agree
    segments = [(np.asarray(x, float), round(float(t) / h) * h) for x, t in segments]
    if not 1 <= len(segments) <= 4:
        raise ConfigurationError("specification search handles 1..4 segments")
    if len(segments) == 1:
        x1, t1 = segments[0]
        return GluingResult(segments, x1.tolist(), [], [0.0], delta, tau_max, True, 1)
    rng = np.random.default_rng(seed)
    x1, t1 = segments[0]
    if pool is None:
        pool = attractor_points(spec, pool_size, seed=seed, h=h, spacing=0.05, n_orbits=500)
    tree = cKDTree(pool)
    near = tree.query_ball_point(x1, delta)
    cand = pool[near][:max_candidates] if near else np.zeros((0, spec.dim))
    cand = np.vstack([x1[None], cand])

    def evaluate(C):
        """Greedy gluing for a batch of candidates: (taus, dists) arrays."""
        n1 = int(round(t1 / h))
        o = integrate_batch(spec, C, n1, h, on_blowup="nan")
        xo = integrate_orbit(spec, x1, t1, h).samples
        d1 = np.max(np.linalg.norm(o - xo, axis=-1), axis=1)
        d1 = np.where(np.isfinite(d1), d1, np.inf)
        dists = [d1]
        taus = []
        cur = o[:, -1]
        for xj, tj in segments[1:]:
            tau, dj = _best_gap(spec, cur, xj, tj, tau_max, h)
            taus.append(tau)
            dists.append(dj)
            cur = np.array([advance(spec, c[None], ta + tj, h)[0] for c, ta in zip(cur, tau)])
        return np.stack(taus, 1), np.stack(dists, 1)

    taus, dists = evaluate(cand)
    tried = len(cand)
    score = dists.max(axis=1)
    for r in range(refine_rounds):
        b = int(np.argmin(score))
        scale = delta * 0.1 ** (r + 1)
        extra = cand[b] + rng.normal(scale=scale, size=(refine_count, spec.dim))
        t2, d2 = evaluate(extra)
        tried += len(extra)
        cand = np.vstack([cand, extra])
        taus = np.vstack([taus, t2])
        dists = np.vstack([dists, d2])
        score = dists.max(axis=1)
    b = int(np.argmin(score))
    ok = bool(score[b] < delta)
    return GluingResult(segments, cand[b].tolist(), [float(v) for v in taus[b]],
                        [float(v) for v in dists[b]], delta, tau_max, ok, tried)


# --------------------------------------------------------------------------
# periodic orbits by close returns

@dataclass
class PeriodicOrbit:
    point: np.ndarray
    period: float
    defect: float  # |f_T(p) - p| after polishing


def _section_crossings(spec, x0, t, h, level, axis):
    seg = integrate_orbit(spec, x0, t, h)
    s = seg.samples
    g = s[:, axis] - level
    v = evaluate_field(spec, s)[:, axis]
    idx = np.flatnonzero((g[:-1] < 0) & (g[1:] >= 0))
    pts, times = [], []
    for i in idx:
        w = -g[i] / (g[i + 1] - g[i])
        pts.append(s[i] + w * (s[i + 1] - s[i]))
        times.append(seg.times[i] + w * seg.steps[i])
    return np.asarray(pts), np.asarray(times)


def _return_map(spec, p, level, axis, h, n_returns=1, max_time=20.0):
    """Flow p (on the section) to its n-th upward return; returns (point, time)."""
    x = np.array(p, float)
    t = 0.0
    count = 0
    g_prev = x[axis] - level
    # leave the section first
    for _ in range(int(max_time / h)):
        xn = rk4_step(spec, x, h)
        g = xn[axis] - level
        if g_prev < 0 <= g and t > 0:
            # refine the crossing by bisection on the step length
            lo, hi = 0.0, h
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                if rk4_step(spec, x, mid)[axis] - level < 0:
                    lo = mid
                else:
                    hi = mid
            count += 1
            if count == n_returns:
                return rk4_step(spec, x, 0.5 * (lo + hi)), t + 0.5 * (lo + hi)
        x, g_prev, t = xn, g, t + h
    raise ConfigurationError("no return to the section within the time limit")


def find_periodic_orbit(spec: VectorFieldSpec, x0=None, t: float = 200.0, h: float = 0.002,
                        level: Optional[float] = None, axis: int = 0, max_returns: int = 2,
                        tol: float = 1e-9, min_sep: float = 2.0) -> PeriodicOrbit:
    """Close-return search on an upward section crossing, then Newton on the return map.

    Crossings within ``min_sep`` of a singularity are ignored, so that the
    search does not settle on an equilibrium lying on the section.
    """
    if x0 is None:
        x0 = attractor_points(spec, 1, seed=0)[0]
    if level is None:
        level = 0.0
    pts, times = _section_crossings(spec, x0, t, h, level, axis)
    if len(pts) < max_returns + 2:
        raise ConfigurationError("too few section crossings for a close-return search")
    sing = np.array([sg.point for sg in spec.singularities]).reshape(-1, spec.dim)
    far = np.ones(len(pts), bool)
    for q in sing:
        far &= np.linalg.norm(pts - q, axis=1) > min_sep
    best = (np.inf, 0, 1)
    for m in range(1, max_returns + 1):
        d = np.linalg.norm(pts[m:] - pts[:-m], axis=1)
        d = np.where(far[m:] & far[:-m], d, np.inf)
        i = int(np.argmin(d))
        if d[i] < best[0]:
            best = (float(d[i]), i, m)
    _, i, m = best
    free = [a for a in range(spec.dim) if a != axis]
    u = pts[i][free].copy()

    def embed(v):
        p = np.empty(spec.dim)
        p[free] = v
        p[axis] = level
        return p

    def G(v):
        q, T = _return_map(spec, embed(v), level, axis, h, m)
        return q[free] - v, T

    for _ in range(20):
        r, T = G(u)
        if np.linalg.norm(r) < tol:
            break
        J = np.empty((len(free), len(free)))
        eps = 1e-7
        for j in range(len(free)):
            du = np.zeros(len(free))
            du[j] = eps
            J[:, j] = (G(u + du)[0] - r) / eps
        u = u - np.linalg.solve(J, r)
    r, T = G(u)
    p = embed(u)
    if sing.size and np.min(np.linalg.norm(sing - p, axis=1)) <= min_sep:
        raise ConfigurationError("close-return search converged to a singularity")
    return PeriodicOrbit(p, float(T), float(np.linalg.norm(r)))


# --------------------------------------------------------------------------
# cu-disk growth

@dataclass
class DiskGrowthReport:
    t: int
    initial_radius: float     # scaled by |X(x)|
    surviving_radius: float   # image radius at x_t, scaled by |X(x_t)|
    preimage_radius: float    # radius of the surviving sub-disk at x, scaled by |X(x)|
    zeta: float
    reached: bool
    survivors: int
    grid: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def cu_disk_growth_check(spec: VectorFieldSpec, x, F_dir, t: int, zeta: float,
                         params: Optional[TubularParams] = None, n_radii: int = 60,
                         smallest: float = 1e-12, h: float = 0.005) -> DiskGrowthReport:
    """Push a one-dimensional cu-disk through t unit sectional maps with scaled shadowing.

    The disk is x + s F, |s| <= (rho / K0) |X(x)|, discretised on a
    logarithmic grid of radii on both sides.  The surviving sub-disk is the
    largest run of consecutive radii (from the centre outward, both sides)
    whose points are shadowed for all t steps; its image radius at x_t is
    reported in units of |X(x_t)|.
    """
    params = params or TubularParams()
    x = np.asarray(x, float)
    F_dir = np.asarray(F_dir, float)
    F_dir = F_dir / np.linalg.norm(F_dir)
    sp0 = float(np.linalg.norm(evaluate_field(spec, x)))
    r0 = params.rho / params.K0
    if t == 0:
        return DiskGrowthReport(0, r0, r0, r0, zeta, r0 >= zeta, 2 * n_radii, 2 * n_radii)
    radii = np.geomspace(smallest, r0, n_radii) * sp0
    S = np.concatenate([-radii[::-1], radii])
    Y = x + S[:, None] * F_dir
    ok, _, _, rel = shadow_batch(spec, np.broadcast_to(x, Y.shape), Y, t, params, h)
    mid = n_radii
    right = 0
    while right < n_radii and ok[mid + right]:
        right += 1
    left = 0
    while left < n_radii and ok[mid - 1 - left]:
        left += 1
    surv = np.concatenate([np.flatnonzero(ok[mid - left:mid]) + mid - left,
                           np.flatnonzero(ok[mid:mid + right]) + mid])
    if surv.size:
        j = surv[np.argmax(rel[surv, t])]
        rad = float(rel[j, t] * params.rho)
        pre = float(abs(S[j]) / sp0)
    else:
        rad = pre = 0.0
    return DiskGrowthReport(t, r0, rad, pre, zeta, rad >= zeta, int(surv.size), len(S))
