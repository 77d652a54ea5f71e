"""Separated sets, two-scale partition functions and pressure estimates.

Orbit data for a pool of initial points is held in an :class:`OrbitBundle`
(samples on a fixed recording grid plus potential values), built either from a
vector field or from the symbolic :class:`~sectflow.shift.ShiftSystem`.
Birkhoff integrals inside a bundle use the trapezoid rule on the recording
grid for flows and plain sums over shifts for the symbolic system; single
orbit integrals use Simpson's rule on the integration grid.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree
from scipy.integrate import simpson
from scipy.special import logsumexp

from .errors import ConfigurationError, UnsupportedSystemError
from .flow import VectorFieldSpec, evaluate_field, integrate_batch, integrate_orbit, rk4_step
from .shift import ShiftSystem

POTENTIAL_TAGS = ("zero", "constant", "height", "log-speed-clamped", "user")


@dataclass
class Potential:
    evaluator: Callable
    tag: str = "user"
    holder_exponent: float = 1.0
    holder_constant: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in POTENTIAL_TAGS:
            raise ConfigurationError(f"unknown potential tag {self.tag!r}")
        if not 0 < self.holder_exponent <= 1:
            raise ConfigurationError("Holder exponent must lie in (0, 1]")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.broadcast_to(np.asarray(self.evaluator(x), float), x.shape[:-1]).copy()

    def holder_check(self, points, metric: Callable, seed: int = 0, pairs: int = 2000,
                     scale: float = 1.0) -> bool:
        """True when |phi(x) - phi(y)| <= C d(x, y)^gamma on random nearby pairs."""
        rng = np.random.default_rng(seed)
        P = np.asarray(points, float)
        i = rng.integers(0, len(P), pairs)
        y = P[i] + rng.normal(scale=scale * 0.1, size=P[i].shape)
        d = metric(P[i], y)
        diff = np.abs(self(P[i]) - self(y))
        return bool(np.all(diff <= self.holder_constant * d ** self.holder_exponent + 1e-12))


def zero_potential() -> Potential:
    return Potential(lambda x: np.zeros(np.shape(x)[:-1]), "zero", 1.0, 0.0)


def constant_potential(c: float) -> Potential:
    return Potential(lambda x: np.full(np.shape(x)[:-1], float(c)), "constant", 1.0, 0.0, {"c": c})


def height_potential(coef: float, axis: int = -1) -> Potential:
    return Potential(lambda x: coef * np.asarray(x)[..., axis], "height", 1.0, abs(coef),
                     {"coef": coef, "axis": axis})


def log_speed_clamped(spec: VectorFieldSpec, coef: float, eta: float = 1e-3) -> Potential:
    """phi(x) = coef * log(max(|X(x)|, eta)); bounded below, Lipschitz away from the clamp."""
    def phi(x):
        return coef * np.log(np.maximum(np.linalg.norm(evaluate_field(spec, x), axis=-1), eta))
    # Lipschitz bound |coef| * sup|DX| / eta is pessimistic; recorded for flagging only
    return Potential(phi, "log-speed-clamped", 1.0, abs(coef) * 100.0 / eta,
                     {"coef": coef, "eta": eta})


@dataclass(frozen=True)
class Scales:
    delta: float
    eps: float = 0.0

    def __post_init__(self):
        if not self.delta > 0 or self.eps < 0:
            raise ConfigurationError("need delta > 0 and eps >= 0")


# --------------------------------------------------------------------------
# single-orbit primitives

def bowen_distance(spec: VectorFieldSpec, x, y, t: float, h: float = 0.005) -> float:
    """max over the h-grid of |f_s x - f_s y|, s in [0, t]."""
    a = integrate_orbit(spec, x, t, h).samples
    b = integrate_orbit(spec, y, t, h).samples
    return float(np.max(np.linalg.norm(a - b, axis=-1)))


def _trapezoid_cum(vals: np.ndarray, steps) -> np.ndarray:
    """Cumulative trapezoid along axis -1 with per-interval widths ``steps``."""
    inc = 0.5 * (vals[..., 1:] + vals[..., :-1]) * steps
    return np.concatenate([np.zeros(vals.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)


def _simpson(vals: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Integral along axis -1 on the (possibly shortened last step) sample grid."""
    if vals.shape[-1] < 3:
        return _trapezoid_cum(vals, np.diff(times))[..., -1]
    return simpson(vals, x=times, axis=-1)


def birkhoff_integral(spec: VectorFieldSpec, x, t: float, phi: Potential, h: float = 0.005) -> float:
    seg = integrate_orbit(spec, x, t, h)
    if seg.K == 0:
        return 0.0
    return float(_simpson(phi(seg.samples), seg.times))


def _ball_perturbations(rng, x, radius, count):
    n = x.shape[-1]
    u = rng.normal(size=(count, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / n)
    return x + u * r[:, None]


def sup_bowen_integral(spec: VectorFieldSpec, x, t: float, phi: Potential, eps: float,
                       probes: int = 16, seed: int = 0, h: float = 0.005):
    """Lower bound for sup of Phi_0 over the Bowen ball B_t(x, eps) from sampled companions.

    Returns (Phi_eps, Phi_0, var) where ``var`` is the largest |phi(x_s) - phi(y_s)|
    seen over companion pairs (a lower estimate of Var(phi, eps) covering every
    pair that entered the supremum).
    """
    x = np.asarray(x, float)
    seg = integrate_orbit(spec, x, t, h)
    px = phi(seg.samples)
    phi0 = float(_simpson(px, seg.times)) if seg.K else 0.0
    if eps == 0 or probes == 0:
        return phi0, phi0, 0.0
    rng = np.random.default_rng(seed)
    Y = _ball_perturbations(rng, x, eps, probes)
    orb = np.empty((probes, seg.K + 1, x.size))
    orb[:, 0] = Y
    for i, hi in enumerate(seg.steps):
        Y = rk4_step(spec, Y, hi)
        orb[:, i + 1] = Y
    dist = np.max(np.linalg.norm(orb - seg.samples, axis=-1), axis=1)
    inside = dist < eps
    if not inside.any():
        return phi0, phi0, 0.0
    py = phi(orb[inside])
    vals = _simpson(py, seg.times) if seg.K else np.zeros(inside.sum())
    var = float(np.max(np.abs(py - px)))
    return max(phi0, float(vals.max())), phi0, var


# --------------------------------------------------------------------------
# orbit bundles

@dataclass
class OrbitBundle:
    system: object
    points: np.ndarray
    samples: np.ndarray  # (M, S, n) recorded states
    phi_vals: np.ndarray  # (M, S) potential on the samples
    dt: float  # recording step (1 for the symbolic system)
    phi: Optional[Potential] = None
    h: float = 0.005

    @property
    def is_shift(self) -> bool:
        return isinstance(self.system, ShiftSystem)

    @property
    def size(self) -> int:
        return len(self.points)

    def n_samples(self, t: float) -> int:
        if self.is_shift:
            k = int(t)
            if k != t or k < 1 or k > self.samples.shape[1]:
                raise ConfigurationError("symbolic times must be integers within the bundle")
            return k
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 or k + 1 > self.samples.shape[1]:
            raise ConfigurationError("t must be a multiple of the recording step within the bundle")
        return k + 1

    def phi0(self, t: float) -> np.ndarray:
        S = self.n_samples(t)
        if self.is_shift:
            return self.phi_vals[:, :S].sum(axis=1)
        if S == 1:
            return np.zeros(self.size)
        v = self.phi_vals[:, :S]
        return self.dt * (v.sum(axis=1) - 0.5 * (v[:, 0] + v[:, -1]))

    def pair_distances(self, i, j, t: float) -> np.ndarray:
        """Exact Bowen distances d_t for index pairs (on the recording grid)."""
        S = self.n_samples(t)
        out = np.empty(len(i))
        for a in range(0, len(i), 20000):
            d = self.samples[i[a:a + 20000], :S] - self.samples[j[a:a + 20000], :S]
            if self.is_shift:
                out[a:a + 20000] = np.max(np.abs(d), axis=(1, 2))
            else:
                out[a:a + 20000] = np.max(np.linalg.norm(d, axis=-1), axis=1)
        return out


def flow_bundle(spec: VectorFieldSpec, pool, t_max: float, phi: Optional[Potential] = None,
                h: float = 0.005, stride: int = 4) -> OrbitBundle:
    pool = np.asarray(pool, float)
    n_steps = int(round(t_max / h))
    if n_steps % stride:
        raise ConfigurationError("t_max must be a multiple of h * stride")
    samples = integrate_batch(spec, pool, n_steps, h, stride)
    phi = phi or zero_potential()
    return OrbitBundle(spec, pool, samples, phi(samples), h * stride, phi, h)


def shift_bundle(system: ShiftSystem, words, t_max: int, phi: Optional[Potential] = None) -> OrbitBundle:
    words = np.asarray(words)
    samples = system.orbit_samples(words, t_max)
    phi = phi or zero_potential()
    return OrbitBundle(system, words, samples, phi(samples), 1.0, phi)


# --------------------------------------------------------------------------
# conflicts, companions and greedy admission

def _flow_close_pairs(bundle: OrbitBundle, t: float, radius: float, strict: bool):
    tree = cKDTree(bundle.samples[:, 0])
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), int), np.zeros(0)
    d = bundle.pair_distances(pairs[:, 0], pairs[:, 1], t)
    keep = d < radius if strict else d <= radius
    return pairs[keep], d[keep]


def conflict_structure(bundle: OrbitBundle, t: float, delta: float):
    """Pairs that are NOT (t, delta)-separated: ('labels', array) or ('pairs', (pairs, d))."""
    if bundle.is_shift:
        return "labels", bundle.system.class_labels(bundle.points, int(t), delta)
    return "pairs", _flow_close_pairs(bundle, t, delta, strict=False)


def greedy_admission(order: np.ndarray, kind: str, data, size: int) -> np.ndarray:
    """Scan ``order`` and admit every point not in conflict with an admitted one."""
    if kind == "labels":
        labels = data
        taken = np.zeros(labels.max() + 1 if size else 0, bool)
        out = []
        for i in order:
            if not taken[labels[i]]:
                taken[labels[i]] = True
                out.append(i)
        return np.asarray(out, int)
    pairs, _ = data
    if len(pairs) == 0:
        return np.asarray(order, int)
    A = coo_matrix((np.ones(2 * len(pairs), bool),
                    (np.concatenate([pairs[:, 0], pairs[:, 1]]),
                     np.concatenate([pairs[:, 1], pairs[:, 0]]))), shape=(size, size)).tocsr()
    blocked = np.zeros(size, bool)
    out = []
    indptr, indices = A.indptr, A.indices
    for i in order:
        if not blocked[i]:
            out.append(i)
            blocked[indices[indptr[i]:indptr[i + 1]]] = True
    return np.asarray(out, int)


def phi_eps(bundle: OrbitBundle, t: float, eps: float, probes: int = 0, seed: int = 0):
    """Phi_eps(x, t) for every pool point, from pool companions inside B_t(x, eps).

    For flows ``probes`` extra random companions per point are integrated as
    well.  Returns (Phi_eps, Phi_0, var) with ``var`` the largest pointwise
    |phi(x_s) - phi(y_s)| over companion pairs used.
    """
    p0 = bundle.phi0(t)
    if eps == 0:
        return p0.copy(), p0, 0.0
    S = bundle.n_samples(t)
    out = p0.copy()
    var = 0.0
    if bundle.is_shift:
        labels = bundle.system.class_labels(bundle.points, int(t), eps, strict=True)
        best = np.full(labels.max() + 1, -np.inf)
        np.maximum.at(best, labels, p0)
        out = best[labels]
        pv = bundle.phi_vals[:, :S]
        hi = np.full((labels.max() + 1, S), -np.inf)
        lo = np.full((labels.max() + 1, S), np.inf)
        np.maximum.at(hi, labels, pv)
        np.minimum.at(lo, labels, pv)
        var = float(np.max(hi - lo))
        return out, p0, var
    pairs, _ = _flow_close_pairs(bundle, t, eps, strict=True)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        np.maximum.at(out, i, p0[j])
        np.maximum.at(out, j, p0[i])
        var = float(np.max(np.abs(bundle.phi_vals[i, :S] - bundle.phi_vals[j, :S])))
    if probes:
        spec, h = bundle.system, bundle.h
        rng = np.random.default_rng(seed)
        stride = int(round(bundle.dt / h))
        for a in range(0, bundle.size, 4096):
            X = bundle.points[a:a + 4096]
            m = len(X)
            Y = np.concatenate([_ball_perturbations(rng, x, eps, probes) for x in X])
            ref = np.repeat(bundle.samples[a:a + m, :S], probes, axis=0)
            orb = integrate_batch(spec, Y, (S - 1) * stride, h, stride)
            dist = np.max(np.linalg.norm(orb - ref, axis=-1), axis=1)
            pv = bundle.phi(orb)
            vals = bundle.dt * (pv.sum(axis=1) - 0.5 * (pv[:, 0] + pv[:, -1])) if S > 1 else np.zeros(len(Y))
            ok = dist < eps
            if ok.any():
                owner = np.repeat(np.arange(a, a + m), probes)
                np.maximum.at(out, owner[ok], vals[ok])
                refv = np.repeat(bundle.phi_vals[a:a + m, :S], probes, axis=0)
                var = max(var, float(np.max(np.abs(pv[ok] - refv[ok]))))
    return out, p0, var


@dataclass
class SeparatedSet:
    t: float
    delta: float
    indices: np.ndarray  # into the bundle pool
    min_distance: float  # min over admitted pairs of min(d_t, 2 delta)
    weights: np.ndarray = None  # Phi_eps values used for ordering
    eps: float = 0.0

    def __len__(self):
        return len(self.indices)

    def verify(self, bundle: OrbitBundle) -> bool:
        return _certified_min_distance(bundle, self.indices, self.t, self.delta) > self.delta


def _certified_min_distance(bundle, idx, t, delta):
    """min over distinct admitted pairs of min(d_t, 2 delta), computed exactly."""
    idx = np.asarray(idx, int)
    if len(idx) < 2:
        return math.inf
    cap = 2 * delta
    if bundle.is_shift:
        return min(_shift_min_distance(bundle.system, bundle.points[idx], int(t)), cap)
    tree = cKDTree(bundle.samples[idx, 0])
    pairs = tree.query_pairs(cap, output_type="ndarray")
    if len(pairs) == 0:
        return cap
    d = bundle.pair_distances(idx[pairs[:, 0]], idx[pairs[:, 1]], t)
    return float(min(d.min(), cap))


def _shift_min_distance(system: ShiftSystem, words: np.ndarray, t: int) -> float:
    """Smallest d_t among distinct rows: the longest common prefix sits between sorted neighbours."""
    w = words[np.lexsort(words.T[::-1])]
    neq = w[1:] != w[:-1]
    lcp = np.where(neq.any(axis=1), np.argmax(neq, axis=1), w.shape[1])
    n = int(lcp.max())
    if n >= t - 1 + system.window:
        return 0.0
    return 0.5 ** (max(n - t + 1, 0) + 1)


def greedy_separated_set(bundle: OrbitBundle, t: float, delta: float, weights: Optional[np.ndarray] = None,
                         eps: float = 0.0) -> SeparatedSet:
    """Admit pool points in descending weight order while keeping d_t > delta."""
    if bundle.size == 0:
        raise ConfigurationError("pool is empty")
    w = bundle.phi0(t) if weights is None else np.asarray(weights, float)
    order = np.lexsort((np.arange(bundle.size), -w))
    kind, data = conflict_structure(bundle, t, delta)
    idx = greedy_admission(order, kind, data, bundle.size)
    md = _certified_min_distance(bundle, idx, t, delta)
    return SeparatedSet(t, delta, idx, md, w[idx], eps)


def partition_function(sep: SeparatedSet, weights: Optional[np.ndarray] = None) -> float:
    """log Lambda = log sum exp(Phi_eps) over the set (weights indexed by pool)."""
    if len(sep) == 0:
        return -math.inf
    vals = sep.weights if weights is None else np.asarray(weights)[sep.indices]
    return float(logsumexp(vals))


# --------------------------------------------------------------------------
# pressure estimates

@dataclass
class PressureEstimate:
    t_grid: np.ndarray
    deltas: np.ndarray
    eps: np.ndarray
    log_lambda: np.ndarray  # (T, D, E)
    slopes: np.ndarray  # (D, E)
    potential: str
    flags: list = field(default_factory=list)
    var_bound: np.ndarray = None  # (T, E) largest observed pointwise variation
    sets: dict = field(default_factory=dict, repr=False)  # (t, delta, eps) -> SeparatedSet

    @property
    def P(self) -> float:
        """Slope at the smallest delta and epsilon = first entry of the eps grid."""
        return float(self.slopes[int(np.argmin(self.deltas)), 0])

    @property
    def pointwise(self) -> np.ndarray:
        return self.log_lambda / self.t_grid[:, None, None]

    def rows(self):
        for a, t in enumerate(self.t_grid):
            for b, d in enumerate(self.deltas):
                for c, e in enumerate(self.eps):
                    yield float(t), float(d), float(e), float(self.log_lambda[a, b, c])

    def to_csv(self, path, header_extra: str = ""):
        with open(path, "w") as fh:
            if header_extra:
                fh.write(header_extra)
            fh.write("t,delta,eps,logLambda\n")
            for r in self.rows():
                fh.write("%.10g,%.10g,%.10g,%.12g\n" % r)

    def gnuplot_script(self, csv_name: str) -> str:
        lines = ["set datafile separator ','", "set key left top", "set xlabel 't'",
                 "set ylabel 'log Lambda'", "plot \\"]
        plots = []
        for b, d in enumerate(self.deltas):
            for c, e in enumerate(self.eps):
                cond = f"(abs($2-{d:.10g})<1e-12 && abs($3-{e:.10g})<1e-12 ? $4 : 1/0)"
                plots.append(f"  '{csv_name}' every ::1 using 1:{cond} with linespoints "
                             f"title 'delta={d:g} eps={e:g}'")
        return "\n".join(lines) + "\n" + ", \\\n".join(plots) + "\n"

    def to_json(self) -> str:
        return json.dumps({"t_grid": self.t_grid.tolist(), "deltas": self.deltas.tolist(),
                           "eps": self.eps.tolist(), "log_lambda": self.log_lambda.tolist(),
                           "slopes": self.slopes.tolist(), "P": self.P,
                           "potential": self.potential, "flags": self.flags})


def _fit_slope(t, y):
    half = len(t) // 2
    tt, yy = np.asarray(t[half:], float), np.asarray(y[half:], float)
    A = np.vstack([tt, np.ones_like(tt)]).T
    coef, *_ = np.linalg.lstsq(A, yy, rcond=None)
    resid = yy - A @ coef
    ss = np.sum((yy - yy.mean()) ** 2)
    r2 = 1 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(coef[0]), float(r2)


def pressure_estimate(bundle: OrbitBundle, t_grid: Sequence[float], deltas: Sequence[float],
                      eps: Sequence[float] = (0.0,), probes: int = 0, seed: int = 0,
                      keep_sets: bool = False) -> PressureEstimate:
    """Partition functions on a (t, delta, eps) grid and slope fits in t.

    Every greedy set found at (t, delta_k, eps_l) is a legitimate competitor
    for the supremum at any delta <= delta_k and is scored with each eps
    weight; the reported log Lambda is the best such score, which makes the
    reported values monotone in delta and eps by construction of the sup.
    """
    t_grid = np.asarray(t_grid, float)
    deltas = np.sort(np.asarray(deltas, float))[::-1]  # largest first
    eps = np.sort(np.asarray(eps, float))
    if len(t_grid) < 4:
        raise ConfigurationError("t_grid needs at least 4 points")
    T, D, E = len(t_grid), len(deltas), len(eps)
    logL = np.full((T, D, E), -np.inf)
    var = np.zeros((T, E))
    sets = {}
    flags = []
    for a, t in enumerate(t_grid):
        W = []
        for c, e in enumerate(eps):
            w, _, v = phi_eps(bundle, t, e, probes, seed + a)
            W.append(w)
            var[a, c] = v
        candidates = []
        for b, d in enumerate(deltas):
            for c, e in enumerate(eps):
                s = greedy_separated_set(bundle, t, d, W[c], e)
                candidates.append(s)
                if keep_sets:
                    sets[(float(t), float(d), float(e))] = s
            for c in range(E):
                logL[a, b, c] = max(partition_function(s, W[c]) for s in candidates)
    slopes = np.empty((D, E))
    for b in range(D):
        for c in range(E):
            slopes[b, c], r2 = _fit_slope(t_grid, logL[:, b, c])
            if r2 < 0.9:
                flags.append(f"noisy fit (R^2={r2:.3f}) at delta={deltas[b]:g}, eps={eps[c]:g}")
            if isinstance(bundle.phi, Potential) and np.all(bundle.phi_vals >= 0) and \
                    np.any(np.diff(logL[:, b, c]) < -1e-12):
                flags.append(f"log Lambda decreasing in t at delta={deltas[b]:g}, eps={eps[c]:g}")
    tag = bundle.phi.tag if bundle.phi is not None else "zero"
    return PressureEstimate(t_grid, deltas, eps, logL, slopes, tag, flags, var, sets)


# --------------------------------------------------------------------------
# empirical measures

@dataclass
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray
    kind: str  # "nu" or "mu"
    t: float
    delta: float

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ConfigurationError("empirical weights must be positive")

    def mass(self, indicator: Callable) -> float:
        return float(np.sum(self.weights[np.asarray(indicator(self.points), bool)]))

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "t": self.t, "delta": self.delta,
                           "points": self.points.tolist(), "weights": self.weights.tolist()})


def empirical_measures(sep: SeparatedSet, bundle: OrbitBundle):
    """Gibbs measure nu_t on the set and its time average mu_t along the orbit samples."""
    p0 = bundle.phi0(sep.t)[sep.indices]
    logw = p0 - logsumexp(p0)
    w = np.exp(logw)
    w /= w.sum()
    nu = EmpiricalMeasure(bundle.samples[sep.indices, 0], w, "nu", sep.t, sep.delta)
    S = bundle.n_samples(sep.t)
    pts = bundle.samples[sep.indices, :S].reshape(-1, bundle.samples.shape[-1])
    mw = np.repeat(w / S, S)
    mw /= mw.sum()
    mu = EmpiricalMeasure(pts, mw, "mu", sep.t, sep.delta)
    return nu, mu


def measure_pressure_toy(system, mu: EmpiricalMeasure, phi: Potential, word_length: int = 8) -> float:
    """P_mu = h_mu + int phi dmu with h_mu from conditional block entropy H(k) - H(k-1)."""
    if not isinstance(system, ShiftSystem):
        raise UnsupportedSystemError("measure entropy is only available for symbolic systems")
    if word_length > system.window:
        raise ConfigurationError("word length exceeds the embedding window")
    blocks = system.decode(mu.points)
    h = system.block_entropy(blocks, mu.weights, word_length) - \
        system.block_entropy(blocks, mu.weights, word_length - 1)
    return float(h + np.sum(mu.weights * phi(mu.points)))


def pressure_gap_check(spec: VectorFieldSpec, phi: Potential, estimate: PressureEstimate,
                       include_inactive: bool = False) -> dict:
    sings = spec.singularities if include_inactive else spec.active_singularities
    return {i: estimate.P - float(phi(s.point[None])[0]) for i, s in enumerate(sings)}
