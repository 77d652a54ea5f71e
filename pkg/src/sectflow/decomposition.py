"""Singular neighbourhoods W_r, the U_sing surrogate and the (P, G, S)/B1/B2 split.

All classification works on the unit-time grid x_0, ..., x_t of a segment.  A
segment is summarised by a :class:`SegmentData` record holding its grid
points, the membership flags for W_r and U_sing, and the cu-contraction logs
a_j = log m(psi*_1 | F(x_{j-1})) for j = 1..t.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cones import splitting_series
from .errors import ConfigurationError
from .flow import Singularity, VectorFieldSpec, attractor_points, integrate_batch, rk4_step
from .pliss import last_simultaneous_time, pliss_mask, recurrence_mask
from .poincare import unit_cocycles

CLASSES = ("D", "B1", "B2")


@dataclass
class SingularNeighborhood:
    """W_r(sigma): union of maximal orbit arcs inside the closed B_{r0} that meet B_r."""
    sigma: Singularity
    r: float
    r0: float
    cap: float = 50.0
    h: float = 0.005
    boundary_in: list = field(default_factory=list, repr=False)   # entry points on dB_{r0}
    boundary_out: list = field(default_factory=list, repr=False)  # exit points on dB_{r0}

    def __post_init__(self):
        if not 0 < self.r < self.r0:
            raise ConfigurationError("need 0 < r < r0")
        if self.cap <= 0:
            raise ConfigurationError("trapped-orbit cap must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.sigma.point, float)

    def dist(self, Y) -> np.ndarray:
        return np.linalg.norm(np.asarray(Y, float) - self.center, axis=-1)


def _sweep(spec, nb: SingularNeighborhood, Y, direction: float, record: Optional[list]):
    """Follow each row in one time direction until it meets B_r or leaves B_{r0}.

    Returns (hit, undecided) masks.
    """
    Y = np.array(Y, float)
    M = len(Y)
    hit = nb.dist(Y) < nb.r
    done = hit | (nb.dist(Y) > nb.r0)
    n_steps = int(math.ceil(nb.cap / nb.h))
    act = np.flatnonzero(~done)
    X = Y[act]
    for _ in range(n_steps):
        if act.size == 0:
            break
        Xn = rk4_step(spec, X, direction * nb.h)
        d = nb.dist(Xn)
        inner = d < nb.r
        out = d > nb.r0
        if record is not None and out.any():
            # linear interpolation of the crossing of the outer sphere
            d0 = nb.dist(X[out])
            w = ((nb.r0 - d0) / (d[out] - d0))[:, None]
            record.extend(list(X[out] + w * (Xn[out] - X[out])))
        hit[act[inner]] = True
        keep = ~(inner | out)
        act, X = act[keep], Xn[keep]
    undecided = np.zeros(M, bool)
    undecided[act] = True
    return hit, undecided


def membership_W_r(spec: VectorFieldSpec, nb: SingularNeighborhood, Y, return_trapped: bool = False,
                   record_boundary: bool = False):
    """Batched W_r membership with the trapped-orbit convention.

    Outside the closed B_{r0} the answer is False.  Inside, the arc through y
    is followed forward and backward until it exits B_{r0} (or the time cap
    runs out); y belongs to W_r iff the arc meets B_r.  An arc that neither
    exits nor meets B_r within the cap is reported as inside, with a trapped
    flag.
    """
    Y = np.atleast_2d(np.asarray(Y, float))
    if not np.all(np.isfinite(Y)):
        raise ConfigurationError("membership needs finite points")
    d = nb.dist(Y)
    inside = d < nb.r
    trapped = np.zeros(len(Y), bool)
    cand = np.flatnonzero((d <= nb.r0) & ~inside)
    if cand.size:
        fh, fu = _sweep(spec, nb, Y[cand], 1.0, nb.boundary_out if record_boundary else None)
        rest = ~fh
        bh = np.zeros(cand.size, bool)
        bu = np.zeros(cand.size, bool)
        if rest.any():
            bh[rest], bu[rest] = _sweep(spec, nb, Y[cand[rest]], -1.0,
                                        nb.boundary_in if record_boundary else None)
        tr = ~(fh | bh) & (fu | bu)
        inside[cand] = fh | bh | tr
        trapped[cand] = tr
    if return_trapped:
        return inside, trapped
    return inside


def arc_mask(dist: np.ndarray, r: float, r0: float) -> np.ndarray:
    """W_r flags along a densely sampled orbit from its distances to sigma.

    Maximal runs of samples with dist <= r0 that contain a sample with
    dist < r are flagged.  Runs touching either end of the record are left
    to the caller (they may continue outside the record).
    """
    dist = np.asarray(dist, float)
    inball = dist <= r0
    out = np.zeros(dist.shape, bool)
    n = len(dist)
    i = 0
    while i < n:
        if not inball[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and inball[j + 1]:
            j += 1
        if np.any(dist[i:j + 1] < r):
            out[i:j + 1] = True
        i = j + 1
    return out


# --------------------------------------------------------------------------
# U_sing surrogate: tubes around unstable branches

@dataclass
class UnstableTubes:
    """Tubes of radius ``radius`` around the unstable branches of the active singularities."""
    spec: VectorFieldSpec
    radius: float = 0.5
    length: float = 15.0
    offset: float = 1e-6
    h: float = 0.002
    tree: Optional[cKDTree] = field(default=None, repr=False)
    branch_points: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.radius <= 0 or self.length <= 0:
            raise ConfigurationError("tube radius and branch length must be positive")
        pts = []
        for s in self.spec.active_singularities:
            _, _, Eu = s.subspaces()
            for sign in (1.0, -1.0):
                x = s.point + sign * self.offset * Eu[:, 0]
                arc = 0.0
                branch = [s.point.copy(), x.copy()]
                # the first stretch near sigma is slow: bound the number of steps generously
                for _ in range(int(200 / self.h)):
                    xn = rk4_step(self.spec, x, self.h)
                    arc += float(np.linalg.norm(xn - x))
                    x = xn
                    branch.append(x.copy())
                    if arc >= self.length:
                        break
                pts.append(np.asarray(branch))
        self.branch_points = np.concatenate(pts) if pts else np.zeros((0, self.spec.dim))
        self.tree = cKDTree(self.branch_points) if len(self.branch_points) else None

    def __call__(self, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, float))
        if self.tree is None:
            return np.zeros(len(Y), bool)
        d, _ = self.tree.query(Y, k=1)
        return d < self.radius


# --------------------------------------------------------------------------
# centre-cone entry

def eigen_coordinates(sigma: Singularity, V) -> tuple:
    """Components (ss, c, u) of displacement vectors in the eigenbasis at sigma."""
    Ess, Ec, Eu = sigma.subspaces()
    B = np.concatenate([Ess, Ec, Eu], axis=1)
    B = B / np.linalg.norm(B, axis=0)
    coef = np.linalg.solve(B, np.asarray(V, float).T).T
    s, c = Ess.shape[1], Ec.shape[1]
    return coef[..., :s], coef[..., s:s + c], coef[..., s + c:]


def in_center_cone(sigma: Singularity, V, alpha: float) -> np.ndarray:
    ss, c, u = eigen_coordinates(sigma, V)
    side = np.maximum(np.linalg.norm(ss, axis=-1), np.linalg.norm(u, axis=-1))
    return side <= alpha * np.linalg.norm(c, axis=-1)


@dataclass
class ConeEntryReport:
    entering: int
    violations: int
    max_ratio: float  # worst max(|v_ss|, |v_u|)/|v_c| over entries

    @property
    def fraction(self) -> float:
        return self.violations / self.entering if self.entering else 0.0


def cone_entry_from_orbits(sigma: Singularity, orbits: np.ndarray, r: float, r0: float,
                           alpha: float) -> ConeEntryReport:
    """Scan dense orbits (M, K, n) for entries into B_r; test the last dB_{r0} crossing before each."""
    D = np.linalg.norm(orbits - sigma.point, axis=-1)
    crossings = []
    for m in range(orbits.shape[0]):
        d = D[m]
        k = 0
        while True:
            hits = np.flatnonzero(d[k:] < r)
            if hits.size == 0:
                break
            e = k + int(hits[0])
            outside = np.flatnonzero(d[:e] > r0)
            if outside.size:
                j = int(outside[-1])
                w = (d[j] - r0) / (d[j] - d[j + 1])
                crossings.append(orbits[m, j] + w * (orbits[m, j + 1] - orbits[m, j]) - sigma.point)
            # skip the rest of this passage through B_{r0}
            after = np.flatnonzero(d[e:] > r0)
            if after.size == 0:
                break
            k = e + int(after[0])
    if not crossings:
        return ConeEntryReport(0, 0, 0.0)
    V = np.asarray(crossings)
    ss, c, u = eigen_coordinates(sigma, V)
    side = np.maximum(np.linalg.norm(ss, axis=-1), np.linalg.norm(u, axis=-1))
    ratio = side / np.maximum(np.linalg.norm(c, axis=-1), 1e-300)
    return ConeEntryReport(len(V), int(np.sum(ratio > alpha)), float(ratio.max()))


def center_cone_entry_check(spec: VectorFieldSpec, sigma: Singularity, r: float, r0: float,
                            alpha: float, trials: int, seed: int = 0, h: float = 0.005,
                            duration: float = 20.0, starts=None, launch_radius: Optional[float] = None,
                            ss_exclusion: float = 0.2) -> ConeEntryReport:
    """Count entries into B_r(sigma) whose last dB_{r0} crossing lies outside the centre cone.

    ``starts`` defaults to attractor samples.  With ``launch_radius`` the
    starts are instead placed near W^s(sigma) on the sphere of that radius,
    away from the strong-stable directions (|v_c| >= ss_exclusion) and with a
    tiny unstable component, which is the linear-model set-up.
    """
    if not 0 < r < r0:
        raise ConfigurationError("need 0 < r < r0")
    rng = np.random.default_rng(seed)
    if starts is None and launch_radius is not None:
        Ess, Ec, Eu = sigma.subspaces()
        B = np.concatenate([Ess, Ec, Eu], axis=1)
        B = B / np.linalg.norm(B, axis=0)
        s, cdim = Ess.shape[1], Ec.shape[1]
        ang = rng.uniform(0, 2 * np.pi, trials)
        coef = np.zeros((trials, B.shape[1]))
        coef[:, s:s + cdim] = np.cos(ang)[:, None]
        coef[:, :s] = np.sin(ang)[:, None] / math.sqrt(s)
        keep = np.abs(np.cos(ang)) >= ss_exclusion
        coef = coef[keep]
        coef[:, s + cdim:] = rng.uniform(-1, 1, (len(coef), B.shape[1] - s - cdim)) * 0.1 * r * (r / launch_radius) ** 2
        V = coef @ B.T
        V = V / np.linalg.norm(V, axis=1, keepdims=True) * launch_radius
        starts = sigma.point + V
    elif starts is None:
        starts = attractor_points(spec, trials, seed=seed, h=h, n_orbits=min(trials, 500))
    n_steps = int(round(duration / h))
    orbits = integrate_batch(spec, starts, n_steps, h, on_blowup="nan")
    orbits = orbits[np.all(np.isfinite(orbits), axis=(1, 2))]
    return cone_entry_from_orbits(sigma, orbits, r, r0, alpha)


# --------------------------------------------------------------------------
# segment data and classification

@dataclass
class DecompositionConfig:
    """Parameters of the decomposition (recurrence uses ``beta``, the B2 bound ``beta1``)."""
    lam0: float = math.exp(0.1)
    beta: float = 0.5
    kappa: float = 0.5
    N1: int = 5
    beta1: Optional[float] = None

    def __post_init__(self):
        if not self.lam0 > 1:
            raise ConfigurationError("need lambda0 > 1")
        if not (0 < self.beta < 1 and 0 < self.kappa < 1):
            raise ConfigurationError("need beta, kappa in (0, 1)")
        if self.N1 < 0:
            raise ConfigurationError("N1 must be nonnegative")
        if self.beta1 is None:
            self.beta1 = self.beta * (1 - self.kappa) * (1 - 1e-6)

    @property
    def b1(self) -> float:
        return math.log(self.lam0)


@dataclass
class SegmentData:
    """Unit-grid summary of an orbit segment (x, t), t integer."""
    points: np.ndarray      # (t+1, n)
    in_W: np.ndarray        # (t+1,) union over sigma of W_r(sigma)
    in_U: np.ndarray        # (t+1,)
    a_log: np.ndarray       # (t,), a_log[j-1] for the step into x_j
    trapped: Optional[np.ndarray] = None
    seg_id: int = 0

    @property
    def t(self) -> int:
        return len(self.in_W) - 1

    def sub(self, a: int, b: int) -> "SegmentData":
        """Sub-segment (x_a, b - a) on the same grid."""
        return SegmentData(self.points[a:b + 1], self.in_W[a:b + 1], self.in_U[a:b + 1],
                           self.a_log[a:b], None if self.trapped is None else self.trapped[a:b + 1],
                           self.seg_id)


@dataclass
class DecompositionLabel:
    seg_id: int
    t: int
    kind: str
    p: int
    g: int
    s: int
    tau: Optional[int] = None  # absolute index of the simultaneous time ending the G part
    reason: str = ""

    def __post_init__(self):
        if self.kind not in CLASSES:
            raise ConfigurationError(f"unknown class {self.kind!r}")
        if self.kind == "D" and self.p + self.g + self.s != self.t:
            raise ConfigurationError("p + g + s must equal t")

    def row(self):
        return [self.seg_id, self.kind, self.p, self.g, self.s, self.reason]


def p_time(data: SegmentData) -> Optional[int]:
    bad = data.in_W | data.in_U
    ok = np.flatnonzero(~bad)
    return int(ok[0]) if ok.size else None


def s_tilde(data: SegmentData) -> Optional[int]:
    ok = np.flatnonzero(~data.in_W)
    return int(ok[-1]) if ok.size else None


def decompose(data: SegmentData, cfg: DecompositionConfig) -> DecompositionLabel:
    t = data.t
    p, st = p_time(data), s_tilde(data)
    if p is None or st is None:
        why = "p-missing" if p is None else "s-tilde-missing"
        return DecompositionLabel(data.seg_id, t, "B1", 0, 0, 0, None, why)
    if st - p <= cfg.N1:
        return DecompositionLabel(data.seg_id, t, "B1", p, 0, 0, None, "short-core")
    tau = last_simultaneous_time(data.a_log, data.in_W, cfg.b1, cfg.beta, p, st)
    if tau is None:
        return DecompositionLabel(data.seg_id, t, "B2", p, 0, 0, None, "no-simultaneous-time")
    return DecompositionLabel(data.seg_id, t, "D", p, tau - p, t - tau, tau, "")


def G_membership(data: SegmentData, cfg: DecompositionConfig):
    """(is_in_G, reason) for the whole segment (x_0, t)."""
    if data.in_U[0]:
        return False, "start-in-U"
    if data.in_W[0]:
        return False, "start-in-W"
    t = data.t
    if data.in_W[t]:
        return False, "end-in-W"
    if t == 0:
        return True, ""
    if not pliss_mask(data.a_log, cfg.b1)[-1]:
        return False, "end-not-hyperbolic"
    if not recurrence_mask(data.in_W, cfg.beta)[-1]:
        return False, "end-not-recurrent"
    return True, ""


def b2_fraction(data: SegmentData, label: DecompositionLabel) -> float:
    """#{j = 0..n-1 : x_{s~ - j} in W} / n with n = s~ - p."""
    st = s_tilde(data)
    n = st - label.p
    js = st - np.arange(n)
    return float(np.sum(data.in_W[js])) / n


def label_table(labels: Sequence[DecompositionLabel], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "class", "p", "g", "s", "reason"])
        for lab in labels:
            w.writerow(lab.row())


def bad_segment_visit_statistics(pool: Sequence[SegmentData], labels: Sequence[DecompositionLabel],
                                 nbhds: Sequence[SingularNeighborhood]) -> dict:
    """Per-class mean visit fractions of W_r, W_r u U_sing and the closed balls B_{r0}."""
    if len(pool) == 0:
        raise ConfigurationError("empty pool")
    out = {}
    for kind in CLASSES:
        rows = [(d, lab) for d, lab in zip(pool, labels) if lab.kind == kind]
        if not rows:
            out[kind] = {"count": 0}
            continue
        fw, fwu, fb = [], [], []
        for d, _ in rows:
            ball = np.zeros(len(d.in_W), bool)
            for nb in nbhds:
                ball |= nb.dist(d.points) <= nb.r0
            fw.append(d.in_W.mean())
            fwu.append((d.in_W | d.in_U).mean())
            fb.append(ball.mean())
        out[kind] = {"count": len(rows), "W": float(np.mean(fw)), "W_or_U": float(np.mean(fwu)),
                     "B_r0": float(np.mean(fb)), "min_W_or_U": float(np.min(fwu))}
    return out


# --------------------------------------------------------------------------
# building segment pools from the flow

def grid_W_mask(spec: VectorFieldSpec, nbhds: Sequence[SingularNeighborhood], P) -> tuple:
    """(in_W, trapped) for an array of points (..., n) against the union of the W_r's."""
    P = np.asarray(P, float)
    flat = P.reshape(-1, P.shape[-1])
    inW = np.zeros(len(flat), bool)
    tr = np.zeros(len(flat), bool)
    for nb in nbhds:
        w, t = membership_W_r(spec, nb, flat, return_trapped=True)
        inW |= w
        tr |= t
    return inW.reshape(P.shape[:-1]), tr.reshape(P.shape[:-1])


def segment_pool(spec: VectorFieldSpec, starts, t: int, nbhds: Sequence[SingularNeighborhood],
                 tubes: Optional[UnstableTubes], window: int = 6, h: float = 0.005) -> list:
    """SegmentData for unit-grid segments (x, t), one per row of ``starts``.

    The cu-bundle is estimated by forward power iteration, which needs
    ``window + 1`` units of history: each row of ``starts`` is the point that
    many units *before* the segment start (backward integration of a
    dissipative flow is not an option).
    """
    X0 = np.atleast_2d(np.asarray(starts, float))
    pre = window + 1
    n_blocks = t + 2 * window + 1
    coc = unit_cocycles(spec, X0, n_blocks, h)
    idx = np.arange(pre, pre + t)
    _, F, _, _ = splitting_series(coc, window, 1, idx)
    A = coc.psi_star[:, idx]
    a_log = np.log(np.linalg.svd(A @ F, compute_uv=False)[..., -1])
    pts = coc.points[:, pre:pre + t + 1]
    in_W, trapped = grid_W_mask(spec, nbhds, pts)
    in_U = tubes(pts.reshape(-1, spec.dim)).reshape(pts.shape[:-1]) if tubes else np.zeros_like(in_W)
    return [SegmentData(pts[i], in_W[i], in_U[i], a_log[i], trapped[i], i) for i in range(len(X0))]
