"""Normal-plane frames, linear/scaled Poincare cocycles and sectional maps.

Frames are orthonormal bases of ``N(x) = <X(x)>^perp`` stored as ``(n, n-1)``
column matrices.  The completion is Gram-Schmidt on the canonical basis with
the axis most aligned to ``X(x)`` left out, which keeps it well conditioned and
vectorizable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (CocycleDomainError, ConfigurationError, ProjectionDomainError,
                     SingularityError)
from .flow import (SINGULAR_SPEED, TangentCocycle, VectorFieldSpec, advance, evaluate_field,
                   rk4_step, rk4_step_jacobian)


@dataclass
class NormalFrame:
    base: np.ndarray
    basis: np.ndarray  # (n, n-1)
    speed: float
    direction: np.ndarray  # X(x)/|X(x)|


def _frames_from_fields(F: np.ndarray) -> np.ndarray:
    """Batched canonical completion; F has shape (..., n), nonzero rows."""
    n = F.shape[-1]
    e = F / np.linalg.norm(F, axis=-1, keepdims=True)
    drop = np.argmax(np.abs(e), axis=-1)
    lead = e.shape[:-1]
    B = np.zeros(lead + (n, n - 1))
    # canonical axes in order, skipping the dropped one
    idx = np.arange(n - 1)
    axes = idx + (idx[None, :] >= drop.reshape(-1, 1)).reshape(lead + (n - 1,))
    basis_prev = [e]
    for j in range(n - 1):
        v = np.zeros(lead + (n,))
        np.put_along_axis(v, axes[..., j:j + 1], 1.0, axis=-1)
        for _ in range(2):  # two passes for orthogonality to roundoff
            for u in basis_prev:
                v = v - np.sum(v * u, axis=-1, keepdims=True) * u
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        basis_prev.append(v)
        B[..., :, j] = v
    return B


def normal_frame(spec: VectorFieldSpec, x) -> NormalFrame:
    x = np.asarray(x, float)
    F = evaluate_field(spec, x)
    s = float(np.linalg.norm(F))
    if s < SINGULAR_SPEED:
        raise SingularityError(f"|X(x)| = {s:.3g}: no normal plane at a singularity")
    return NormalFrame(x, _frames_from_fields(F), s, F / s)


def normal_project(frame: NormalFrame, v) -> np.ndarray:
    v = np.asarray(v, float)
    w = v - np.dot(v, frame.direction) * frame.direction
    return frame.basis.T @ w


def _align(B_prev: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Project previous frames onto the new normal planes and re-orthonormalize (batched)."""
    P = B_prev - e[..., :, None] * np.einsum("...i,...ij->...j", e, B_prev)[..., None, :]
    Q, R = np.linalg.qr(P)
    sgn = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    sgn[sgn == 0] = 1.0
    return Q * sgn[..., None, :]


@dataclass
class FrameSeries:
    """Aligned normal frames along sampled points, shape (..., m, n, n-1)."""
    points: np.ndarray
    bases: np.ndarray
    speeds: np.ndarray
    directions: np.ndarray

    def frame(self, i: int) -> NormalFrame:
        return NormalFrame(self.points[i], self.bases[i], float(self.speeds[i]), self.directions[i])


def frames_along(spec: VectorFieldSpec, points: np.ndarray) -> FrameSeries:
    """Aligned frames at successive points; time runs along axis -2 of ``points``."""
    points = np.asarray(points, float)
    F = evaluate_field(spec, points)
    speeds = np.linalg.norm(F, axis=-1)
    if np.any(speeds < SINGULAR_SPEED):
        raise CocycleDomainError("a sample is a singularity; the normal bundle is undefined there")
    e = F / speeds[..., None]
    m = points.shape[-2]
    bases = np.empty(points.shape + (points.shape[-1] - 1,))
    bases[..., 0, :, :] = _frames_from_fields(F[..., 0, :])
    for i in range(1, m):
        B = _align(bases[..., i - 1, :, :], e[..., i, :])
        # a near-degenerate projection (field turned by ~90 degrees) falls back to a fresh frame
        ok = np.abs(np.linalg.det(np.swapaxes(B, -1, -2) @ bases[..., i - 1, :, :])) > 1e-3
        if not np.all(ok):
            fresh = _frames_from_fields(F[..., i, :])
            B = np.where(ok[..., None, None], B, fresh)
        bases[..., i, :, :] = B
    return FrameSeries(points, bases, speeds, e)


def _project_matrices(frames: FrameSeries, P: np.ndarray) -> np.ndarray:
    """B_{j+1}^T P_j B_j for consecutive frames."""
    Bt = np.swapaxes(frames.bases[..., 1:, :, :], -1, -2)
    return Bt @ P @ frames.bases[..., :-1, :, :]


def _check_k(frames: FrameSeries, k: int):
    if k < 0 or k >= frames.bases.shape[0]:
        raise ConfigurationError("k_steps outside the sampled segment")
    if np.any(frames.speeds[: k + 1] < SINGULAR_SPEED):
        raise CocycleDomainError("singularity inside the requested range")


def linear_poincare(cocycle: TangentCocycle, frames: FrameSeries, k_steps: int) -> np.ndarray:
    """Composition of the per-step projected tangent matrices over the first k steps."""
    _check_k(frames, k_steps)
    d = frames.bases.shape[-1]
    out = np.eye(d)
    if k_steps == 0:
        return out
    per = _project_matrices(FrameSeries(frames.points[: k_steps + 1], frames.bases[: k_steps + 1],
                                        frames.speeds[: k_steps + 1], frames.directions[: k_steps + 1]),
                            cocycle.matrices[:k_steps])
    for A in per:
        out = A @ out
    return out


def scaled_linear_poincare(cocycle: TangentCocycle, frames: FrameSeries, k_steps: int) -> np.ndarray:
    psi = linear_poincare(cocycle, frames, k_steps)
    return psi * (frames.speeds[0] / frames.speeds[k_steps])


@dataclass
class NormalCocycle:
    """Per-block (unscaled and scaled) linear Poincare matrices along sampled orbits.

    ``psi[..., j]`` maps N(x_j) to N(x_{j+1}) in the frame coordinates stored in
    ``frames``; ``dt`` is the time between consecutive samples.
    """
    frames: FrameSeries
    psi: np.ndarray
    dt: float
    rho0: float = 0.05
    K0: Optional[float] = None

    @property
    def speeds(self) -> np.ndarray:
        return self.frames.speeds

    @property
    def psi_star(self) -> np.ndarray:
        s = self.frames.speeds
        return self.psi * (s[..., :-1] / s[..., 1:])[..., None, None]

    @property
    def points(self) -> np.ndarray:
        return self.frames.points

    def product(self, a: int, b: int, scaled: bool = True) -> np.ndarray:
        mats = self.psi_star if scaled else self.psi
        P = np.broadcast_to(np.eye(mats.shape[-1]), mats.shape[:-3] + mats.shape[-2:]).copy()
        for j in range(a, b):
            P = mats[..., j, :, :] @ P
        return P

    def ambient(self, j: int, v: np.ndarray) -> np.ndarray:
        """Frame coordinates at sample j to ambient vectors."""
        return self.frames.bases[..., j, :, :] @ v


def normal_cocycle(spec: VectorFieldSpec, cocycle: TangentCocycle, stride: int = 1,
                   rho0: float = 0.05, K0: Optional[float] = None) -> NormalCocycle:
    seg = cocycle.segment
    P = cocycle.blocks(stride)
    pts = seg.samples[: P.shape[0] * stride + 1: stride]
    frames = frames_along(spec, pts)
    psi = _project_matrices(frames, P)
    return NormalCocycle(frames, psi, float(seg.h * stride), rho0, K0)


def unit_cocycles(spec: VectorFieldSpec, X0, n_blocks: int, h: float = 0.005,
                  block_time: float = 1.0, rho0: float = 0.05, K0=None) -> NormalCocycle:
    """Batched orbits with their block-time linear Poincare matrices.

    Integrates orbit and variational equation together without storing the
    per-step matrices.  Returns a cocycle whose arrays carry a leading batch axis.
    """
    X = np.array(X0, float)
    n = X.shape[-1]
    spb = int(round(block_time / h))
    if spb < 1 or abs(spb * h - block_time) > 1e-9:
        raise ConfigurationError("block_time must be an integer multiple of h")
    pts = np.empty(X.shape[:-1] + (n_blocks + 1, n))
    blocks = np.empty(X.shape[:-1] + (n_blocks, n, n))
    pts[..., 0, :] = X
    for j in range(n_blocks):
        P = np.broadcast_to(np.eye(n), X.shape[:-1] + (n, n)).copy()
        for _ in range(spb):
            P = rk4_step_jacobian(spec, X, h) @ P
            X = rk4_step(spec, X, h)
        if not np.all(np.isfinite(X)):
            raise CocycleDomainError("orbit diverged while building the cocycle")
        pts[..., j + 1, :] = X
        blocks[..., j, :, :] = P
    frames = frames_along(spec, pts)
    return NormalCocycle(frames, _project_matrices(frames, blocks), block_time, rho0, K0)


# --------------------------------------------------------------------------
# sectional maps

def section_hit(spec: VectorFieldSpec, Y, base, normal, h: float = 0.005, window: float = 0.15,
                tol: float = 1e-10):
    """Flow each row of Y to the plane through ``base`` orthogonal to ``normal``.

    Solves <f_tau(y) - base, normal> = 0 for the root nearest tau = 0 within
    |tau| <= window: scan outward on the h-grid for a sign change, bisect the
    bracketing sub-step to ``tol``, then two Newton steps.
    Returns (points, tau, ok).
    """
    Y = np.atleast_2d(np.asarray(Y, float))
    base = np.broadcast_to(np.asarray(base, float), Y.shape)
    normal = np.broadcast_to(np.asarray(normal, float), Y.shape)
    M = Y.shape[0]
    g = lambda Z: np.sum((Z - base) * normal, axis=-1)
    tau = np.full(M, np.nan)
    start = np.zeros_like(Y)  # state at the left end of the bracket (in stepping direction)
    step_dir = np.zeros(M)
    g0 = g(Y)
    found = g0 == 0.0
    tau[found] = 0.0
    start[found] = Y[found]
    Zf, Zb = Y.copy(), Y.copy()
    gf_prev, gb_prev = g0.copy(), g0.copy()
    kmax = int(math.ceil(window / h))
    for k in range(1, kmax + 1):
        todo = ~found
        if not todo.any():
            break
        Zf_new = rk4_step(spec, Zf, h)
        Zb_new = rk4_step(spec, Zb, -h)
        gf, gb = g(Zf_new), g(Zb_new)
        hit_f = todo & (np.sign(gf) != np.sign(gf_prev))
        hit_b = todo & ~hit_f & (np.sign(gb) != np.sign(gb_prev))
        for hit, Zs, d in ((hit_f, Zf, 1.0), (hit_b, Zb, -1.0)):
            if hit.any():
                start[hit] = Zs[hit]
                step_dir[hit] = d
                tau[hit] = d * (k - 1) * h
                found |= hit
        Zf, Zb, gf_prev, gb_prev = Zf_new, Zb_new, gf, gb
    ok = found.copy()
    br = ok & (step_dir != 0)
    if br.any():
        S, d = start[br], step_dir[br]
        bn, bs = base[br], normal[br]
        gl = np.sum((S - bn) * bs, axis=-1)
        lo, hi = np.zeros(len(S)), np.full(len(S), h)
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            gm = np.sum((rk4_step(spec, S, (d * mid)[:, None]) - bn) * bs, axis=-1)
            left = np.sign(gm) == np.sign(gl)
            lo = np.where(left, mid, lo)
            hi = np.where(left, hi, mid)
        s = d * 0.5 * (lo + hi)
        for _ in range(2):
            Z = rk4_step(spec, S, s[:, None])
            dg = np.sum(evaluate_field(spec, Z) * bs, axis=-1)
            gz = np.sum((Z - bn) * bs, axis=-1)
            upd = np.where(np.abs(dg) > 0, gz / np.where(dg == 0, 1.0, dg), 0.0)
            s = np.clip(s - upd, np.minimum(0, d * h), np.maximum(0, d * h))
        tau[br] = tau[br] + s
        start[br] = rk4_step(spec, S, s[:, None])
    ok &= np.abs(np.nan_to_num(tau, nan=np.inf)) <= window + 1e-12
    pts = np.where(ok[:, None], start, np.nan)
    return pts, tau, ok


def sectional_poincare_point(spec: VectorFieldSpec, x, t: float, y, rho0: float = 0.05,
                             h: float = 0.005):
    """P_{t,x}(y): flow y for time t, then slide along the flow line onto N(x_t).

    Returns (point, total_time).  Raises ProjectionDomainError when no crossing
    exists with |tau| <= 3 rho0.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xt = advance(spec, x[None], t, h)[0]
    yt = advance(spec, y[None], t, h)[0]
    pts, tau, ok = section_hit(spec, yt, xt, evaluate_field(spec, xt), h, 3 * rho0)
    if not ok[0]:
        raise ProjectionDomainError("flow line does not meet the target normal plane in the window")
    return pts[0], t + float(tau[0])


@dataclass(frozen=True)
class TubularParams:
    rho0: float = 0.05
    K0: float = 2.0
    rho: float = 0.05

    def __post_init__(self):
        if not (0 < self.rho <= self.rho0):
            raise ConfigurationError("need 0 < rho <= rho0")
        if not self.K0 > 1:
            raise ConfigurationError("need K0 > 1")


@dataclass
class ShadowingResult:
    success: bool
    fail_step: Optional[int]
    tau_samples: list
    rel_displacements: list

    def to_json(self) -> str:
        return json.dumps({"success": self.success, "fail_step": self.fail_step,
                           "tau_samples": self.tau_samples,
                           "rel_displacements": self.rel_displacements})


def shadow_batch(spec: VectorFieldSpec, X, Y, T: int, params: TubularParams, h: float = 0.005,
                 x_orbit=None):
    """Vectorized unit-step scaled shadowing for rows (x_i, y_i).

    Returns (success, fail_step, tau, rel) with tau/rel of shape (M, T+1);
    entries after a failure are NaN.  ``x_orbit`` (M, T+1, n) may carry the
    reference orbit at unit times when already available.
    """
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float)).copy()
    M = X.shape[0]
    if x_orbit is None:
        x_orbit = np.empty((M, T + 1, X.shape[1]))
        x_orbit[:, 0] = X
        cur = X
        for k in range(1, T + 1):
            cur = advance(spec, cur, 1.0, h)
            x_orbit[:, k] = cur
    tau = np.full((M, T + 1), np.nan)
    rel = np.full((M, T + 1), np.nan)
    tau[:, 0] = 0.0
    sp0 = np.linalg.norm(evaluate_field(spec, X), axis=-1)
    rel[:, 0] = np.linalg.norm(Y - X, axis=-1) / (params.rho * sp0)
    alive = np.ones(M, bool)
    fail = np.full(M, -1)
    lim = 1.0 / params.K0
    bad0 = rel[:, 0] > lim
    fail[bad0] = 0
    alive &= ~bad0
    for k in range(1, T + 1):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        xk = x_orbit[idx, k]
        Fk = evaluate_field(spec, xk)
        yk = advance(spec, Y[idx], 1.0, h)
        pk, tk, ok = section_hit(spec, yk, xk, Fk, h, 3 * params.rho0)
        r = np.linalg.norm(pk - xk, axis=-1) / (params.rho * np.linalg.norm(Fk, axis=-1))
        good = ok & (r <= lim)
        tau[idx[ok], k] = tau[idx[ok], k - 1] + 1.0 + tk[ok]
        rel[idx[ok], k] = r[ok]
        Y[idx[ok]] = pk[ok]
        fail[idx[~good]] = k
        alive[idx[~good]] = False
    return alive, np.where(fail < 0, None, fail), tau, rel


def scaled_shadowing_check(spec: VectorFieldSpec, x, y, T: int, params: TubularParams,
                           h: float = 0.005) -> ShadowingResult:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    F = evaluate_field(spec, x)
    if abs(np.dot(y - x, F)) > 1e-8 * (1 + np.linalg.norm(y - x)) * np.linalg.norm(F):
        raise ConfigurationError("y must lie on the normal plane N(x)")
    ok, fail, tau, rel = shadow_batch(spec, x[None], y[None], T, params, h)
    keep = ~np.isnan(tau[0])
    return ShadowingResult(bool(ok[0]), None if fail[0] is None else int(fail[0]),
                           tau[0][keep].tolist(), rel[0][~np.isnan(rel[0])].tolist())
