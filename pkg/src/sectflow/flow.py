"""Vector fields, fixed-step RK4 orbits and the tangent cocycle.

Every routine accepts batched points of shape ``(..., n)``; tangent data is
``(..., n, n)``.  Integration is classical RK4 with a fixed step so that the
orbit and its derivative share the same discrete map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BlowUpError, ConfigurationError

FAMILIES = ("lorenz63", "linear_saddle", "suspension_shift", "user_polynomial")
SINGULAR_SPEED = 1e-10
DEFAULT_BOUND = 1e6


@dataclass(frozen=True)
class Singularity:
    point: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    lorenz_like: bool

    def subspaces(self):
        """Return (E^ss, E^c, E^u) eigenvector blocks, ordered by real part.

        For a Lorenz-like zero the centre block is the weakest contracting
        direction; the strong stable block holds the remaining contracting ones.
        """
        order = np.argsort(self.eigenvalues.real)
        lam = self.eigenvalues.real[order]
        vec = self.eigenvectors[:, order].real
        neg = np.flatnonzero(lam < 0)
        pos = np.flatnonzero(lam > 0)
        c = neg[-1:]
        ss = neg[:-1]
        return vec[:, ss], vec[:, c], vec[:, pos]


@dataclass(frozen=True)
class VectorFieldSpec:
    family: str
    params: tuple
    dim: int
    singularities: tuple = ()
    time_scale: float = 1.0
    exponents: Optional[tuple] = None  # user_polynomial only: (n_terms, n) integer powers

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown vector-field family {self.family!r}")
        if not (self.time_scale >= 1.0 and math.isfinite(self.time_scale)):
            raise ConfigurationError("time-rescale factor must be a finite number >= 1")

    @property
    def active_singularities(self):
        """Singularities that can sit inside a sectional-hyperbolic attractor."""
        return tuple(s for s in self.singularities if s.lorenz_like)

    def rescaled(self, c: float) -> "VectorFieldSpec":
        return VectorFieldSpec(self.family, self.params, self.dim,
                               self.singularities, float(c), self.exponents)

    def key(self) -> dict:
        d = {"family": self.family, "params": [float(p) for p in self.params],
             "dim": self.dim, "time_scale": self.time_scale}
        if self.exponents is not None:
            d["exponents"] = [list(map(int, e)) for e in self.exponents]
        return d


def _eigendata(A: np.ndarray, point: np.ndarray) -> Singularity:
    w, v = np.linalg.eig(A)
    order = np.argsort(w.real)
    w, v = w[order], v[:, order]
    real = np.all(np.abs(w.imag) < 1e-12)
    lorenz_like = False
    if real and A.shape[0] == 3:
        l_ss, l_s, l_u = w.real
        lorenz_like = bool(l_ss < l_s < 0 < l_u and l_s + l_u > 0)
    if real:
        w, v = w.real, v.real
    return Singularity(np.asarray(point, float), w, v, lorenz_like)


def lorenz63(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0,
             time_scale: float = 1.0) -> VectorFieldSpec:
    pts = [np.zeros(3)]
    if rho > 1:
        q = math.sqrt(beta * (rho - 1))
        pts += [np.array([q, q, rho - 1]), np.array([-q, -q, rho - 1])]
    proto = VectorFieldSpec("lorenz63", (sigma, rho, beta), 3)
    sings = tuple(_eigendata(_jacobian_raw(proto, p), p) for p in pts)
    return VectorFieldSpec("lorenz63", (sigma, rho, beta), 3, sings, time_scale)


def linear_saddle(rates: Sequence[float] | np.ndarray, drift: Optional[Sequence[float]] = None,
                  time_scale: float = 1.0) -> VectorFieldSpec:
    """Affine field X(x) = A x + b.

    ``rates`` is either the diagonal of A or the full matrix.  A nonzero
    ``drift`` b gives a translation direction, e.g. rates (-2, 1, 0) with
    drift (0, 0, 1) is a saddle times a unit-speed neutral flow line.
    """
    A = np.asarray(rates, float)
    A = np.diag(A) if A.ndim == 1 else A
    n = A.shape[0]
    b = np.zeros(n) if drift is None else np.asarray(drift, float)
    params = tuple(A.ravel()) + tuple(b)
    sings = ()
    if abs(np.linalg.det(A)) > 1e-14:
        sings = (_eigendata(A, np.linalg.solve(A, -b)),)
    return VectorFieldSpec("linear_saddle", params, n, sings, time_scale)


def suspension_shift(dim: int = 3, speed: float = 1.0, time_scale: float = 1.0) -> VectorFieldSpec:
    """Constant-speed translation along the last axis (no singularities)."""
    return VectorFieldSpec("suspension_shift", (float(speed),), dim, (), time_scale)


def user_polynomial(coefficients, exponents, time_scale: float = 1.0,
                    singular_points=()) -> VectorFieldSpec:
    """Polynomial field: X_i(x) = sum_k coefficients[i, k] * prod_j x_j ** exponents[k, j]."""
    C = np.asarray(coefficients, float)
    E = np.asarray(exponents, int)
    if C.ndim != 2 or E.ndim != 2 or C.shape[1] != E.shape[0] or E.shape[1] != C.shape[0]:
        raise ConfigurationError("polynomial coefficients/exponents have inconsistent shapes")
    n = C.shape[0]
    proto = VectorFieldSpec("user_polynomial", tuple(C.ravel()), n, (), 1.0,
                            tuple(map(tuple, E)))
    sings = tuple(_eigendata(_jacobian_raw(proto, np.asarray(p, float)), p) for p in singular_points)
    return VectorFieldSpec("user_polynomial", tuple(C.ravel()), n, sings, time_scale,
                           tuple(map(tuple, E)))


def _affine_parts(spec):
    n = spec.dim
    p = np.asarray(spec.params, float)
    return p[: n * n].reshape(n, n), p[n * n:]


def _field_raw(spec: VectorFieldSpec, x: np.ndarray) -> np.ndarray:
    fam = spec.family
    if fam == "lorenz63":
        s, r, b = spec.params
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([s * (Y - X), X * (r - Z) - Y, X * Y - b * Z], axis=-1)
    if fam == "linear_saddle":
        A, b = _affine_parts(spec)
        return x @ A.T + b
    if fam == "suspension_shift":
        out = np.zeros_like(x)
        out[..., -1] = spec.params[0]
        return out
    if fam == "user_polynomial":
        C = np.asarray(spec.params, float).reshape(spec.dim, -1)
        E = np.asarray(spec.exponents, int)
        mono = np.prod(x[..., None, :] ** E, axis=-1)  # (..., n_terms)
        return mono @ C.T
    raise ConfigurationError(f"unknown vector-field family {fam!r}")


def _jacobian_raw(spec: VectorFieldSpec, x: np.ndarray) -> np.ndarray:
    fam = spec.family
    n = spec.dim
    x = np.asarray(x, float)
    if fam == "lorenz63":
        s, r, b = spec.params
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        J = np.zeros(x.shape + (3,))
        J[..., 0, 0] = -s
        J[..., 0, 1] = s
        J[..., 1, 0] = r - Z
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -X
        J[..., 2, 0] = Y
        J[..., 2, 1] = X
        J[..., 2, 2] = -b
        return J
    if fam == "linear_saddle":
        A, _ = _affine_parts(spec)
        return np.broadcast_to(A, x.shape + (n,)).copy()
    if fam == "suspension_shift":
        return np.zeros(x.shape + (n,))
    if fam == "user_polynomial":
        C = np.asarray(spec.params, float).reshape(n, -1)
        E = np.asarray(spec.exponents, int)
        J = np.zeros(x.shape + (n,))
        for j in range(n):
            Ej = E.copy()
            coef = Ej[:, j].astype(float)
            Ej[:, j] = np.maximum(Ej[:, j] - 1, 0)
            dmono = coef * np.prod(x[..., None, :] ** Ej, axis=-1)
            J[..., :, j] = dmono @ C.T
        return J
    raise ConfigurationError(f"unknown vector-field family {fam!r}")


def evaluate_field(spec: VectorFieldSpec, x) -> np.ndarray:
    """X(x) including the time-rescale factor."""
    x = np.asarray(x, float)
    return spec.time_scale * _field_raw(spec, x)


def jacobian(spec: VectorFieldSpec, x) -> np.ndarray:
    return spec.time_scale * _jacobian_raw(spec, np.asarray(x, float))


def flow_speed(spec: VectorFieldSpec, x) -> np.ndarray | float:
    v = np.linalg.norm(evaluate_field(spec, x), axis=-1)
    return float(v) if np.ndim(v) == 0 else v


def rk4_step(spec: VectorFieldSpec, x: np.ndarray, h) -> np.ndarray:
    """One RK4 step; ``h`` may be a scalar or broadcastable per-row array."""
    f = lambda y: evaluate_field(spec, y)
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_jacobian(spec: VectorFieldSpec, x: np.ndarray, h) -> np.ndarray:
    """Exact derivative of the RK4 step map at x (batched)."""
    x = np.asarray(x, float)
    n = x.shape[-1]
    I = np.eye(n)
    h = np.asarray(h, float)
    hx = h[..., None] if h.ndim else h  # per-row step sizes, shape x.shape[:-1]
    hm = h[..., None, None] if h.ndim else h
    k1 = evaluate_field(spec, x)
    y2 = x + 0.5 * hx * k1
    k2 = evaluate_field(spec, y2)
    y3 = x + 0.5 * hx * k2
    k3 = evaluate_field(spec, y3)
    y4 = x + hx * k3
    K1 = jacobian(spec, x)
    K2 = jacobian(spec, y2) @ (I + 0.5 * hm * K1)
    K3 = jacobian(spec, y3) @ (I + 0.5 * hm * K2)
    K4 = jacobian(spec, y4) @ (I + hm * K3)
    return I + (hm / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)


def _step_sizes(t: float, h: float) -> np.ndarray:
    if t < 0 or not (h > 0):
        raise ConfigurationError("need t >= 0 and h > 0")
    K = int(math.ceil(t / h - 1e-9))
    if K == 0:
        return np.zeros(0)
    steps = np.full(K, h)
    steps[-1] = t - (K - 1) * h
    return steps


@dataclass
class OrbitSegment:
    x0: np.ndarray
    t: float
    h: float
    samples: np.ndarray  # (K+1, n)
    fields: np.ndarray  # (K+1, n)
    steps: np.ndarray = field(repr=False)  # (K,) step sizes, last may be short

    @property
    def K(self) -> int:
        return len(self.steps)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.steps)])

    @property
    def final(self) -> np.ndarray:
        return self.samples[-1]


def _check_bound(x: np.ndarray, step: int, bound: float):
    nrm = np.linalg.norm(x, axis=-1)
    bad = ~np.isfinite(nrm) | (nrm > bound)
    if np.any(bad):
        raise BlowUpError(step, float(np.max(np.where(np.isfinite(nrm), nrm, np.inf))))


def integrate_orbit(spec: VectorFieldSpec, x0, t: float, h: float = 0.005,
                    bound: float = DEFAULT_BOUND) -> OrbitSegment:
    x = np.array(x0, float)
    if x.shape != (spec.dim,) or not np.all(np.isfinite(x)):
        raise ConfigurationError("initial point must be a finite vector of the field's dimension")
    steps = _step_sizes(t, h)
    out = np.empty((len(steps) + 1, spec.dim))
    out[0] = x
    if flow_speed(spec, x) < SINGULAR_SPEED:
        out[:] = x
    else:
        for i, hi in enumerate(steps):
            x = rk4_step(spec, x, hi)
            _check_bound(x, i + 1, bound)
            out[i + 1] = x
    return OrbitSegment(np.array(x0, float), float(t), float(h), out,
                        evaluate_field(spec, out), steps)


def integrate_batch(spec: VectorFieldSpec, X0, n_steps: int, h: float = 0.005,
                    stride: int = 1, bound: float = DEFAULT_BOUND,
                    on_blowup: str = "raise") -> np.ndarray:
    """Integrate many orbits at once and record every ``stride``-th sample.

    Returns an array (M, n_steps // stride + 1, n).  With ``on_blowup='nan'``
    divergent rows are filled with NaN instead of raising.
    """
    X = np.array(X0, float)
    M = X.shape[0]
    n_rec = n_steps // stride + 1
    out = np.empty((M, n_rec, spec.dim))
    out[:, 0] = X
    alive = np.ones(M, bool)
    frozen = flow_speed(spec, X) < SINGULAR_SPEED
    for i in range(1, n_steps + 1):
        Xn = rk4_step(spec, X, h)
        if frozen.any():
            Xn[frozen] = X[frozen]
        nrm = np.linalg.norm(Xn, axis=-1)
        bad = ~np.isfinite(nrm) | (nrm > bound)
        if bad.any():
            if on_blowup == "raise":
                raise BlowUpError(i, float(np.nanmax(np.where(bad, np.inf, nrm))))
            alive &= ~bad
            Xn[bad] = 0.0
        X = Xn
        if i % stride == 0:
            out[:, i // stride] = X
    if not alive.all():
        out[~alive] = np.nan
    return out


def advance(spec: VectorFieldSpec, X, t: float, h: float = 0.005) -> np.ndarray:
    """Endpoint f_t(x) for a batch of points (rows), same step convention as integrate_orbit."""
    X = np.array(X, float)
    for hi in _step_sizes(abs(t), h):
        X = rk4_step(spec, X, math.copysign(hi, t) if t else hi)
    return X


@dataclass
class TangentCocycle:
    segment: OrbitSegment
    matrices: np.ndarray  # (K, n, n), M_i = D(step map)(x_i)

    def product(self, a: int = 0, b: Optional[int] = None) -> np.ndarray:
        """M_{b-1} ... M_a, the derivative from sample a to sample b."""
        b = len(self.matrices) if b is None else b
        if not (0 <= a <= b <= len(self.matrices)):
            raise ConfigurationError("product indices out of range")
        P = np.eye(self.segment.samples.shape[1])
        for M in self.matrices[a:b]:
            P = M @ P
        return P

    def cumulative(self, stride: int = 1) -> np.ndarray:
        """Products from 0 to every ``stride``-th sample, shape (K//stride+1, n, n)."""
        n = self.segment.samples.shape[1]
        K = len(self.matrices)
        out = np.empty((K // stride + 1, n, n))
        P = np.eye(n)
        out[0] = P
        for i, M in enumerate(self.matrices, start=1):
            P = M @ P
            if i % stride == 0:
                out[i // stride] = P
        return out

    def blocks(self, stride: int) -> np.ndarray:
        """Products over consecutive blocks [j*stride, (j+1)*stride)."""
        K = len(self.matrices)
        nb = K // stride
        if nb == 0:
            return np.zeros((0,) + self.matrices.shape[1:])
        Ms = self.matrices[: nb * stride].reshape(nb, stride, *self.matrices.shape[1:])
        P = Ms[:, 0]
        for j in range(1, stride):
            P = Ms[:, j] @ P
        return P


def tangent_flow(spec: VectorFieldSpec, segment: OrbitSegment) -> TangentCocycle:
    if segment.K == 0:
        return TangentCocycle(segment, np.zeros((0, spec.dim, spec.dim)))
    x = segment.samples[:-1]
    M = rk4_step_jacobian(spec, x, segment.steps)
    if not np.all(np.isfinite(M)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(M), axis=(1, 2)))[0])
        raise BlowUpError(bad, float("inf"))
    return TangentCocycle(segment, M)


def attractor_points(spec: VectorFieldSpec, count: int, seed: int = 0, h: float = 0.005,
                     transient: float = 30.0, spacing: float = 1.0, n_orbits: int = 64,
                     start=None) -> np.ndarray:
    """Sample ``count`` points on the attractor from parallel orbits after a transient.

    Samples are taken every ``spacing`` time units.  Seeds are scattered around
    ``start`` (default: the first non-origin singularity, or (1, 1, 1)).
    """
    rng = np.random.default_rng(seed)
    if start is None:
        others = [s.point for s in spec.singularities if np.linalg.norm(s.point) > 0]
        start = others[0] if others else np.ones(spec.dim)
    n_orbits = max(1, min(n_orbits, count))
    X = np.asarray(start, float) + rng.normal(scale=1.0, size=(n_orbits, spec.dim))
    X = advance(spec, X, transient, h)
    stride = max(1, int(round(spacing / h)))
    per = -(-count // n_orbits)
    rec = integrate_batch(spec, X, per * stride, h, stride)[:, 1:]
    pts = rec.transpose(1, 0, 2).reshape(-1, spec.dim)
    return pts[:count]
