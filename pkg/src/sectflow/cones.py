"""Cone fields and numerical dominated splittings of the normal bundle.

Subspaces live in the frame coordinates of a :class:`NormalCocycle` (columns of
a ``(d, r)`` matrix with ``d = n - 1``).  The F-part is found by forward power
iteration of psi*, the E-part by backward iteration of its inverse, each
re-orthonormalized by QR at every step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import ConfigurationError, SplittingEstimationError
from .flow import TangentCocycle
from .poincare import NormalCocycle

SUBSPACE_TAGS = ("E^s_N", "F^cu_N", "E^c_sigma", "user")


@dataclass(frozen=True)
class ConeParams:
    alpha: float
    reference: str = "F^cu_N"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigurationError("cone aperture must lie in (0, 1)")
        if self.reference not in SUBSPACE_TAGS:
            raise ConfigurationError(f"unknown subspace tag {self.reference!r}")


@dataclass
class SplittingFrame:
    """E^s_N and F^cu_N at one base point, in ambient and frame coordinates."""
    base: np.ndarray
    E: np.ndarray  # (n, s) ambient, orthonormal
    F: np.ndarray  # (n, n-1-s)
    E_coords: np.ndarray  # (d, s)
    F_coords: np.ndarray
    basis: np.ndarray  # (n, d) normal frame the coordinates refer to
    residual: float

    @property
    def transversality(self) -> float:
        return principal_angle(self.E_coords, self.F_coords, smallest=True)


def _orth(V):
    Q, R = np.linalg.qr(V)
    s = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    s[s == 0] = 1
    return Q * s[..., None, :]


def principal_angle(A, B, smallest: bool = False):
    """Largest (or smallest) principal angle between column spans of orthonormal A, B."""
    sv = np.linalg.svd(np.swapaxes(A, -1, -2) @ B, compute_uv=False)
    sv = np.clip(sv, 0.0, 1.0)
    if smallest:
        return np.arccos(sv[..., 0])
    # arcsin form of the largest angle is accurate for nearly equal subspaces
    if A.shape[-1] == B.shape[-1]:
        P = B - A @ (np.swapaxes(A, -1, -2) @ B)
        return np.arcsin(np.clip(np.linalg.norm(P, ord=2, axis=(-2, -1)), 0.0, 1.0))
    return np.arccos(sv[..., -1])


def _generic(d, r, seed=12345):
    return _orth(np.random.default_rng(seed).normal(size=(d, r)))


def _forward(mats, start, steps, V):
    for j in range(steps):
        V = _orth(mats[..., start + j, :, :] @ V)
    return V


def _backward(inv, stop, steps, V):
    # inv[j] maps N(x_{j+1}) -> N(x_j); iterate from index stop+steps down to stop
    for j in range(steps):
        V = _orth(inv[..., stop + steps - 1 - j, :, :] @ V)
    return V


def splitting_series(cocycle: NormalCocycle, window: int = 200, s_dim: int = 1,
                     indices=None):
    """Splitting at many indices at once (vectorized over indices and batch axes).

    Returns (E, F, residual, idx) with E of shape (..., len(idx), d, s) in frame
    coordinates.  ``residual`` is the largest principal-angle change of either
    subspace when the window is lengthened by one step.
    """
    mats = cocycle.psi_star
    m = mats.shape[-3]
    d = mats.shape[-1]
    if window < 1:
        raise SplittingEstimationError("window must be at least one step")
    if not 1 <= s_dim < d:
        raise ConfigurationError("need 1 <= dim E < n - 1")
    lo, hi = window + 1, m - window - 1
    if indices is None:
        indices = np.arange(lo, hi + 1)
    indices = np.asarray(indices, int)
    if indices.size == 0 or indices.min() < lo or indices.max() > hi:
        raise SplittingEstimationError(
            f"need {window + 1} cocycle steps on both sides (available range {lo}..{hi})")
    inv = np.linalg.inv(mats)
    # gather windows: (..., K, window+1, d, d)
    fw = mats[..., (indices - window - 1)[:, None] + np.arange(window + 1), :, :]
    bw = inv[..., indices[:, None] + np.arange(window + 1), :, :]
    f_dim = d - s_dim
    Vf0 = _generic(d, f_dim, 1)
    Ve0 = _generic(d, s_dim, 2)
    shape = fw.shape[:-3]
    F_long = _forward(fw, 0, window + 1, np.broadcast_to(Vf0, shape + (d, f_dim)))
    F_short = _forward(fw[..., 1:, :, :], 0, window, np.broadcast_to(Vf0, shape + (d, f_dim)))
    E_long = _backward(bw, 0, window + 1, np.broadcast_to(Ve0, shape + (d, s_dim)))
    E_short = _backward(bw[..., :-1, :, :], 0, window, np.broadcast_to(Ve0, shape + (d, s_dim)))
    res = np.maximum(principal_angle(F_long, F_short), principal_angle(E_long, E_short))
    return E_long, F_long, res, indices


def estimate_splitting(cocycle: NormalCocycle, window: int = 200, index: Optional[int] = None,
                       s_dim: int = 1, tol: Optional[float] = None) -> SplittingFrame:
    """Splitting at one sample of an unbatched cocycle (default: the middle)."""
    if cocycle.psi.ndim != 3:
        raise ConfigurationError("estimate_splitting expects a single (unbatched) cocycle")
    m = cocycle.psi.shape[0]
    if index is None:
        index = m // 2
    E, F, res, _ = splitting_series(cocycle, window, s_dim, [index])
    E, F, res = E[0], F[0], float(res[0])
    if tol is not None and res > tol:
        raise SplittingEstimationError(f"splitting residual {res:.2e} above tolerance {tol:.1e}")
    B = cocycle.frames.bases[index]
    return SplittingFrame(cocycle.points[index], B @ E, B @ F, E, F, B, res)


def _decompose(v_coords, E, F):
    """Oblique decomposition of v (frame coords) along E (+) F; returns (|v_E|, |v_F|)."""
    A = np.concatenate([E, F], axis=-1)
    c = np.linalg.solve(A, v_coords[..., None])[..., 0]
    s = E.shape[-1]
    return np.linalg.norm(c[..., :s], axis=-1), np.linalg.norm(c[..., s:], axis=-1)


def cone_membership(v, frame: SplittingFrame, alpha: float) -> bool:
    """Closed (alpha, F)-cone test |v_E| <= alpha |v_F| for a normal vector v."""
    v = np.asarray(v, float)
    coords = frame.basis.T @ v if v.shape[-1] == frame.basis.shape[0] else v
    vE, vF = _decompose(coords, frame.E_coords, frame.F_coords)
    return bool(vE <= alpha * vF * (1 + 1e-12) + 1e-300 * (vF > 0))


@dataclass
class ConeInvarianceReport:
    inside: np.ndarray  # per-step booleans
    theta: np.ndarray  # image aperture / alpha
    alpha: float

    @property
    def all_inside(self) -> bool:
        return bool(np.all(self.inside))


def _boundary_samples(s_dim, f_dim, n=64, seed=3):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, s_dim))
    b = rng.normal(size=(n, f_dim))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    if s_dim == 1 and f_dim == 1:
        a = np.array([[1.0], [-1.0]])
        b = np.ones((2, 1))
    return a, b


def cone_invariance_report(cocycle: NormalCocycle, E, F, alpha: float, idx) -> ConeInvarianceReport:
    """Check psi* maps the alpha-cone of F at idx[j] into the alpha-cone at idx[j]+1.

    ``E``, ``F`` are splitting bases (frame coordinates) at consecutive indices
    ``idx`` (as returned by :func:`splitting_series`); only steps with both
    ends estimated are reported.
    """
    idx = np.asarray(idx)
    consecutive = np.flatnonzero(np.diff(idx) == 1)
    s_dim, f_dim = E.shape[-1], F.shape[-1]
    a, b = _boundary_samples(s_dim, f_dim)
    thetas = []
    for j in consecutive:
        k = idx[j]
        A = cocycle.psi_star[..., k, :, :]
        S0 = np.concatenate([E[..., j, :, :], F[..., j, :, :]], axis=-1)
        S1 = np.concatenate([E[..., j + 1, :, :], F[..., j + 1, :, :]], axis=-1)
        C = np.linalg.solve(S1, A @ S0)  # psi* in splitting coordinates
        v = np.concatenate([alpha * a, b], axis=-1).T  # boundary vectors, (d, m)
        w = C @ v
        ratio = np.linalg.norm(w[..., :s_dim, :], axis=-2) / np.linalg.norm(w[..., s_dim:, :], axis=-2)
        thetas.append(ratio.max(axis=-1) / alpha)
    theta = np.stack(thetas, axis=-1) if thetas else np.zeros(0)
    return ConeInvarianceReport(theta <= 1.0, theta, alpha)


def sectional_expansion_check(tangent: TangentCocycle, plane, k_steps: Optional[int] = None) -> np.ndarray:
    """Per-step area growth factors of a 2-plane pushed by the tangent cocycle."""
    V = np.asarray(plane, float)
    if V.ndim != 2 or V.shape[1] != 2 or np.linalg.matrix_rank(V, tol=1e-10) < 2:
        raise ConfigurationError("plane must be given by two independent columns")
    k = len(tangent.matrices) if k_steps is None else k_steps
    V = _orth(V)
    out = np.empty(k)
    for i in range(k):
        W = tangent.matrices[i] @ V
        out[i] = np.sqrt(max(np.linalg.det(W.T @ W), 0.0))
        V = _orth(W)
    return out


def unit_area_expansion(cocycle: NormalCocycle, F) -> np.ndarray:
    """Unit-block area expansion of span(X, F) from the scaled cocycle.

    J_k = |psi*_k f| |X(x_{k+1})|^2 / |X(x_k)|^2 for unit f spanning the
    one-dimensional F at index k; ``F`` has shape (..., m, d, 1) aligned with the
    first m cocycle steps.
    """
    m = F.shape[-3]
    A = cocycle.psi_star[..., :m, :, :]
    growth = np.linalg.svd(A @ F, compute_uv=False)[..., -1]
    s = cocycle.speeds
    return growth * (s[..., 1:m + 1] / s[..., :m]) ** 2


def one_step_backward_bound_check(cocycle: NormalCocycle, F, step, lam_bar: float):
    """LHS - RHS of the one-step backward bound on F^cu at x_{step+1}.

    LHS = ||psi*_{-1}|F(x_{step+1})|| = 1 / m(psi*_1 |F(x_step)|),
    RHS = lam_bar^{-1} |X(x_{step+1})|^2 / |X(x_step)|^2.  ``F`` is the F-basis
    (frame coordinates) at x_step; arrays broadcast over batch axes.
    """
    A = cocycle.psi_star[..., step, :, :]
    m = np.linalg.svd(A @ F, compute_uv=False)[..., -1]
    s = cocycle.speeds
    rhs = (s[..., step + 1] / s[..., step]) ** 2 / lam_bar
    return 1.0 / m - rhs


# --------------------------------------------------------------------------
# coordinate-comparison estimates for vectors in cones

@dataclass
class ConeLemmaBounds:
    alpha: float
    L0: float
    L1: float
    L2: float
    C0_prime: dict = field(default_factory=dict)
    trials: int = 0
    strict_violations: int = 0  # first-order inequalities without the alpha^2 remainder

    def to_dict(self):
        return asdict(self)


def _sample_cone_pairs(rng, trials, alpha, n, k):
    """Random (y, y^F) with y^F in the (alpha,F)-cone, y - y^F in the (alpha,E)-cone."""
    def cone_vec(dim_main, dim_side):
        main = rng.normal(size=(trials, dim_main))
        main /= np.linalg.norm(main, axis=1, keepdims=True)
        side = rng.normal(size=(trials, dim_side))
        side /= np.linalg.norm(side, axis=1, keepdims=True)
        # aperture fraction with an atom on the boundary (worst case)
        u = np.where(rng.random(trials) < 0.3, 1.0, rng.random(trials))
        return main, alpha * u[:, None] * side

    f, ef = cone_vec(n - k, k)
    e, fe = cone_vec(k, n - k)
    # log-uniform magnitudes to cover both coordinate regimes
    a = np.exp(rng.uniform(np.log(1e-3), 0, trials))
    b = np.exp(rng.uniform(np.log(1e-3), 0, trials))
    yF = np.concatenate([ef, f], axis=1) * a[:, None]
    w = np.concatenate([e, fe], axis=1) * b[:, None]
    y = yF + w
    scale = np.maximum(1.0, np.maximum(np.linalg.norm(y, axis=1), np.linalg.norm(yF, axis=1)))
    return y / scale[:, None], yF / scale[:, None]


def _comparecoord_requirements(y, yF, alpha, k, C0s=(0.8, 1.8), remainder: bool = True):
    """Smallest L0 (and C0') making every inequality hold, per trial.

    The bounds are first order in alpha; with ``remainder`` an additive
    alpha^2 (|y1| + |y2|) term is allowed, without it the strict inequalities
    are tested (these fail at second order when one coordinate vanishes).
    """
    y1 = np.linalg.norm(y[:, :k], axis=1)
    y2 = np.linalg.norm(y[:, k:], axis=1)
    nF = np.linalg.norm(yF, axis=1)
    nW = np.linalg.norm(y - yF, axis=1)
    r2 = alpha ** 2 * (y1 + y2) if remainder else 0.0
    tiny = 1e-300
    req = [
        (y2 - nF - r2) / (alpha * np.maximum(y1, tiny)),
        (nF - y2 - r2) / (alpha * np.maximum(y1 + y2, tiny)),
        (y1 - nW - r2) / (alpha * np.maximum(y2, tiny)),
        (nW - y1 - r2) / (alpha * np.maximum(y1 + y2, tiny)),
    ]
    c0p = {}
    for C0 in C0s:
        m1 = nF >= C0 * nW
        m2 = nW >= C0 * nF
        req.append(np.where(m1, (y2 - nF - r2) * C0 / (alpha * np.maximum(y2, tiny)), -np.inf))
        req.append(np.where(m1, (nF - y2 - r2) / ((1 / C0 + 1) * alpha * np.maximum(y2, tiny)), -np.inf))
        req.append(np.where(m2, (y1 - nW - r2) * C0 / (alpha * np.maximum(y1, tiny)), -np.inf))
        req.append(np.where(m2, (nW - y1 - r2) / ((1 / C0 + 1) * alpha * np.maximum(y1, tiny)), -np.inf))
        c1 = np.where(m1, (1 - y2 / (C0 * np.maximum(y1, tiny))) / alpha, -np.inf)
        c2 = np.where(m2, (1 - y1 / (C0 * np.maximum(y2, tiny))) / alpha, -np.inf)
        c0p[C0] = np.maximum(c1, c2)
    return np.max(np.stack(req), axis=0), c0p


def _disktovec_requirements(rng, trials, alpha, n, segments=16):
    """Random 1-D polyline graphs over E with slope bound alpha: (d_D/|y-x| - 1)/alpha."""
    nodes = np.sort(rng.uniform(-1, 1, size=(trials, segments + 1)), axis=1)
    dt = np.diff(nodes, axis=1)
    slope = rng.normal(size=(trials, segments, n - 1))
    slope *= (alpha * rng.uniform(0, 1, (trials, segments, 1)) ** 0.25
              / np.linalg.norm(slope, axis=2, keepdims=True))
    g = np.concatenate([np.zeros((trials, 1, n - 1)), np.cumsum(slope * dt[..., None], axis=1)], axis=1)
    # random pair of points on the polyline (at nodes and interior parameters)
    i, j = np.sort(rng.integers(0, segments + 1, size=(2, trials)), axis=0)
    j = np.where(i == j, np.minimum(j + 1, segments), j)
    i = np.where(i == j, i - 1, i)
    seg_len = dt * np.sqrt(1 + np.sum(slope ** 2, axis=2))
    cum = np.concatenate([np.zeros((trials, 1)), np.cumsum(seg_len, axis=1)], axis=1)
    r = np.arange(trials)
    dD = cum[r, j] - cum[r, i]
    chord = np.sqrt((nodes[r, j] - nodes[r, i]) ** 2 + np.sum((g[r, j] - g[r, i]) ** 2, axis=1))
    return (dD / chord - 1) / alpha, dD, chord


def _changecoord_requirements(rng, trials, alpha, n, k=1):
    """Flat leaves: D^F_i planes through 0 and D^E_i lines through y (k = 1)."""
    y, _ = _sample_cone_pairs(rng, trials, alpha, n, k)

    def flat(count):
        a = rng.normal(size=(count, n - 1))
        a *= alpha * rng.uniform(0, 1, (count, 1)) / np.linalg.norm(a, axis=1, keepdims=True)
        b = rng.normal(size=(count, n - 1))
        b *= alpha * rng.uniform(0, 1, (count, 1)) / np.linalg.norm(b, axis=1, keepdims=True)
        s = (np.sum(a * y[:, 1:], axis=1) - y[:, 0]) / (1 - np.sum(a * b, axis=1))
        u = y[:, 1:] + s[:, None] * b
        yF = np.concatenate([np.sum(a * u, axis=1, keepdims=True), u], axis=1)
        dE = np.abs(s) * np.sqrt(1 + np.sum(b ** 2, axis=1))
        return np.linalg.norm(yF, axis=1), dE

    dF1, dE1 = flat(trials)
    dF2, dE2 = flat(trials)
    c1 = dF1 >= 0.9 * dE1
    c2 = dE1 >= 0.9 * dF1
    req1 = np.where(c1, np.abs(dF2 / dF1 - 1) / alpha, -np.inf)
    req2 = np.where(c2, np.abs(dE2 / np.maximum(dE1, 1e-300) - 1) / alpha, -np.inf)
    half_ok = np.where(c1, dF2 >= 0.5 * dE2, True) & np.where(c2, dE2 >= 0.5 * dF2, True)
    return np.maximum(req1, req2), half_ok


def cone_coordinate_bounds_check(trials: int, alpha: float, seed: int = 0, n: int = 3, k: int = 1,
                                 L0: Optional[float] = None, L1: Optional[float] = None,
                                 L2: Optional[float] = None, headroom: float = 1.1):
    """Randomized check of the coordinate-comparison, disk-distance and coordinate-change bounds.

    Constants not supplied are measured on the same trials (smallest passing
    value times ``headroom``).  Returns (bounds, violations) where
    ``violations`` counts trials failing at the returned constants.
    """
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    y, yF = _sample_cone_pairs(rng, trials, alpha, n, k)
    need0, c0p = _comparecoord_requirements(y, yF, alpha, k)
    need1, _, _ = _disktovec_requirements(rng, trials, alpha, n)
    need2, half_ok = _changecoord_requirements(rng, trials, alpha, n)
    measured_c0p = {str(c): float(max(np.max(v), 0.0)) * headroom + 1e-12 for c, v in c0p.items()}
    if L0 is None:
        L0 = max(float(np.max(need0)) * headroom, 1.0 + 1e-9)
    if L1 is None:
        L1 = max(float(np.max(need1)) * headroom, 1e-12)
    if L2 is None:
        L2 = max(float(np.max(need2)) * headroom, 1e-12)
    viol = int(np.sum(need0 > L0) + np.sum(need1 > L1) + np.sum(need2 > L2) + np.sum(~half_ok))
    viol += int(sum(np.sum(v > measured_c0p[str(c)]) for c, v in c0p.items()))
    strict, _ = _comparecoord_requirements(y, yF, alpha, k, remainder=False)
    return ConeLemmaBounds(alpha, float(L0), float(L1), float(L2), measured_c0p, trials,
                           int(np.sum(strict > L0))), viol
