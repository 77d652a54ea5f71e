"""Pliss times, hyperbolic times, recurrence times and their gluing.

Conventions (all 1-based in the mathematical sense):

* a real sequence ``a`` has entries a_1..a_N stored as ``a[0..N-1]``; index m
  is a Pliss time when sum_{j=n+1}^{m} a_j >= b1 (m - n) for all 0 <= n < m.
  With D_k = sum_{j<=k} (a_j - b1) this says D_m >= max(D_0..D_{m-1}), so one
  forward pass with a running maximum finds all of them.
* a visit sequence ``v`` has entries v_0..v_N (v_i: x_i lies in W); index k is
  a recurrence time when every window [k-s, k] has at most beta (s+1) visits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, HypothesisViolation

KINDS = ("generic", "cu-hyperbolic", "recurrence", "simultaneous")
COMPENSATE_ABOVE = 10_000


@dataclass(frozen=True)
class PlissConfig:
    A: float = 1.0
    b1: float = 0.25
    b2: float = 0.5
    lam0: float = math.e ** 0.5
    beta: float = 0.5
    kappa: float = 0.1
    beta1: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.b1 < self.b2 <= self.A):
            raise ConfigurationError("need 0 < b1 < b2 <= A")
        if not self.lam0 > 1:
            raise ConfigurationError("need lambda0 > 1")
        if not (0 < self.beta < 1 and 0 < self.kappa < 1):
            raise ConfigurationError("need beta, kappa in (0, 1)")
        if self.beta1 is None:
            object.__setattr__(self, "beta1", self.beta * (1 - self.kappa) * (1 - 1e-6))
        if not 0 < self.beta1 < self.beta:
            raise ConfigurationError("need 0 < beta1 < beta")

    @property
    def theta0(self) -> float:
        return (self.b2 - self.b1) / (self.A - self.b1)


@dataclass
class PlissRecord:
    indices: tuple
    N: int  # number of candidate positions the density refers to
    kind: str = "generic"
    params: dict = field(default_factory=dict)
    hypothesis_held: Optional[bool] = None

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown record kind {self.kind!r}")

    @property
    def count(self) -> int:
        return len(self.indices)

    @property
    def density(self) -> float:
        return self.count / self.N if self.N else 0.0

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "N": self.N, "indices": list(self.indices),
                           "count": self.count, "density": self.density,
                           "params": self.params, "hypothesis_held": self.hypothesis_held})


def _compensated_cumsum(x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    s = 0.0
    c = 0.0
    for i, v in enumerate(x.tolist()):
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
        out[i] = s + c
    return out


def pliss_mask(a, b1: float) -> np.ndarray:
    """Boolean mask of Pliss times along the last axis (batched, no hypothesis checks)."""
    a = np.asarray(a, float)
    if a.ndim == 1 and a.shape[0] > COMPENSATE_ABOVE:
        D = _compensated_cumsum(a - b1)
    else:
        D = np.cumsum(a - b1, axis=-1)
    zero = np.zeros(a.shape[:-1] + (1,))
    prev = np.maximum.accumulate(np.concatenate([zero, D[..., :-1]], axis=-1), axis=-1)
    return D >= prev


def pliss_times(a: Sequence[float], cfg: PlissConfig, kind: str = "generic") -> PlissRecord:
    a = np.asarray(a, float)
    if a.ndim != 1:
        raise ConfigurationError("sequence must be one-dimensional")
    if np.any(a > cfg.A):
        j = int(np.flatnonzero(a > cfg.A)[0]) + 1
        raise HypothesisViolation(f"a_{j} = {a[j - 1]:.6g} exceeds the cap A = {cfg.A}")
    N = len(a)
    idx = np.flatnonzero(pliss_mask(a, cfg.b1)) + 1 if N else np.zeros(0, int)
    held = bool(math.fsum(a.tolist()) >= cfg.b2 * N) if N else None
    return PlissRecord(tuple(idx), N, kind,
                       {"A": cfg.A, "b1": cfg.b1, "b2": cfg.b2, "theta0": cfg.theta0}, held)


def is_pliss_time(a: Sequence[float], m: int, b1: float) -> bool:
    """Direct check of the defining inequality at index m (quadratic, for oracles)."""
    a = np.asarray(a, float)
    return all(math.fsum(a[n:m].tolist()) >= b1 * (m - n) for n in range(m))


def backward_contraction_logs(psi_star: np.ndarray, F: np.ndarray) -> np.ndarray:
    """a_j = -log ||psi*_{-1, x_j}|F(x_j)||, j = 1..m, from unit-step cocycle data.

    ``psi_star[..., j-1]`` maps N(x_{j-1}) -> N(x_j) and ``F[..., j-1]`` is the
    F-basis at x_{j-1}; the inverse restricted to F(x_j) has norm
    1 / m(psi*|F(x_{j-1})).
    """
    m = np.linalg.svd(psi_star @ F, compute_uv=False)[..., -1]
    return np.log(m)


def cu_hyperbolic_times(a_log, lam0: float, cap: Optional[float] = None) -> PlissRecord:
    """Hyperbolic times of the segment from the backward-contraction logs a_1..a_N.

    Index m is returned iff prod_{i=0}^{j-1} ||psi*_{-1,x_{m-i}}|F|| <= lam0^{-j}
    for every j = 1..m, i.e. m is a Pliss time of a with b1 = log lam0.
    """
    a = np.asarray(a_log, float)
    b1 = math.log(lam0)
    N = len(a)
    idx = np.flatnonzero(pliss_mask(a, b1)) + 1 if N else np.zeros(0, int)
    return PlissRecord(tuple(idx), N, "cu-hyperbolic",
                       {"lam0": lam0, "b1": b1, "cap": cap if cap is not None else
                        (float(np.max(a)) if N else None)})


def hyperbolic_time_brute(a_log, m: int, lam0: float) -> bool:
    """Product form of the hyperbolic-time inequality, checked for every j <= m."""
    c = np.exp(-np.asarray(a_log, float))  # ||psi*_{-1}|F|| per step
    prod = 1.0
    for j in range(1, m + 1):
        prod *= c[m - j]
        if prod > lam0 ** (-j) * (1 + 1e-12):
            return False
    return True


def _frac(beta) -> Fraction:
    return beta if isinstance(beta, Fraction) else Fraction(str(beta))


def recurrence_mask(visits, beta) -> np.ndarray:
    """Exact recurrence-time mask over indices 0..N (batched along the last axis).

    k qualifies iff for all m in [-1, k-1]: C_k - C_m <= beta (k - m), with C the
    inclusive visit counts; equivalently C_k - beta k <= min_{m<k}(C_m - beta m).
    Integer arithmetic with beta = p/q avoids rounding.
    """
    v = np.asarray(visits, bool)
    b = _frac(beta)
    p, q = b.numerator, b.denominator
    C = np.cumsum(v, axis=-1, dtype=np.int64)
    k = np.arange(v.shape[-1], dtype=np.int64)
    G = q * C - p * k  # q (C_k - beta k)
    init = np.full(v.shape[:-1] + (1,), p, dtype=np.int64)  # m = -1: C=0, -beta*(-1) -> +p
    prev = np.minimum.accumulate(np.concatenate([init, G[..., :-1]], axis=-1), axis=-1)
    return G <= prev


def recurrence_pliss_times(visits, beta) -> PlissRecord:
    v = np.asarray(visits, bool)
    if not 0 < float(beta) < 1:
        raise ConfigurationError("beta must lie in (0, 1)")
    idx = np.flatnonzero(recurrence_mask(v, beta))
    return PlissRecord(tuple(idx), len(v), "recurrence", {"beta": float(beta)})


def recurrence_time_brute(visits, k: int, beta) -> bool:
    v = np.asarray(visits, bool)
    b = _frac(beta)
    return all(int(v[k - s:k + 1].sum()) <= b * (s + 1) for s in range(k + 1))


def simultaneous_pliss_times(hyp: PlissRecord, rec: PlissRecord) -> PlissRecord:
    idx = sorted(set(hyp.indices) & set(rec.indices))
    return PlissRecord(tuple(idx), max(hyp.N, rec.N), "simultaneous",
                       {"hyp": hyp.params, "rec": rec.params})


def glue_check(a, b, kind: str = "generic", b1: Optional[float] = None, beta=None) -> bool:
    """Is the end of the concatenated segment a Pliss time of the requested kind?

    generic/cu-hyperbolic: ``a``, ``b`` are real sequences (a_1..a_n, a'_1..a'_m),
    concatenated as a + a'.  recurrence: visit sequences v_0..v_n and v'_0..v'_m
    with v'_0 the shared point x_t, concatenated as v + v'[1:].  simultaneous:
    ``a`` and ``b`` are pairs (real, visits).
    """
    if kind in ("generic", "cu-hyperbolic"):
        seq = np.concatenate([np.asarray(a, float), np.asarray(b, float)])
        return bool(pliss_mask(seq, b1)[-1]) if len(seq) else True
    if kind == "recurrence":
        v = np.concatenate([np.asarray(a, bool), np.asarray(b, bool)[1:]])
        return bool(recurrence_mask(v, beta)[-1])
    if kind == "simultaneous":
        return glue_check(a[0], b[0], "generic", b1=b1) and glue_check(a[1], b[1], "recurrence", beta=beta)
    raise ConfigurationError(f"unknown glue kind {kind!r}")


def last_simultaneous_time(a_log, visits, b1: float, beta, lo: int, hi: int) -> Optional[int]:
    """Largest tau in (lo, hi] that is a simultaneous time of the sub-segment starting at lo.

    ``a_log[j-1]`` is the contraction log of the step into sample j and
    ``visits[i]`` the W-membership of sample i; indices are absolute.
    """
    if hi <= lo:
        return None
    h = pliss_mask(np.asarray(a_log[lo:hi], float), b1)  # relative times 1..hi-lo
    r = recurrence_mask(np.asarray(visits[lo:hi + 1], bool), beta)[1:]
    both = np.flatnonzero(h & r)
    return int(lo + both[-1] + 1) if both.size else None
