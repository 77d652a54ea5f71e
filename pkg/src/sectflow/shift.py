"""Suspension of the full 2-shift with unit roof, as a symbolic test bed.

Points are one-sided binary words observed at phase 0.  A word is embedded
through a window of ``window`` symbols with weights 2^-(j+1) and the sup norm,
so d(w, w') = 2^-(n+1) where n is the first disagreement.  The orbit segment
of length t visits the shifts k = 0..t-1 (half-open time interval, unit
roof), hence

    d_t(w, w') = 2^-(max(n - t + 1, 0) + 1)

and (t, delta)-closeness is agreement on a prefix: an ultrametric, so
conflicts are equivalence classes keyed by prefixes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass
class ShiftSystem:
    window: int = 8

    @property
    def weights(self) -> np.ndarray:
        return 0.5 ** (np.arange(self.window) + 1)

    def random_words(self, count: int, length: int, seed: int = 0) -> np.ndarray:
        return np.random.default_rng(seed).integers(0, 2, size=(count, length), dtype=np.int8)

    def orbit_samples(self, words: np.ndarray, t: int) -> np.ndarray:
        """Embedded windows at shifts 0..t-1, shape (M, t, window)."""
        words = np.asarray(words)
        if words.shape[1] < t + self.window - 1:
            raise ConfigurationError("words too short for the requested time and window")
        idx = np.arange(t)[:, None] + np.arange(self.window)[None, :]
        return words[:, idx] * self.weights

    def decode(self, samples: np.ndarray) -> np.ndarray:
        return np.rint(np.asarray(samples) / self.weights).astype(np.int8)

    def distance(self, v, w) -> np.ndarray:
        return np.max(np.abs(np.asarray(v) - np.asarray(w)), axis=-1)

    def bowen_distance(self, a, b, t: int) -> float:
        """Sup over shifts 0..t-1 of the embedded distance (direct evaluation)."""
        sa = self.orbit_samples(np.atleast_2d(a), t)
        sb = self.orbit_samples(np.atleast_2d(b), t)
        return float(np.max(np.abs(sa - sb))) if t > 0 else 0.0

    def prefix_length(self, t: int, radius: float, strict: bool = False) -> int:
        """Words agreeing on this many leading symbols are exactly those with d_t <= radius.

        With ``strict`` the relation is d_t < radius.  Returns 0 when every
        pair qualifies.
        """
        # distances take values 2^-(m+1) or 0
        too_far = (lambda d: d >= radius) if strict else (lambda d: d > radius)
        q = 0
        while too_far(0.5 ** (q + 1)):
            q += 1
            if q > self.window:
                raise ConfigurationError("radius below the embedding resolution")
        return 0 if q == 0 else t - 1 + q

    def class_labels(self, words: np.ndarray, t: int, radius: float, strict: bool = False) -> np.ndarray:
        L = self.prefix_length(t, radius, strict)
        words = np.asarray(words)
        if L == 0:
            return np.zeros(len(words), dtype=np.int64)
        _, labels = np.unique(words[:, :L], axis=0, return_inverse=True)
        return labels.ravel()

    def block_entropy(self, blocks: np.ndarray, weights: np.ndarray, k: int) -> float:
        """Shannon entropy of the weighted distribution of leading k-blocks."""
        if k == 0:
            return 0.0
        codes = blocks[:, :k].astype(np.int64) @ (1 << np.arange(k, dtype=np.int64))
        p = np.bincount(codes, weights=weights, minlength=1 << k)
        p = p[p > 0] / p.sum()
        return float(-(p * np.log(p)).sum())


def cylinder_potential(coefficients, lo: float = -np.inf, hi: float = np.inf, window: int = 8):
    """phi(w) = clip(sum_j c_j w_j, lo, hi) evaluated on embedded windows."""
    c = np.zeros(window)
    c[: len(coefficients)] = coefficients
    weights = 0.5 ** (np.arange(window) + 1)

    def phi(v):
        sym = np.rint(np.asarray(v) / weights)
        return np.clip(sym @ c, lo, hi)

    return phi
