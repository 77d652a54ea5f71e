"""Empirical constants: speed-up, expansion rate, cocycle bound, tube shrink, cone constants, cutoffs.

Every constant is measured on a seeded pool and written to a JSON file whose
bytes depend only on the inputs, so two runs with the same settings produce
identical files.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cones import cone_coordinate_bounds_check, splitting_series
from .decomposition import SingularNeighborhood, segment_pool
from .errors import ConfigurationError, DependencyError
from .flow import VectorFieldSpec, attractor_points, evaluate_field
from .pliss import pliss_mask, recurrence_mask
from .poincare import TubularParams, shadow_batch, unit_cocycles

SCHEMA = 1


def digest(obj) -> str:
    """sha256 of the canonical JSON encoding."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


@dataclass
class CalibrationSettings:
    seed: int = 0
    pool: int = 2000
    norm_pool: int = 20000
    h: float = 0.005
    c_grid: tuple = (1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0, 12.0)
    coverage: float = 0.999
    alpha: float = 0.01
    cone_trials: int = 100_000
    rho0: float = 0.05
    rho: float = 0.05
    headroom: float = 1.1
    r: float = 4.0
    r0: float = 10.0
    lam0: float = math.exp(0.1)
    beta: float = 0.5
    kappa: float = 0.5
    segments: int = 300
    segment_length: int = 40
    stable_fraction: float = 0.95


@dataclass
class CalibrationFile:
    c: float
    lam_bar: float
    C_tau: float
    K0: float
    L0: float
    L1: float
    L2: float
    N0: int
    N1: int
    theta0: dict
    alpha: float
    coverage: dict
    provenance: dict
    spec: dict
    settings: dict
    schema: int = SCHEMA

    def validate(self):
        for name in ("c", "lam_bar", "C_tau", "K0", "L0", "L1", "L2", "N0", "N1"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"calibration constant {name} must be positive and finite, got {v}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, default=_jsonable) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def write(self, path) -> str:
        Path(path).write_text(self.to_json())
        return self.hash

    @classmethod
    def read(cls, path) -> "CalibrationFile":
        p = Path(path)
        if not p.is_file():
            raise DependencyError(f"calibration file {p} not found; run the 'calibrate' scenario "
                                  f"with the same config first")
        d = json.loads(p.read_text())
        if d.get("schema") != SCHEMA:
            raise ConfigurationError(f"calibration schema {d.get('schema')} != {SCHEMA}")
        return cls(**d).validate()


# --------------------------------------------------------------------------
# individual measurements

def area_expansion_samples(spec: VectorFieldSpec, P, c: float, window_time: float = 12.0):
    """One-step area expansion J of span(X, F^cu) for the time-``c`` map at each point of P.

    J = m(psi*_1 | F) |X(x_1)|^2 / |X(x)|^2, computed with the field sped up
    by ``c`` so that one unit step is ``c`` time units of the original flow.
    """
    sp = spec.rescaled(c)
    w = max(2, int(math.ceil(window_time / c)))
    h = 1.0 / (200 * int(math.ceil(c)))
    coc = unit_cocycles(sp, P, 2 * w + 3, h)
    k = w + 1
    _, F, _, _ = splitting_series(coc, w, 1, np.array([k]))
    m = np.linalg.svd(coc.psi_star[:, k] @ F[:, 0], compute_uv=False)[..., -1]
    s = coc.speeds
    return m * (s[:, k + 1] / s[:, k]) ** 2


def calibrate_speedup(spec: VectorFieldSpec, P, c_grid: Sequence[float], coverage: float):
    """Smallest c on the grid with J > 1 on a ``coverage`` fraction and infimum > 1.

    Returns (c, lam_bar, fraction, per-c table).  lam_bar is the empirical
    infimum of J at the chosen c.
    """
    table = {}
    for c in c_grid:
        J = area_expansion_samples(spec, P, float(c))
        frac = float(np.mean(J > 1.0))
        table[str(float(c))] = {"fraction": frac, "infimum": float(J.min())}
        if frac >= coverage and J.min() > 1.0:
            return float(c), float(J.min()), frac, table
    raise ConfigurationError(f"no speed-up in {list(c_grid)} reaches the expansion coverage {coverage}")


def cocycle_norm_samples(spec: VectorFieldSpec, P, h: float = 0.005, pieces: int = 4):
    """max over s in {+-k/pieces} of ||psi*_s|| for each point (forward and backward)."""
    coc = unit_cocycles(spec, P, pieces, h, block_time=1.0 / pieces)
    M = np.broadcast_to(np.eye(spec.dim - 1), coc.psi_star.shape[:1] + (spec.dim - 1,) * 2).copy()
    best = np.zeros(len(P))
    for j in range(pieces):
        M = coc.psi_star[:, j] @ M
        sv = np.linalg.svd(M, compute_uv=False)
        best = np.maximum(best, np.maximum(sv[:, 0], 1.0 / sv[:, -1]))
    return best


def measure_K0(spec: VectorFieldSpec, P, params: TubularParams, seed: int, h: float = 0.005):
    """Largest one-step growth of the relative normal displacement over random pairs."""
    rng = np.random.default_rng(seed)
    X = np.asarray(P, float)
    V = rng.normal(size=X.shape)
    d = evaluate_field(spec, X)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    V -= np.sum(V * d, axis=1, keepdims=True) * d
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    sp = np.linalg.norm(evaluate_field(spec, X), axis=1)
    u = rng.uniform(0.05, 0.5, len(X))
    Y = X + (u * params.rho * sp)[:, None] * V
    loose = TubularParams(params.rho0, 1.0 + 1e-9, params.rho)
    ok, _, _, rel = shadow_batch(spec, X, Y, 1, loose, h)
    growth = rel[:, 1] / rel[:, 0]
    return float(np.nanmax(growth))


def measure_cutoffs(spec: VectorFieldSpec, starts, length: int, nb: SingularNeighborhood,
                    lam0: float, beta: float, stable_fraction: float, h: float = 0.005):
    """Hyperbolic-time density theta0 and the lengths N0, N1 where the bounds stabilize.

    For each prefix length L of each segment whose endpoints lie outside W,
    the density of (lam0, cu)-hyperbolic times among 1..L is recorded.
    theta0 is half the median density at the full length.  N0 is the
    smallest L from which on at least ``stable_fraction`` of the admissible
    prefixes have density >= theta0; N1 the smallest L from which on at least
    that fraction has a simultaneous Pliss time.
    """
    pool = segment_pool(spec, starts, length, [nb], None, h=h)
    b1 = math.log(lam0)
    dens = np.full((len(pool), length + 1), np.nan)
    simul = np.zeros((len(pool), length + 1), bool)
    for i, d in enumerate(pool):
        if d.in_W[0]:
            continue
        # both properties at index m only look at the first m steps, so one scan serves every prefix
        hyp = pliss_mask(d.a_log, b1)                  # entry m-1 <-> time m
        both = hyp & recurrence_mask(d.in_W, beta)[1:]
        L = np.arange(1, length + 1)
        out = ~d.in_W[1:]
        dens[i, 1:] = np.where(out, np.cumsum(hyp) / L, np.nan)
        simul[i, 1:] = out & (np.cumsum(both) > 0)
    theta0 = 0.5 * float(np.nanmedian(dens[:, length]))

    def first_stable(ok_frac):
        N = length
        for L in range(length, 0, -1):
            if ok_frac[L] >= stable_fraction:
                N = L
            else:
                break
        return N

    valid = ~np.isnan(dens)
    frac_hyp = np.array([np.mean(dens[valid[:, L], L] >= theta0) if valid[:, L].any() else 0.0
                         for L in range(length + 1)])
    frac_sim = np.array([np.mean(simul[valid[:, L], L]) if valid[:, L].any() else 0.0
                         for L in range(length + 1)])
    quant = np.nanquantile(dens[:, length], [0.0, 0.05, 0.5])
    theta = {"theta0": theta0, "min": float(quant[0]), "q05": float(quant[1]),
             "median": float(quant[2])}
    return theta, first_stable(frac_hyp), first_stable(frac_sim)


# --------------------------------------------------------------------------

def calibrate(spec: VectorFieldSpec, settings: Optional[CalibrationSettings] = None) -> CalibrationFile:
    s = settings or CalibrationSettings()
    key = {"spec": spec.key(), "settings": asdict(s)}
    P = attractor_points(spec, s.pool, seed=s.seed, h=s.h, n_orbits=min(s.pool, 500))
    prov = {}

    c, lam_bar, frac, table = calibrate_speedup(spec, P, s.c_grid, s.coverage)
    prov["speedup"] = digest({"run": "speedup", **key})

    # the backward norm is dominated by rare passages near a singularity: use a larger pool
    Q = attractor_points(spec, s.norm_pool, seed=s.seed + 4, h=s.h, n_orbits=min(s.norm_pool, 2000))
    norms = cocycle_norm_samples(spec, Q, s.h)
    C_tau = float(norms.max() * s.headroom)
    prov["C_tau"] = digest({"run": "C_tau", **key})

    params = TubularParams(s.rho0, 2.0, s.rho)
    K0 = max(measure_K0(spec, P, params, s.seed + 1, s.h) * s.headroom, 1.0 + 1e-6)
    prov["K0"] = digest({"run": "K0", **key})

    bounds, viol = cone_coordinate_bounds_check(s.cone_trials, s.alpha, seed=s.seed + 2,
                                                headroom=s.headroom)
    prov["cone_constants"] = digest({"run": "cones", **key})

    sing = spec.active_singularities
    if sing:
        nb = SingularNeighborhood(sing[0], s.r, s.r0, h=s.h)
        starts = attractor_points(spec, s.segments, seed=s.seed + 3, h=s.h, n_orbits=s.segments)
        theta, N0, N1 = measure_cutoffs(spec, starts, s.segment_length, nb, s.lam0, s.beta,
                                        s.stable_fraction, s.h)
    else:
        theta, N0, N1 = {"theta0": float("nan")}, 1, 1
    prov["cutoffs"] = digest({"run": "cutoffs", **key})

    cal = CalibrationFile(c=c, lam_bar=lam_bar, C_tau=C_tau, K0=K0, L0=bounds.L0, L1=bounds.L1,
                          L2=bounds.L2, N0=int(N0), N1=int(N1), theta0=theta, alpha=s.alpha,
                          coverage={"speedup": table, "expansion_fraction": frac,
                                    "cone_violations": viol},
                          provenance=prov, spec=spec.key(), settings=asdict(s))
    return cal.validate()
