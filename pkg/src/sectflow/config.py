"""Run configuration: typed dataclass sections read from a flat INI file.

Every section maps to a dataclass; keys are validated against its fields and
values are converted to the type of the field default.  Tuples are written as
comma-separated lists.  The only environment override is ``SECTFLOW_OUT``
for the output directory.
"""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .calibration import CalibrationSettings, digest
from .errors import ConfigurationError
from .flow import VectorFieldSpec, linear_saddle, lorenz63, suspension_shift

SCHEMA = 1
SCENARIOS = ("calibrate", "simulate", "splitting", "pliss", "pressure", "decompose",
             "distortion", "spec-search", "toyshift")
OUT_ENV = "SECTFLOW_OUT"


@dataclass
class RunSection:
    schema: int = SCHEMA
    scenario: str = "toyshift"
    seed: int = 0
    out: str = "results"
    calibration: str = ""  # default: <out>/calibration.json
    workers: int = 1


@dataclass
class SystemSection:
    family: str = "lorenz63"
    params: tuple = (10.0, 28.0, 8.0 / 3.0)
    drift: tuple = ()
    h: float = 0.005

    def build(self) -> VectorFieldSpec:
        if self.family == "lorenz63":
            if len(self.params) != 3:
                raise ConfigurationError("lorenz63 needs three parameters (sigma, rho, beta)")
            return lorenz63(*self.params)
        if self.family == "linear_saddle":
            return linear_saddle(self.params, self.drift or None)
        if self.family == "suspension_shift":
            return suspension_shift(speed=self.params[0] if self.params else 1.0)
        raise ConfigurationError(f"unknown system family {self.family!r}")


@dataclass
class SimulateSection:
    count: int = 200
    t: float = 20.0
    stride: int = 20


@dataclass
class SplittingSection:
    count: int = 100
    steps: int = 20
    window: int = 8


@dataclass
class PlissSection:
    segments: int = 200
    t: int = 40
    window: int = 6


@dataclass
class PressureSection:
    pool: int = 20000
    t_grid: tuple = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
    deltas: tuple = (0.5, 1.0)
    eps: tuple = (0.0,)
    potential: str = "zero"
    coef: float = 1.0
    probes: int = 0


@dataclass
class ToyshiftSection:
    words: int = 20000
    length: int = 24
    window: int = 8
    t_grid: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12)
    delta: float = 0.25
    eps: tuple = (0.0,)
    potential: tuple = ()  # cylinder coefficients; empty means phi = 0
    clamp: tuple = ()      # (lo, hi)


@dataclass
class DecomposeSection:
    segments: int = 1000
    t: int = 40
    N1: int = 0  # 0: take the calibrated value
    tube_radius: float = 2.0
    tube_length: float = 20.0


@dataclass
class DistortionSection:
    segments: int = 50
    candidates: int = 400
    t_values: tuple = (10, 20, 40, 80)
    eps: float = 1.0
    coef: float = 1.0
    n_leaf: int = 32
    n_random: int = 32


@dataclass
class SpecSearchSection:
    pairs: int = 10
    delta: float = 1.0
    t: float = 1.0
    tau_max: float = 5.0
    pool: int = 20000
    max_candidates: int = 100
    refine_count: int = 50


SECTIONS = {
    "run": RunSection, "system": SystemSection, "calibration": CalibrationSettings,
    "simulate": SimulateSection, "splitting": SplittingSection, "pliss": PlissSection,
    "pressure": PressureSection, "toyshift": ToyshiftSection, "decompose": DecomposeSection,
    "distortion": DistortionSection, "spec_search": SpecSearchSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    system: SystemSection = field(default_factory=SystemSection)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    splitting: SplittingSection = field(default_factory=SplittingSection)
    pliss: PlissSection = field(default_factory=PlissSection)
    pressure: PressureSection = field(default_factory=PressureSection)
    toyshift: ToyshiftSection = field(default_factory=ToyshiftSection)
    decompose: DecomposeSection = field(default_factory=DecomposeSection)
    distortion: DistortionSection = field(default_factory=DistortionSection)
    spec_search: SpecSearchSection = field(default_factory=SpecSearchSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def canonical(self) -> dict:
        """Everything that can change a result: output location, worker count and scenario tag excluded."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items()
                    if k not in ("out", "workers", "calibration", "scenario")}
        return d

    @property
    def hash(self) -> str:
        return digest(self.canonical())

    @property
    def out_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.run.out)

    @property
    def calibration_path(self) -> Path:
        return Path(self.run.calibration) if self.run.calibration else self.out_dir / "calibration.json"

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"bad value for {key!r}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive (N1)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"unreadable config: {e}") from None
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}]; known: {', '.join(SECTIONS)}")
        current = getattr(cfg, sec)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in [{sec}]; known: {', '.join(known)}")
            updates[key] = _convert(raw, known[key], f"{sec}.{key}")
        setattr(cfg, sec, replace(current, **updates))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.run.schema != SCHEMA:
        raise ConfigurationError(f"config schema {cfg.run.schema} is not supported (expected {SCHEMA})")
    if cfg.run.scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {cfg.run.scenario!r}; choose from {', '.join(SCENARIOS)}")
    if not 0 <= cfg.run.seed < 2 ** 64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    if cfg.run.workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if cfg.system.h <= 0:
        raise ConfigurationError("step size h must be positive")
    if not 0 < cfg.calibration.beta < 1 or not 0 < cfg.calibration.kappa < 1:
        raise ConfigurationError("beta and kappa must lie in (0, 1)")
    if cfg.calibration.lam0 <= 1:
        raise ConfigurationError("lam0 must exceed 1")
    if len(cfg.pressure.t_grid) < 4 or len(cfg.toyshift.t_grid) < 4:
        raise ConfigurationError("t_grid needs at least 4 points")
    cfg.system.build()
    return cfg


def load_config(path: Optional[str] = None) -> RunConfig:
    if path is None:
        return validate(RunConfig())
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {p} not found")
    return parse_config(p.read_text())
