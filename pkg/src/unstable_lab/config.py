"""Experiment configuration, content hashing and run manifests.

A configuration is one JSON document.  ``output_dir`` is excluded from every
hash, so moving results never invalidates cached numerics.  The top-level
``seed`` drives the model initial condition and the random observation design.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .kalman import DESIGN_KINDS
from .l96 import ModelConfig

DEFAULT_DESIGNS = tuple((kind, d) for kind in ("blv", "flv", "random", "fixed")
                        for d in range(4, 10)) + (("full", 10),)


@dataclass
class LyapunovSettings:
    spinup: int = 10_000
    neutral_tol: float = 0.005
    angle_tol: float = 1e-9
    lle_window: int = 1


@dataclass
class FilterSettings:
    designs: list = field(default_factory=lambda: [list(c) for c in DEFAULT_DESIGNS])
    spinup: int = 1_000
    K_avg: int = 10_000
    Q_scale: float = 1.0
    R_scale: float = 1.0
    P0_scale: float = 1.0


@dataclass
class PsiSettings:
    trunc_tol: float = 1e-30
    K: int = 10_000


@dataclass
class BoundsSettings:
    horizon: int = 50
    epsilon: float = 0.05
    samples: int = 50
    max_window: int = 2000
    anchors: int = 5
    growth_steps: int = 100


_DEFAULT_PARTS = {
    "model": lambda: ModelConfig(K=120_000),
    "lyapunov": LyapunovSettings,
    "filter": FilterSettings,
    "psi": PsiSettings,
    "bounds": BoundsSettings,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: _DEFAULT_PARTS["model"]())
    lyapunov: LyapunovSettings = field(default_factory=LyapunovSettings)
    filter: FilterSettings = field(default_factory=FilterSettings)
    psi: PsiSettings = field(default_factory=PsiSettings)
    bounds: BoundsSettings = field(default_factory=BoundsSettings)
    required: list = field(default_factory=lambda: ["n0_matches", "psi_min_ge_1",
                                                    "benchmark_monotone",
                                                    "criterion_full_satisfied"])
    output_dir: str = "results"
    seed: int = 0

    def __post_init__(self):
        if self.model.seed != self.seed:
            self.model = dataclasses.replace(self.model, seed=self.seed)
        self.filter.designs = [[str(k), int(d)] for k, d in self.filter.designs]
        self.validate()

    def validate(self):
        for kind, d in self.filter.designs:
            if kind not in DESIGN_KINDS:
                raise ConfigurationError(f"unknown design kind {kind!r}")
            if not 0 <= d <= self.model.n:
                raise ConfigurationError(f"design ({kind}, {d}) has d outside 0..{self.model.n}")
        counts = {
            "lyapunov.spinup": self.lyapunov.spinup, "lyapunov.lle_window": self.lyapunov.lle_window,
            "filter.K_avg": self.filter.K_avg, "psi.K": self.psi.K,
            "bounds.horizon": self.bounds.horizon, "bounds.samples": self.bounds.samples,
            "bounds.max_window": self.bounds.max_window, "bounds.anchors": self.bounds.anchors,
            "bounds.growth_steps": self.bounds.growth_steps,
        }
        for name, v in counts.items():
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v}")
        if self.filter.spinup < 0:
            raise ConfigurationError("filter.spinup must be non-negative")
        for name in ("Q_scale", "R_scale", "P0_scale"):
            if not getattr(self.filter, name) > 0:
                raise ConfigurationError(f"filter.{name} must be positive")

    # trusted window: both BLVs and FLVs have converged on [spinup, K - spinup]
    @property
    def window(self) -> tuple[int, int]:
        return self.lyapunov.spinup, self.model.K - self.lyapunov.spinup

    def require_window(self, steps: int, what: str):
        start, stop = self.window
        if stop - start < steps:
            raise ConfigurationError(
                f"{what} needs {steps} steps but the trusted window [{start}, {stop}] has "
                f"{max(0, stop - start)}; increase model.K"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        parts = {"model": ModelConfig, "lyapunov": LyapunovSettings, "filter": FilterSettings,
                 "psi": PsiSettings, "bounds": BoundsSettings}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in data.items():
            if name in parts:
                sub = parts[name]
                bad = set(value) - {f.name for f in dataclasses.fields(sub)}
                if bad:
                    raise ConfigurationError(f"unknown keys in {name}: {sorted(bad)}")
                base = dataclasses.asdict(_DEFAULT_PARTS[name]())
                kwargs[name] = sub(**dict(base, **value))
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def hash(self, stage: str | None = None) -> str:
        """Content hash of the fields that affect ``stage`` (all numerics if ``None``)."""
        d = self.to_dict()
        keys = _STAGE_KEYS.get(stage, [k for k in d if k not in ("output_dir", "required")])
        payload = {k: d[k] for k in keys}
        if stage is not None:
            payload["__stage__"] = stage
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_STAGE_KEYS = {
    "simulate": ["model", "seed"],
    "lyapunov": ["model", "seed", "lyapunov"],
    "psi": ["model", "seed", "lyapunov", "psi"],
    "benchmark": ["model", "seed", "lyapunov", "filter"],
    "bounds": ["model", "seed", "lyapunov", "filter", "bounds"],
}


def paper_scale(config: ExperimentConfig) -> ExperimentConfig:
    """Long-run settings: 1e5 spin-up, 1e4 filter spin-up, 1e5 averaging steps."""
    d = config.to_dict()
    d["lyapunov"]["spinup"] = 100_000
    d["filter"]["spinup"] = 10_000
    d["filter"]["K_avg"] = 100_000
    d["model"]["K"] = 310_000
    return ExperimentConfig.from_dict(d)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(config: ExperimentConfig, assignments) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    d = config.to_dict()
    for item in assignments or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = d
        *path, last = key.strip().split(".")
        for p in path:
            if not isinstance(node.get(p), dict):
                raise ConfigurationError(f"unknown configuration section {p!r} in {key!r}")
            node = node[p]
        if last not in node:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        node[last] = _parse_value(raw)
    return ExperimentConfig.from_dict(d)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    artifacts: dict
    format_version: int = 1
    created: str = ""
    software_version: str = ""

    @classmethod
    def create(cls, stage, config: ExperimentConfig, artifacts: dict) -> "RunManifest":
        return cls(stage, config.hash(stage), {k: str(v) for k, v in artifacts.items()},
                   created=time.strftime("%Y-%m-%dT%H:%M:%S%z"), software_version=_version())

    def write(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
