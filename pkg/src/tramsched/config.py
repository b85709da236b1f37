"""Pipeline configuration: one JSON document with a section per stage.

Unknown sections or keys are rejected before any stage runs. Command-line
overrides use ``section.key=value`` and take precedence over the file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cluster import ClusterParams
from .preprocess import PreprocessConfig
from .stations import StationConfig
from .timing import DEFAULT_N_MIN, ExtractConfig


class ConfigError(ValueError):
    pass


@dataclass
class FitConfig:
    alpha: float = 0.05
    n_min: int = DEFAULT_N_MIN
    ks_method: str = "lilliefors"
    lam: float = 1.0
    z: float = 1.96

    def __post_init__(self):
        if self.alpha not in (0.10, 0.05, 0.01):
            raise ValueError("alpha must be one of 0.10, 0.05, 0.01")
        if self.ks_method not in ("lilliefors", "kolmogorov"):
            raise ValueError("ks_method must be 'lilliefors' or 'kolmogorov'")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must be in (0, 1]")
        if self.n_min < 2:
            raise ValueError("n_min must be >= 2")


@dataclass
class PathsConfig:
    traces: str | None = None
    network: str | None = None
    stations_db: str | None = None
    distributions: str | None = None
    truth: str | None = None
    out: str = "out"


_SECTIONS = {
    "preprocess": PreprocessConfig,
    "cluster": ClusterParams,
    "stations": StationConfig,
    "extract": ExtractConfig,
    "fit": FitConfig,
    "paths": PathsConfig,
}


@dataclass
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    stations: StationConfig = field(default_factory=StationConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    verbosity: int = 0

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS} | {"verbosity": self.verbosity}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(_SECTIONS) - {"verbosity"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}; allowed: {sorted(allowed)}")
            try:
                kw[name] = typ(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        v = d.get("verbosity", 0)
        if not isinstance(v, int) or v < 0:
            raise ConfigError("verbosity must be a non-negative integer")
        return cls(**kw, verbosity=v)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, pairs: list[str]) -> "PipelineConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        d = self.to_dict()
        for item in pairs:
            key, sep, raw = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section in override: {section!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            d[section][name] = value
        return PipelineConfig.from_dict(d)
