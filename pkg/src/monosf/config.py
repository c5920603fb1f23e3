"""Versioned JSON run configuration shared by the CLI subcommands."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .evaluation import ABS_THRESH, DEFAULT_LENGTHS, MAX_DEPTH, MIN_DEPTH, REL_THRESH
from .losses import LossWeights
from .refine import OptimizerConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    abs_thresh: float = ABS_THRESH
    rel_thresh: float = REL_THRESH
    min_depth: float = MIN_DEPTH
    max_depth: float = MAX_DEPTH
    median_scaling: bool = False
    lengths: tuple = DEFAULT_LENGTHS
    align: bool = True
    with_scale: bool = True

    def __post_init__(self):
        if not (self.abs_thresh >= 0 and self.rel_thresh >= 0):
            raise ValueError("outlier thresholds must be non-negative")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if not self.lengths or any(L <= 0 for L in self.lengths):
            raise ValueError("subsequence lengths must be positive")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class RunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def to_dict(self):
        return {
            "version": self.version,
            "weights": self.weights.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "paths": dict(self.paths),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown("config", data, {"version", "weights", "optimizer", "evaluation", "paths"})
        version = data.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        paths = data.get("paths", {})
        if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
            raise ConfigError("paths must map names to strings")
        try:
            return cls(
                weights=_build(LossWeights, data.get("weights", {}), "weights"),
                optimizer=_build(OptimizerConfig, data.get("optimizer", {}), "optimizer"),
                evaluation=_build(EvalConfig, data.get("evaluation", {}), "evaluation"),
                paths=dict(paths),
                version=version,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at char {exc.pos}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls()
        with open(path) as fh:
            return cls.from_json(fh.read())


def _reject_unknown(section, data, allowed):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a JSON object")
    names = {f.name: f for f in fields(cls)}
    _reject_unknown(section, data, names)
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)
