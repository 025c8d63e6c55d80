"""Run configuration: every tunable in one YAML-loadable tree with flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from .kalman import KalmanConfig
from .light import LightConfig
from .plate import SegmentConfig
from .tracker import TrackerConfig
from .violations import RuleConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlateConfig:
    out_width: int = 240
    out_height: int = 60
    min_score: float = 0.7
    # plate reads attempted per offending track, spread over the event range
    samples: int = 5
    atlas_dir: Optional[str] = None


@dataclass(frozen=True)
class ReportConfig:
    outbox: Optional[str] = None  # defaults to <run dir>/outbox
    endpoint: Optional[str] = None
    timeout_s: float = 5.0
    max_retries: int = 5
    backoff_base_s: float = 2.0
    backoff_factor: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    rules: tuple[str, ...] = ("all",)
    fps: float = 10.0
    frame_width: int = 960
    frame_height: int = 540
    seed: int = 0
    workers: int = 1
    output_root: str = "runs"
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    light: LightConfig = field(default_factory=LightConfig)
    violations: RuleConfig = field(default_factory=RuleConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    plate: PlateConfig = field(default_factory=PlateConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    @property
    def tracker_config(self) -> TrackerConfig:
        return dataclasses.replace(self.tracker, kalman=self.kalman)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {k: x for k, x in dataclasses.asdict(v).items() if k != "kalman"}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


_SECTIONS = {"tracker", "kalman", "light", "violations", "segment", "plate", "report"}


def _coerce(name: str, current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _apply(obj, values: Mapping[str, Any], prefix: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{prefix}{key} must be a mapping")
            changes[key] = _apply(current, value, f"{prefix}{key}.")
        else:
            changes[key] = _coerce(prefix + key, current, value)
    return dataclasses.replace(obj, **changes)


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the YAML file, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _apply(cfg, data, "")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        value = yaml.safe_load(raw) if raw else ""
        node: dict = {}
        cursor = node
        parts = key.strip().split(".")
        for p in parts[:-1]:
            cursor = cursor.setdefault(p, {})
        cursor[parts[-1]] = value
        cfg = _apply(cfg, node, "")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.fps <= 0:
        raise ConfigError("fps must be positive")
    if cfg.frame_width <= 0 or cfg.frame_height <= 0:
        raise ConfigError("frame dims must be positive")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if not 0 <= cfg.tracker.appearance_weight <= 1:
        raise ConfigError("tracker.appearance_weight must lie in [0, 1]")
    if cfg.light.min_valid > cfg.light.window:
        raise ConfigError("light.min_valid cannot exceed light.window")


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
