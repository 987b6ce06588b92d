"""Pipeline configuration: one JSON file, dot-path CLI overrides.

Every random choice in the pipeline derives from the single root seed
here, so runs are reproducible end to end.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bubbles import BubbleSimConfig, all_conditions
from .matching import MatcherConfig, MatcherTrainConfig
from .restoration import RestoreConfig, RestoreTrainConfig
from .segmentation import AugmentConfig, SegTrainConfig, UNetConfig
from .stereo import StereoParams


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    calibration: str = ""
    matcher: str = ""
    segmenter: str = ""
    restorer: str = ""
    detector: str = ""
    dataset: str = ""
    output: str = "out"


@dataclass
class FluctuationConfig:
    amplitude: float = 0.0
    wavelength: float = 40.0


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    stereo: StereoParams = field(default_factory=StereoParams)
    bubbles: BubbleSimConfig = field(default_factory=BubbleSimConfig)
    fluctuation: FluctuationConfig = field(default_factory=FluctuationConfig)
    conditions: list = field(default_factory=all_conditions)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    matcher_train: MatcherTrainConfig = field(default_factory=MatcherTrainConfig)
    segmenter: UNetConfig = field(default_factory=UNetConfig)
    segmenter_train: SegTrainConfig = field(default_factory=SegTrainConfig)
    segmenter_augment: AugmentConfig = field(default_factory=AugmentConfig)
    restore: RestoreConfig = field(default_factory=RestoreConfig)
    restore_train: RestoreTrainConfig = field(default_factory=RestoreTrainConfig)

    def validate(self) -> "PipelineConfig":
        try:
            self.stereo.validate()
        except ValueError as e:
            raise ConfigError(f"stereo: {e}") from e
        from .bubbles import parse_condition
        for cond in self.conditions:
            try:
                parse_condition(cond)
            except ValueError as e:
                raise ConfigError(f"conditions: {e}") from e
        missing = []
        for f in dataclasses.fields(self.paths):
            if f.name == "output":
                continue
            value = getattr(self.paths, f.name)
            if value and not Path(value).exists():
                missing.append(f"paths.{f.name} = {value!r}")
        if missing:
            raise ConfigError("referenced files do not exist: " + ", ".join(missing))
        return self


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, data):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config field {cls.__name__}.{key}")
        f = fields[key]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, type)
                                                and dataclasses.is_dataclass(f.type)):
            kwargs[key] = _from_plain(f.type, value)
        else:
            default = getattr(cls(), key) if cls is not PipelineConfig else None
            kwargs[key] = tuple(value) if isinstance(default, tuple) else value
    return cls(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    for key, value in data.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            merged = _to_plain(current)
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            merged.update(value)
            setattr(cfg, key, _from_plain(type(current), merged))
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return config_from_dict(data)


def save_config(path, cfg: PipelineConfig) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config_to_dict(cfg), indent=1))
    return path


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply ``section.field=value`` strings; values parse as JSON when
    possible and fall back to plain strings."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = cfg
        *parents, leaf = dotted.split(".")
        for name in parents:
            if not hasattr(target, name):
                raise ConfigError(f"unknown config section {name!r} in {dotted!r}")
            target = getattr(target, name)
        if not hasattr(target, leaf):
            raise ConfigError(f"unknown config field {dotted!r}")
        current = getattr(target, leaf)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(target, leaf, value)
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
