"""Run configuration: a flat ``section.key = value`` file (TOML dotted keys).

Precedence, lowest first: built-in defaults, the ``--config`` file, then
explicit command-line flags.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthConfig
from .model import NetworkSpec
from .trainer import TrainingSchedule


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    reference_dir: str = ""
    query_dir: str = ""
    mask_dir: str = ""
    region_dir: str = ""
    manifest: str = ""
    fold: int = 0
    folds: int = 2
    train_fraction: float = 0.9
    slice_axis: int = 2


@dataclass
class SegmentConfig:
    polarity: str = "bright"
    threshold: str = "auto"
    post_process: bool = False
    region_dir: str = ""
    min_prominence_fraction: float = 0.05
    smoothing_window: int = 5

    def threshold_level(self):
        if str(self.threshold) == "auto":
            return "auto"
        try:
            level = int(self.threshold)
        except ValueError:
            raise ConfigError(f"segment.threshold must be 'auto' or 0..255, got {self.threshold!r}")
        if not 0 <= level <= 255:
            raise ConfigError(f"segment.threshold must be in 0..255, got {level}")
        return level


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainingSchedule = field(default_factory=TrainingSchedule)
    segment: SegmentConfig = field(default_factory=SegmentConfig)

    def section(self, name: str):
        return getattr(self, name)


SECTIONS = ("data", "synth", "network", "train", "segment")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(current, value, key: str):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, (tuple, list)):
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
        elem = type(current[0]) if current else float
        return tuple(elem(v) for v in value)
    if current is None:
        return int(value) if key == "seed" else value
    try:
        return type(current)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(current).__name__}")


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Set dotted keys (``train.stage1_cycles``) on ``cfg``; unknown keys are errors."""
    staged = {s: asdict(cfg.section(s)) for s in SECTIONS}
    for key, value in values.items():
        if value is None:
            continue
        if key in ("seed", "out"):
            setattr(cfg, key, _coerce(getattr(cfg, key), value, key))
            continue
        section, _, name = key.partition(".")
        if section not in staged or name not in staged[section]:
            raise ConfigError(f"unknown config key: {key}")
        staged[section][name] = _coerce(staged[section][name], value, key)
    try:
        cfg.data = DataConfig(**staged["data"])
        cfg.synth = SynthConfig(**staged["synth"])
        cfg.network = NetworkSpec(**staged["network"])
        cfg.train = TrainingSchedule(**staged["train"])
        cfg.segment = SegmentConfig(**staged["segment"])
        cfg.synth.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: Path | None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                values = _flatten(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        apply_overrides(cfg, values)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def _literal(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_literal(x) for x in v) + "]"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved config in the same flat dotted-key format."""
    lines = []
    if cfg.seed is not None:
        lines.append(f"seed = {cfg.seed}")
    lines.append(f"out = {_literal(cfg.out)}")
    for s in SECTIONS:
        obj = cfg.section(s)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                continue
            lines.append(f"{s}.{f.name} = {_literal(v)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
