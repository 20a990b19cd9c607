"""Run configuration: one flat ``key = value`` file covering every knob."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .conditioning import SteerConfig
from .objective import ScheduleConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    vit: ViTConfig = field(default_factory=ViTConfig)
    steer: SteerConfig = field(default_factory=SteerConfig)
    objective: str = "segment"
    detail_level: str = "mixed"
    # backbone pretraining
    pretrain_steps: int = 8000
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    pretrain_heldout: int = 256
    pretrain_target: float = 0.9
    # steering
    train_steps: int = 8000
    batch_size: int = 4
    warmup_steps: int = 100
    decay_end: int = 8000
    peak_lr: float = 1e-3
    floor_lr: float = 1e-4
    weight_decay: float = 0.05
    log_every: int = 50
    # evaluation
    core_scenes: int = 4
    core_bases: int = 25
    core_objects: int = 5
    mosaic_count: int = 48
    probe_train: int = 512
    probe_test: int = 256
    probe_epochs: int = 300
    eval_items: int = 256
    head_reduce: str = "mean"
    data_seed: int = 1000
    out_dir: str = "runs"

    def __post_init__(self):
        if self.objective not in ("segment", "point"):
            raise ConfigError(f"objective must be segment or point, got {self.objective!r}")
        if self.detail_level not in ("mixed", "category", "attributed", "full"):
            raise ConfigError(f"unknown detail_level {self.detail_level!r}")
        if self.head_reduce not in ("mean", "max"):
            raise ConfigError(f"head_reduce must be mean or max, got {self.head_reduce!r}")
        if self.warmup_steps >= self.decay_end:
            raise ConfigError("warmup_steps must be smaller than decay_end")

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.warmup_steps, self.decay_end, self.peak_lr, self.floor_lr)

    def replace(self, **changes) -> "RunConfig":
        """Copy with flat-key overrides (``vit.depth``, ``steer.projector``, ``seed`` ...)."""
        flat = self.to_flat()
        for k, v in changes.items():
            k = k.replace("__", ".")
            if k not in flat:
                raise ConfigError(f"unknown config key {k!r}")
            flat[k] = v
        return RunConfig.from_flat(flat)

    # -- serialization -----------------------------------------------------
    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for sub in fields(v):
                    out[f"{f.name}.{sub.name}"] = getattr(v, sub.name)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        defaults = cls().to_flat()
        unknown = sorted(set(flat) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = {**defaults, **{k: _coerce(k, v, defaults[k]) for k, v in flat.items()}}
        nested: dict = {"vit": {}, "steer": {}}
        top = {}
        for k, v in merged.items():
            if "." in k:
                group, name = k.split(".", 1)
                nested[group][name] = v
            else:
                top[k] = v
        try:
            return cls(vit=ViTConfig(**nested["vit"]), steer=SteerConfig(**nested["steer"]), **top)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_flat().items())

    def to_json(self) -> dict:
        return self.to_flat()

    def digest(self) -> str:
        """Short hash of the full configuration, used in artifact names."""
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()[:12]

    def backbone_digest(self) -> str:
        """Hash of only the fields that determine the pretrained backbone."""
        keys = [k for k in self.to_flat() if k.startswith("vit.") or k.startswith("pretrain_")] + ["seed"]
        flat = self.to_flat()
        return hashlib.sha256(json.dumps({k: flat[k] for k in sorted(keys)}).encode()).hexdigest()[:12]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, value, default):
    if not isinstance(value, str) or isinstance(default, str):
        return value
    text = value.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return text


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}".splitlines()[0]) from None
    return RunConfig.from_flat(dict(parser["run"]))


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
