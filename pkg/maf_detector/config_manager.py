#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Run configuration
=================
ConfigManager keeps a nested default dictionary, merges user values over it
and hands out dotted-key access; to_run_config() freezes the result into
typed RunConfig sections.

Config files are flat text:

    # comment
    alpha = 0.1
    align.blocks = 3, 4, 5
    align.lambda = 1.0
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

logger = logging.getLogger(__name__)

VARIANTS = ("source-only", "pf", "df", "maf-star", "full", "no-wgrl", "no-aggregate")
TRUE_WORDS = ("true", "yes", "1")
FALSE_WORDS = ("false", "no", "0")


class ConfigError(ValueError):
    """Unknown key, unparsable value or violated invariant"""


@dataclass(frozen=True)
class ScheduleConfig:
    phase1_iters: int = 3000
    lr1: float = 0.001
    phase2_iters: int = 1000
    lr2: float = 0.0001

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters

    def lr_at(self, iteration: int) -> float:
        """Learning rate of the 0-based iteration."""
        return self.lr1 if iteration < self.phase1_iters else self.lr2


@dataclass(frozen=True)
class AlignConfig:
    blocks: Tuple[int, ...] = (3, 4, 5)
    proposal: bool = True
    grl_lambda: float = field(default=1.0, metadata={"key": "lambda"})
    srm_s: int = 2
    srm_channels: int = 32
    reduction: str = "mean"
    wgrl: bool = True
    aggregate: bool = True

    @property
    def enabled(self) -> bool:
        return bool(self.blocks) or self.proposal


@dataclass(frozen=True)
class DetectorConfig:
    anchor_sizes: Tuple[int, ...] = (16, 32, 48)
    top_n: int = 32
    nms_iou: float = 0.7
    fg_iou: float = 0.5
    bg_iou: float = 0.3
    roi_grid: int = 3
    append_gt: bool = True
    test_nms_iou: float = 0.3
    max_detections: int = 100
    score_thr: float = 0.05


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 96


@dataclass(frozen=True)
class SeedConfig:
    init: int = 0
    data: int = 0


@dataclass(frozen=True)
class TrainConfig:
    checkpoint_every: int = 1000
    log_every: int = 100


@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    file: str = ""
    max_size: int = 10485760
    backup_count: int = 3


@dataclass(frozen=True)
class DebugConfig:
    check_finite: bool = False


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.1
    momentum: float = 0.9
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: SeedConfig = field(default_factory=SeedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    debug: DebugConfig = field(default_factory=DebugConfig)

    def to_nested(self) -> Dict[str, Any]:
        return _to_nested(self)

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        _flatten(self.to_nested(), "", flat)
        return flat

    def config_hash(self) -> str:
        canonical = json.dumps(_jsonable(self.to_flat()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _key(f) -> str:
    return f.metadata.get("key", f.name)


def _to_nested(obj) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        out[_key(f)] = _to_nested(value) if hasattr(value, "__dataclass_fields__") else value
    return out


def _from_nested(cls, data: Dict[str, Any]):
    kwargs = {}
    for f in fields(cls):
        value = data[_key(f)]
        if f.default_factory is not MISSING:
            value = _from_nested(type(f.default_factory()), value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _flatten(tree: Dict[str, Any], prefix: str, out: Dict[str, Any]) -> None:
    for key, value in tree.items():
        if isinstance(value, dict):
            _flatten(value, f"{prefix}{key}.", out)
        else:
            out[prefix + key] = value


def _jsonable(flat: Dict[str, Any]) -> Dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce_value(key: str, raw: Any, default: Any) -> Any:
    """Convert raw (text or JSON value) to the type of the key's default."""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            word = str(raw).strip().lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            text = str(raw).strip()
            if not text:
                return ()
            return tuple(int(part) for part in text.split(","))
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {raw!r} for {key} (expected {type(default).__name__})") from None


class ConfigManager:
    """Configuration of one run"""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.config = self._load_default_config()
        self.config_file = Path(config_file) if config_file else None
        if self.config_file is not None:
            self.load_file(self.config_file)

    def _load_default_config(self) -> Dict[str, Any]:
        return RunConfig().to_nested()

    def _merge_config(self, default: Dict[str, Any], loaded: Dict[str, Any], prefix: str = ""):
        """Merge loaded values over defaults; unknown keys are rejected."""
        for key, value in loaded.items():
            dotted = prefix + key
            if key not in default:
                raise ConfigError(f"unknown config key {dotted}")
            if isinstance(default[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"{dotted} is a section, got {value!r}")
                self._merge_config(default[key], value, dotted + ".")
            else:
                default[key] = coerce_value(dotted, value, default[key])

    def load_file(self, path: Union[str, Path]) -> None:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from None
            self._merge_config(self.config, loaded)
            logger.info(f"Loaded configuration from {path}")
            return
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not self.has(key):
                raise ConfigError(f"{path}:{lineno}: unknown config key {key}")
            try:
                self.set(key, value)
            except ConfigError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
        logger.info(f"Loaded configuration from {path}")

    def has(self, key: str) -> bool:
        current = self.config
        for k in key.split("."):
            if not isinstance(current, dict) or k not in current:
                return False
            current = current[k]
        return not isinstance(current, dict)

    def get(self, key: str, default: Any = None) -> Any:
        keys = key.split(".")
        current = self.config
        for k in keys:
            if isinstance(current, dict) and k in current:
                current = current[k]
            else:
                return default
        return current

    def set(self, key: str, value: Any):
        if not self.has(key):
            raise ConfigError(f"unknown config key {key}")
        keys = key.split(".")
        current = self.config
        for k in keys[:-1]:
            current = current[k]
        current[keys[-1]] = coerce_value(key, value, current[keys[-1]])

    def update(self, flat: Dict[str, Any]) -> None:
        for key, value in flat.items():
            self.set(key, value)

    def copy(self) -> "ConfigManager":
        other = ConfigManager()
        other.config = copy.deepcopy(self.config)
        other.config_file = self.config_file
        return other

    def to_run_config(self) -> RunConfig:
        cfg = _from_nested(RunConfig, self.config)
        validate(cfg)
        return cfg

    def save(self, path: Union[str, Path]) -> None:
        flat: Dict[str, Any] = {}
        _flatten(self.config, "", flat)
        lines = [f"{key} = {_format_value(value)}" for key, value in flat.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "ConfigManager":
        manager = cls()
        manager.update(flat)
        return manager


def validate(cfg: RunConfig) -> None:
    if cfg.alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {cfg.alpha}")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError(f"momentum must lie in [0, 1), got {cfg.momentum}")
    s = cfg.schedule
    if s.lr1 <= 0 or s.lr2 <= 0:
        raise ConfigError(f"learning rates must be > 0, got {s.lr1} and {s.lr2}")
    if s.phase1_iters < 0 or s.phase2_iters < 0:
        raise ConfigError("schedule iteration counts must be >= 0")
    a = cfg.align
    if a.grl_lambda < 0:
        raise ConfigError(f"align.lambda must be >= 0, got {a.grl_lambda}")
    if not set(a.blocks) <= {3, 4, 5} or len(set(a.blocks)) != len(a.blocks):
        raise ConfigError(f"align.blocks must be distinct values from 3, 4, 5, got {a.blocks}")
    if a.reduction not in ("mean", "sum"):
        raise ConfigError(f"align.reduction must be mean or sum, got {a.reduction!r}")
    if a.srm_s < 1 or a.srm_channels < 1:
        raise ConfigError(f"align.srm_s and align.srm_channels must be >= 1, got {a.srm_s}, {a.srm_channels}")
    d = cfg.detector
    if not d.anchor_sizes or any(size <= 0 for size in d.anchor_sizes):
        raise ConfigError(f"detector.anchor_sizes must be positive, got {d.anchor_sizes}")
    if not 0 <= d.bg_iou <= d.fg_iou <= 1:
        raise ConfigError(f"need 0 <= detector.bg_iou <= detector.fg_iou <= 1, got {d.bg_iou}, {d.fg_iou}")
    if d.top_n < 1 or d.roi_grid < 1 or d.max_detections < 1:
        raise ConfigError("detector.top_n, detector.roi_grid and detector.max_detections must be >= 1")
    if cfg.data.image_size < 16 or cfg.data.image_size % 16:
        raise ConfigError(f"data.image_size must be a positive multiple of 16, got {cfg.data.image_size}")
    if a.blocks and cfg.data.image_size % (16 * a.srm_s):
        raise ConfigError(f"data.image_size {cfg.data.image_size} leaves block 5 indivisible by "
                          f"align.srm_s={a.srm_s}")
    if cfg.train.checkpoint_every < 1 or cfg.train.log_every < 1:
        raise ConfigError("train.checkpoint_every and train.log_every must be >= 1")
    if cfg.logging.level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"logging.level {cfg.logging.level!r} is not a logging level")


def apply_variant(config: ConfigManager, name: str) -> ConfigManager:
    """Return a copy of config with an ablation preset applied."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    out = config.copy()
    if name == "source-only":
        out.set("alpha", 0.0)
    elif name == "pf":
        out.set("align.blocks", "")
    elif name == "df":
        out.set("align.proposal", False)
    elif name in ("maf-star", "no-wgrl", "no-aggregate"):
        out.set("align.blocks", "5")
        if name == "no-wgrl":
            out.set("align.wgrl", False)
        elif name == "no-aggregate":
            out.set("align.aggregate", False)
    return out
