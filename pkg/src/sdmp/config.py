"""Run configuration: flat ``key = value`` files, flag overrides, validation, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import SyntheticSpec
from .mixing import DEFAULT_ALPHA, STRATEGIES, MixSpec
from .models import Topology

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # method
    framework: str = "contrastive"
    mixing: bool = True
    strategies: tuple = STRATEGIES
    alpha: float | None = None
    lambda_mode: str = "per_sample"
    weight_source: str = "random"
    weight_mix: str = "random"
    view_policy: str = "replace"
    n_local_views: int = 4
    local_mixed_fraction: float = 0.5
    patch_min: float = 0.1
    patch_max: float = 0.8
    # optimisation
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 0.0005
    weight_decay: float = 0.04
    warmup_epochs: int = 10
    tau: float = 0.2
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    momentum: float = 0.99
    center_momentum: float = 0.9
    seed: int = 0
    dtype: str = "float32"
    # network
    arch: str = "cnn"
    widths: tuple = (16, 32, 64, 128)
    proj_hidden: int = 128
    proj_dim: int = 64
    out_dim: int = 256
    # augmentation
    augment: bool = True
    crop_pad: int = 4
    flip: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    blur_prob: float = 0.0
    solarize_prob: float = 0.0
    normalize: bool = False
    # data
    dataset: str = "synthetic"
    data_path: str = ""
    n_classes: int = 10
    samples_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 32
    noise_sigma: float = 0.1
    data_seed: int = 0
    train_subset: int = 0
    # bookkeeping
    ckpt_every: int = 0
    knn_every: int = 0
    knn_k: int = 20
    probe_epochs: int = 50
    probe_lr: float = 0.1
    probe_at_end: bool = False

    def __post_init__(self):
        validate(self)

    # ------------------------------------------------------------------
    def mix_spec(self, strategy: str) -> MixSpec:
        alpha = DEFAULT_ALPHA[strategy] if self.alpha is None else self.alpha
        return MixSpec(strategy=strategy, alpha=alpha, lambda_mode=self.lambda_mode, seed=self.seed)

    def topology(self) -> Topology:
        return Topology(
            arch=self.arch,
            image_size=self.image_size,
            widths=tuple(self.widths),
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            out_dim=self.out_dim,
            with_predictor=self.framework == "contrastive",
            with_distill_head=self.framework == "distillation",
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            enabled=self.augment,
            crop_pad=self.crop_pad,
            flip=self.flip,
            brightness=self.brightness,
            contrast=self.contrast,
            blur_prob=self.blur_prob,
            solarize_prob=self.solarize_prob,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_classes=self.n_classes,
            samples_per_class=self.samples_per_class,
            test_per_class=self.test_per_class,
            image_size=self.image_size,
            noise_sigma=self.noise_sigma,
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


_CHOICES = {
    "framework": ("contrastive", "distillation"),
    "lambda_mode": ("per_sample", "per_batch"),
    "weight_source": ("random", "static"),
    "weight_mix": ("random", "static"),
    "view_policy": ("replace", "extra"),
    "dtype": ("float32", "float64"),
    "arch": ("cnn", "mlp"),
    "dataset": ("synthetic", "cifar10"),
}


def validate(cfg: RunConfig) -> None:
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"{key}: {getattr(cfg, key)!r} not in {allowed}")
    if cfg.batch_size < 2 or cfg.batch_size % 2:
        raise ConfigError(f"batch_size: must be even for intra-batch mixing, got {cfg.batch_size}")
    if cfg.epochs < 1:
        raise ConfigError(f"epochs: must be at least 1, got {cfg.epochs}")
    if cfg.alpha is not None and not cfg.alpha > 0:
        raise ConfigError(f"alpha: Beta parameter must be positive, got {cfg.alpha}")
    if cfg.mixing and not cfg.strategies:
        raise ConfigError("strategies: mixing is enabled but no strategy is selected")
    for s in cfg.strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"strategies: unknown strategy {s!r}")
    for key in ("base_lr", "tau", "tau_student", "tau_teacher"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key}: must be positive, got {getattr(cfg, key)}")
    if cfg.weight_decay < 0 or cfg.warmup_epochs < 0:
        raise ConfigError("weight_decay and warmup_epochs must be non-negative")
    if not 0 < cfg.momentum < 1 or not 0 < cfg.center_momentum < 1:
        raise ConfigError("momentum and center_momentum must lie in (0, 1)")
    if not 0 < cfg.patch_min <= cfg.patch_max < 1:
        raise ConfigError(f"patch range must satisfy 0 < patch_min <= patch_max < 1, got {cfg.patch_min}, {cfg.patch_max}")
    if cfg.n_local_views < 0 or not 0 <= cfg.local_mixed_fraction <= 1:
        raise ConfigError("n_local_views must be >= 0 and local_mixed_fraction in [0, 1]")
    if cfg.image_size % 2 or cfg.image_size < 4:
        raise ConfigError(f"image_size: must be even and at least 4, got {cfg.image_size}")
    if cfg.noise_sigma < 0:
        raise ConfigError(f"noise_sigma: must be non-negative, got {cfg.noise_sigma}")
    if cfg.dataset == "cifar10" and not cfg.data_path:
        raise ConfigError("data_path: required for dataset = cifar10")
    if cfg.arch == "mlp" and cfg.framework == "distillation" and cfg.n_local_views:
        raise ConfigError("n_local_views: the mlp encoder takes full-size inputs only; set n_local_views = 0")
    if cfg.n_classes < 2:
        raise ConfigError(f"n_classes: need at least 2, got {cfg.n_classes}")


# ----------------------------------------------------------------------
# parsing

_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    try:
        if key == "alpha":
            return None if raw.lower() in ("", "none", "auto") else float(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if key == "strategies":
            return tuple(s.strip().lower() for s in raw.split(",") if s.strip())
        if key == "widths":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config(path=None, overrides: dict | None = None, echo: bool = True) -> RunConfig:
    """Defaults, then file keys, then overrides (flag values as strings or typed)."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        values.update(parse_kv_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    cfg = RunConfig(**values)
    if echo:
        for k, v in cfg.to_dict().items():
            log.info("config %s = %s", k, format_value(v))
    return cfg


def format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "auto"
    return str(v).lower() if isinstance(v, bool) else str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.to_dict().items())


def config_from_dict(d: dict) -> RunConfig:
    vals = {}
    for k, v in d.items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown key {k!r}")
        vals[k] = tuple(v) if isinstance(v, list) else v
    return RunConfig(**vals)


def field_names() -> list[str]:
    return list(_FIELDS)
