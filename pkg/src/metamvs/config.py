"""Run configuration: nested sections, presets and strict JSON loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class DataSection:
    scenes_per_domain: int = 4
    val_scenes_per_domain: int = 1
    target_scenes: int = 2
    num_views: int = 5
    width: int = 80
    height: int = 64
    focal: float = 80.0
    spacing_deg: float = 10.0
    supersample: int = 2
    num_neighbors_train: int = 2
    num_neighbors_test: int = 4
    image_format: str = "pfm"
    # "stored" keeps the scene split written by gen-data, "per_scene" re-draws
    # it, "per_view" holds out one reference view of every scene
    split: str = "stored"


@dataclass
class NetSection:
    feat_channels: int = 8
    feat_hidden: int = 8
    reg_base: int = 8
    reg_levels: int = 2
    mask_hidden: int = 8
    num_depths: int = 16
    inverse_depth: bool = False
    use_mask: bool = True


@dataclass
class LossSection:
    gamma_photo: float = 5.0
    gamma_ssim: float = 1.0
    gamma_smooth: float = 0.01
    mask_reg: float = 0.01
    average_views: bool = True


@dataclass
class MetaSection:
    k: int = 3
    alpha: float = 1e-4
    beta: float = 1e-4
    policy: str = "scenes"
    outer_batch: int = 1
    max_iters: int = 1000
    patience: int = 50
    smoothing: float = 0.9
    eval_every: int = 10
    checkpoint_every: int = 0
    outer_optimizer: str = "sgd"
    train_tau: bool = True


@dataclass
class FineTuneSection:
    lr: float = 1e-7
    steps: int = 200
    batch_size: int = 4
    freeze_tau: bool = True
    optimizer: str = "sgd"


@dataclass
class FusionSection:
    reproj_px: float = 1.0
    rel_depth: float = 0.01
    prob_threshold: float = 0.8
    min_views: int = 3
    num_neighbors: int | None = None
    conf_threshold: float | None = None


@dataclass
class EvalSection:
    # distances are fractions of the scene's depth range
    thresholds: list[float] = field(default_factory=lambda: [0.02, 0.05])
    max_dist: float = 0.2
    gt_density: int = 2


@dataclass
class RunConfig:
    preset: str = "paper"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    loss: LossSection = field(default_factory=LossSection)
    meta: MetaSection = field(default_factory=MetaSection)
    finetune: FineTuneSection = field(default_factory=FineTuneSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# Full-scale values; the network and resolution entries describe the
# large model and are not meant to run on a laptop CPU.
PAPER = {
    "data": {"width": 640, "height": 512, "focal": 640.0, "num_neighbors_train": 2, "num_neighbors_test": 4},
    "net": {"feat_channels": 32, "feat_hidden": 8, "reg_base": 8, "reg_levels": 3, "num_depths": 256},
    "meta": {"k": 3, "alpha": 1e-4, "beta": 1e-4},
    "finetune": {"lr": 1e-7, "batch_size": 4},
    "loss": {"gamma_photo": 5.0, "gamma_ssim": 1.0, "gamma_smooth": 0.01},
    "fusion": {"reproj_px": 1.0, "rel_depth": 0.01, "prob_threshold": 0.8, "min_views": 3},
}

# Overlay for small synthetic runs on one CPU core. The learning rates are
# much larger than at full scale because every loss is a mean over a tiny
# 16x20 map and plain gradient steps otherwise barely move the weights.
# Fine-tuning reuses the inner-loop step size the meta init was trained for.
# The mask regularizer balances the photometric pull at C = mask_reg /
# (gamma_photo * error); 0.1 keeps masks near 1 at sensor-noise error levels
# (~0.01-0.02) while occluded pixels (error ~0.2) still drop to ~0.1.
# With only a handful of scenes per domain the outer loop is supervised on a
# held-out view of every scene rather than on a few held-out scenes.
DESK = {
    "data": {"width": 80, "height": 64, "focal": 80.0, "split": "per_view"},
    "net": {"feat_channels": 8, "reg_levels": 2, "num_depths": 16},
    "meta": {"alpha": 0.5, "beta": 1.0, "max_iters": 200},
    "finetune": {"lr": 0.5, "steps": 100, "batch_size": 1},
    "loss": {"mask_reg": 0.1},
    "fusion": {"min_views": 2},
}


def _section_types() -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else globals()[f.type] for f in fields(RunConfig)
            if f.name not in ("preset", "seed")}


def _coerce(name: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return [float(v) for v in value]
    return value


def _apply(cfg: RunConfig, overlay: dict, origin: str) -> None:
    types = _section_types()
    for key, value in overlay.items():
        if key in ("preset", "seed"):
            if key == "seed":
                value = _coerce("seed", value, 0)
            elif value not in PRESETS:
                raise ConfigError(f"preset must be one of {PRESETS}, got {value!r}")
            setattr(cfg, key, value)
            continue
        if key not in types:
            raise ConfigError(f"{origin}: unknown config key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{origin}: section {key!r} must be an object")
        section = getattr(cfg, key)
        known = {f.name: f for f in fields(section)}
        for sub, v in value.items():
            if sub not in known:
                raise ConfigError(f"{origin}: unknown config key {key}.{sub!r}")
            default = getattr(type(section)(), sub)
            if v is None or default is None:
                setattr(section, sub, v)
            else:
                setattr(section, sub, _coerce(f"{key}.{sub}", v, default))


def build_config(preset: str = "desk", overrides: dict | None = None) -> RunConfig:
    """Paper-scale defaults, then the preset overlay, then ``overrides``."""
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    cfg = RunConfig()
    _apply(cfg, PAPER, "paper preset")
    if preset == "desk":
        _apply(cfg, DESK, "desk preset")
    cfg.preset = preset
    if overrides:
        if "preset" in overrides and overrides["preset"] != preset:
            return build_config(overrides["preset"], {k: v for k, v in overrides.items() if k != "preset"})
        _apply(cfg, overrides, "config")
    validate(cfg)
    return cfg


def load_config(path=None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Read a JSON config file; ``preset`` and ``seed`` arguments take precedence."""
    overrides: dict = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be an object")
    chosen = preset or overrides.get("preset", "desk")
    overrides = {k: v for k, v in overrides.items() if k != "preset"}
    if seed is not None:
        overrides["seed"] = seed
    return build_config(chosen, overrides)


def config_from_dict(obj: dict) -> RunConfig:
    """Rebuild a config from :meth:`RunConfig.to_dict` output."""
    cfg = RunConfig()
    _apply(cfg, obj, "config")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    d, m, f = cfg.data, cfg.meta, cfg.fusion
    if d.width % 4 or d.height % 4:
        raise ConfigError("data.width and data.height must be divisible by 4")
    if not 1 <= d.num_neighbors_train <= d.num_views - 1 or not 1 <= d.num_neighbors_test <= d.num_views - 1:
        raise ConfigError("neighbour counts must be between 1 and num_views - 1")
    if cfg.net.num_depths % (2 ** cfg.net.reg_levels):
        raise ConfigError("net.num_depths must be divisible by 2**net.reg_levels")
    if m.k < 0 or m.alpha < 0 or not m.beta > 0:
        raise ConfigError("meta.k and meta.alpha must be >= 0, meta.beta > 0")
    if m.policy not in ("scenes", "domains", "uniform"):
        raise ConfigError(f"meta.policy {m.policy!r} is not one of scenes/domains/uniform")
    for name, opt in (("meta.outer_optimizer", m.outer_optimizer), ("finetune.optimizer", cfg.finetune.optimizer)):
        if opt not in ("sgd", "adam"):
            raise ConfigError(f"{name} must be 'sgd' or 'adam', got {opt!r}")
    if min(cfg.loss.gamma_photo, cfg.loss.gamma_ssim, cfg.loss.gamma_smooth, cfg.loss.mask_reg) < 0:
        raise ConfigError("loss weights must be non-negative")
    if not 0 <= f.prob_threshold <= 1 or f.min_views < 1 or f.reproj_px <= 0 or f.rel_depth <= 0:
        raise ConfigError("invalid fusion thresholds")
    if not cfg.eval.thresholds or min(cfg.eval.thresholds) <= 0 or cfg.eval.max_dist <= 0:
        raise ConfigError("eval thresholds and max_dist must be positive")
    if cfg.data.split not in ("stored", "per_scene", "per_view"):
        raise ConfigError("data.split must be 'stored', 'per_scene' or 'per_view'")
    if cfg.data.image_format not in ("pfm", "ppm"):
        raise ConfigError("data.image_format must be 'pfm' or 'ppm'")


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with whole sections or top-level fields swapped."""
    return dataclasses.replace(cfg, **sections)
