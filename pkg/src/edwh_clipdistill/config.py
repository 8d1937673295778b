# coding=utf-8
# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Configuration: the training config (model, schedule and loss knobs) and the runtime settings.

Two kinds of config live here:
 * `TrainConfig`: everything that changes what is computed. Loaded from a toml file (`--config`), a preset
   (`--preset`) and `--set key=value` overrides. Its hash is stored in every checkpoint.
 * `Settings`: how things are run (deterministic mode, threads, log interval). Loaded from
   pyproject.toml [tool.clipdistill], then .env and the environment.
"""

import hashlib
import json
import math
import typing
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import configuraptor
import dotenv
from configuraptor import alias, asdict
from dotenv import find_dotenv
from tabulate import tabulate

from .constants import COLORS, SHAPES
from .exceptions import DivisibilityError, PresetError, RangeError, UnknownConfigKey, VocabularyError

MASK_STRATEGIES = ("attention", "random", "none")
KL_DIRECTIONS = ("student_teacher", "teacher_student")

# longest template: <bos> a c s and a c s <eos>
LONGEST_CAPTION_TOKENS = 9
VOCABULARY_SIZE = 3 + 2 + len(SHAPES) + len(COLORS)


class TrainConfig(configuraptor.TypedConfig):
    """
    Every architecture, schedule and loss-weight knob; the single source of determinism.

    Defaults are the desk-scale ('mini') configuration.
    """

    # vision encoder g
    image_size: int = 64
    patch_size: int = 8
    source_size: int = 64
    vision_layers: int = 4
    vision_width: int = 128
    vision_heads: int = 4
    mlp_ratio: float = 4.0

    # text encoder e
    text_layers: int = 2
    text_width: int = 64
    text_heads: int = 2
    vocab_size: int = 32
    context_length: int = 16
    clip_embed_dim: int = 64
    logit_scale_init: float = 1 / 0.07
    logit_scale_max: float = 100.0

    # projection head h
    head_out_dim: int = 256
    head_hidden_dim: int = 256
    head_bottleneck_dim: int = 64

    # decoder d
    decoder_layers: int = 2
    decoder_width: int = 64
    decoder_heads: int = 2

    # masking
    mask_ratio: float = 0.5
    mask_strategy: str = "attention"

    # loss weights
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0

    # teacher
    lambda_start: float = 0.996
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    kl_direction: str = "student_teacher"

    # optimisation
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 10
    weight_decay: float = 0.05
    grad_clip: float = 0.0
    batch_size: int = 32
    total_steps: int = 300
    checkpoint_every: int = 0
    seed: int = 0

    @property
    def grid_size(self) -> int:
        """
        Patches per side.
        """
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        """
        P, the number of patch tokens (the [CLS] token not included).
        """
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        """
        Length of one flattened RGB patch.
        """
        return self.patch_size**2 * 3

    @property
    def vision_head_dim(self) -> int:
        """Per-head width of the vision encoder."""
        return self.vision_width // self.vision_heads

    @property
    def text_head_dim(self) -> int:
        """Per-head width of the text encoder."""
        return self.text_width // self.text_heads

    @property
    def decoder_head_dim(self) -> int:
        """Per-head width of the decoder."""
        return self.decoder_width // self.decoder_heads

    @property
    def masked_count(self) -> int:
        """
        Number of patches hidden from the student per sample.
        """
        return masked_count(self.mask_ratio, self.num_patches)

    def __repr__(self) -> str:
        """
        Represent the class by dumping its data.
        """
        data = asdict(self, with_top_level_key=False)
        return f"<TrainConfig{data}>"


def masked_count(ratio: float, num_patches: int) -> int:
    """
    Ceil(ratio * P), computed on a rounded product so 0.3 * 10 gives 3 and not 4.
    """
    if not 0 < ratio < 1:
        raise RangeError(f"mask ratio must be in (0, 1), got {ratio}")
    return math.ceil(round(ratio * num_patches, 9))


def field_types() -> dict[str, type]:
    """
    Annotated fields of TrainConfig, in declaration order.
    """
    return {name: tp for name, tp in TrainConfig.__annotations__.items() if not name.startswith("_")}


def config_dict(cfg: TrainConfig) -> dict[str, typing.Any]:
    """
    Plain dict of every field, in declaration order.
    """
    return {name: getattr(cfg, name) for name in field_types()}


def config_hash(cfg: TrainConfig) -> str:
    """
    Sha256 of the canonical json form of the config.
    """
    canonical = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def coerce_value(key: str, value: typing.Any) -> typing.Any:
    """
    Convert a raw value (e.g. the string half of `--set key=value`, or an int from toml) to the field's type.
    """
    types = field_types()
    key = _normalize_key(key)
    if key not in types:
        raise UnknownConfigKey(key)

    expected = types[key]
    if expected is bool:
        if isinstance(value, str):
            return value.strip().lower() in {"1", "true", "yes", "on"}
        return bool(value)
    if expected is int:
        if isinstance(value, float) and not value.is_integer():
            raise RangeError(f"{key} must be an integer, got {value}")
        return int(float(value)) if isinstance(value, str) else int(value)
    if expected is float:
        return float(value)
    return str(value)


def parse_overrides(overrides: typing.Iterable[str]) -> dict[str, typing.Any]:
    """
    Turn ['lr=1e-3', 'mask-ratio=0.25'] into typed values.
    """
    result: dict[str, typing.Any] = {}
    for override in overrides:
        key, sep, value = override.partition("=")
        if not sep:
            raise UnknownConfigKey(f"override '{override}' is not of the form key=value")
        result[_normalize_key(key)] = coerce_value(key, value)
    return result


def build_config(data: dict[str, typing.Any]) -> TrainConfig:
    """
    Create a TrainConfig from a (partial) dict; missing fields keep their defaults.
    """
    typed = {_normalize_key(key): coerce_value(key, value) for key, value in data.items()}
    return TrainConfig.load(typed)


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """
    Check the invariants and return a normalized copy (every field coerced to its declared type).

    Derived quantities (P, per-head dims, masked count) are properties of the returned config.
    """
    cfg = build_config(config_dict(cfg))

    if cfg.patch_size <= 0 or cfg.image_size % cfg.patch_size:
        raise DivisibilityError(f"image_size {cfg.image_size} is not divisible by patch_size {cfg.patch_size}")
    if cfg.source_size < cfg.image_size:
        raise RangeError(f"source_size {cfg.source_size} is smaller than image_size {cfg.image_size}")

    for name in ("vision", "text", "decoder"):
        width, heads = getattr(cfg, f"{name}_width"), getattr(cfg, f"{name}_heads")
        if heads <= 0 or width % heads:
            raise DivisibilityError(f"{name}_width {width} is not divisible by {name}_heads {heads}")

    if not 0 < cfg.mask_ratio < 1:
        raise RangeError(f"mask_ratio must be in (0, 1), got {cfg.mask_ratio}")
    if not 0 < cfg.lambda_start <= 1:
        raise RangeError(f"lambda_start must be in (0, 1], got {cfg.lambda_start}")
    if cfg.teacher_temp <= 0 or cfg.student_temp <= 0:
        raise RangeError(f"temperatures must be positive, got {cfg.teacher_temp} / {cfg.student_temp}")
    if not 0 <= cfg.center_momentum < 1:
        raise RangeError(f"center_momentum must be in [0, 1), got {cfg.center_momentum}")
    if min(cfg.alpha1, cfg.alpha2, cfg.alpha3) < 0:
        raise RangeError("loss weights must be nonnegative")
    if not 0 < cfg.logit_scale_init <= cfg.logit_scale_max:
        raise RangeError(f"logit_scale_init must be in (0, {cfg.logit_scale_max}], got {cfg.logit_scale_init}")
    if cfg.batch_size < 1 or cfg.total_steps < 1:
        raise RangeError("batch_size and total_steps must be at least 1")
    if cfg.mask_strategy not in MASK_STRATEGIES:
        raise RangeError(f"mask_strategy must be one of {MASK_STRATEGIES}, got {cfg.mask_strategy}")
    if cfg.kl_direction not in KL_DIRECTIONS:
        raise RangeError(f"kl_direction must be one of {KL_DIRECTIONS}, got {cfg.kl_direction}")
    if cfg.vocab_size < VOCABULARY_SIZE:
        raise VocabularyError(f"vocab_size {cfg.vocab_size} can not hold the {VOCABULARY_SIZE} known tokens")
    if cfg.context_length < LONGEST_CAPTION_TOKENS:
        raise RangeError(f"context_length must be at least {LONGEST_CAPTION_TOKENS}")

    return cfg


# ------------------------------------------------------------------------------------------------
# presets
# ------------------------------------------------------------------------------------------------

Preset: typing.TypeAlias = typing.Callable[[], dict[str, typing.Any]]

registered_presets: OrderedDict[str, Preset] = OrderedDict()
load_only_presets: set[str] = set()


@typing.overload
def preset(func: None = None, load_only: bool = False) -> typing.Callable[[Preset], Preset]:
    """
    Allows calling the decorator with parentheses.
    """


@typing.overload
def preset(func: Preset, load_only: bool = False) -> Preset:
    """
    Allows calling @preset without parens.
    """


def preset(func: Preset | None = None, load_only: bool = False) -> Preset | typing.Callable[[Preset], Preset]:
    """
    Decorator to register a function returning config overrides as a named preset.

    The name is the function name with dashes instead of underscores.
    `load_only` presets can be loaded and inspected, but `train` refuses to run them.

    Example:
        @preset
        def tiny():
            return {"vision_layers": 1}
    """

    def decorator(decorated: Preset) -> Preset:
        name = decorated.__name__.replace("_", "-")
        registered_presets[name] = decorated
        if load_only:
            load_only_presets.add(name)
        return decorated

    if func is not None:
        return decorator(func)

    return decorator


@preset
def mini() -> dict[str, typing.Any]:
    """
    Desk-scale defaults: the whole test suite runs on a CPU.
    """
    return {}


@preset
def tiny() -> dict[str, typing.Any]:
    """
    Smallest sensible model, used for gradient checks and quick CLI runs.
    """
    return {
        "image_size": 32,
        "source_size": 32,
        "vision_layers": 2,
        "vision_width": 32,
        "vision_heads": 2,
        "text_layers": 1,
        "text_width": 32,
        "text_heads": 2,
        "clip_embed_dim": 16,
        "head_out_dim": 32,
        "head_hidden_dim": 32,
        "head_bottleneck_dim": 16,
        "decoder_layers": 1,
        "decoder_width": 16,
        "decoder_heads": 2,
        "batch_size": 4,
        "total_steps": 20,
    }


@preset(load_only=True)
def vitb16_paper() -> dict[str, typing.Any]:
    """
    Full-scale ViT-B/16 configuration, kept for reference only.
    """
    return {
        "image_size": 224,
        "patch_size": 16,
        "source_size": 224,
        "vision_layers": 12,
        "vision_width": 768,
        "vision_heads": 12,
        "text_layers": 12,
        "text_width": 512,
        "text_heads": 8,
        "vocab_size": 49408,
        "context_length": 77,
        "clip_embed_dim": 512,
        "head_out_dim": 8192,
        "head_hidden_dim": 2048,
        "head_bottleneck_dim": 256,
        "decoder_layers": 8,
        "decoder_width": 512,
        "decoder_heads": 16,
        "lr": 5e-4,
        "weight_decay": 0.5,
        "batch_size": 4096,
    }


def load_preset(name: str) -> TrainConfig:
    """
    Build and validate the config of a registered preset.
    """
    if name not in registered_presets:
        raise PresetError(f"unknown preset '{name}', choose from {list(registered_presets)}")
    return validate_config(build_config(registered_presets[name]()))


def ensure_trainable(preset_name: Optional[str]) -> None:
    """
    Raise PresetError when preset_name is a load-only preset. None (no preset) is always trainable.
    """
    if preset_name in load_only_presets:
        raise PresetError(f"preset '{preset_name}' is load-only and can not be trained")


def list_presets() -> str:
    """
    Table of the registered presets with their main dimensions.
    """
    table = []
    for name in registered_presets:
        cfg = load_preset(name)
        table.append(
            [
                name,
                "yes" if name in load_only_presets else "no",
                f"{cfg.image_size}/{cfg.patch_size}",
                cfg.num_patches,
                f"{cfg.vision_layers}x{cfg.vision_width}",
                f"{cfg.text_layers}x{cfg.text_width}",
                cfg.head_out_dim,
                cfg.batch_size,
            ]
        )
    return tabulate(table, headers=["preset", "load only", "image/patch", "P", "vision", "text", "K", "batch"])


def load_train_config(
    path: str | Path | None = None,
    preset_name: Optional[str] = None,
    overrides: typing.Iterable[str] = (),
) -> TrainConfig:
    """
    Load the training config from a toml file or a preset (not both), then apply `key=value` overrides.

    The toml file may keep its keys in a [train] table or at the top level.
    """
    if path and preset_name:
        raise PresetError("use either a config file or a preset, not both")

    if path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            cfg = TrainConfig.load(str(path), key="train")
        except (configuraptor.errors.ConfigError, KeyError):
            cfg = TrainConfig.load(str(path))
    else:
        cfg = load_preset(preset_name or "mini")

    data = config_dict(cfg)
    data.update(parse_overrides(overrides))
    return validate_config(build_config(data))


# ------------------------------------------------------------------------------------------------
# runtime settings
# ------------------------------------------------------------------------------------------------


class Settings(configuraptor.TypedConfig, configuraptor.Singleton):
    """
    These options can be set via pyproject.toml or .env (or a combination).

    Use the [tool.clipdistill] key.
    Either - or _ can be used in the keys and they can be in any case.
    """

    clipdistill_deterministic: bool = False
    clipdistill_num_threads: int = 0
    clipdistill_log_every: int = 10

    deterministic: bool = alias("clipdistill_deterministic")

    def __repr__(self) -> str:
        """
        Represent the class by dumping its data.
        """
        data = asdict(self, with_top_level_key=False)
        return f"<Settings{data}>"


def _get_settings() -> Settings:
    """
    First try settings from pyproject, then fallback to env.
    """
    dotenv.load_dotenv(find_dotenv(usecwd=True))
    try:
        return Settings.load("pyproject.toml", key="tool.clipdistill")
    except (configuraptor.errors.ConfigError, FileNotFoundError):
        return Settings.from_env(load_dotenv=False)


def get_settings() -> Settings:
    """
    Get the runtime settings (a singleton), with environment variables taking precedence.
    """
    settings = _get_settings()
    settings.update_from_env()  # CLIPDISTILL_DETERMINISTIC=1 etc.

    return settings
