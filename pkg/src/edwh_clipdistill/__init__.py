# coding=utf-8
# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
This file exposes the most important functions and classes.

A typical session:
 * build a config with `load_train_config` (or `load_preset`),
 * create data with `generate_corpus`,
 * `train` it, then `eval_retrieval` / `eval_zero_shot` / `visualize_masks` on the written checkpoint.
"""

from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .cli import _console_hook as console_hook
from .config import (
    Settings,
    TrainConfig,
    config_hash,
    get_settings,
    list_presets,
    load_preset,
    load_train_config,
    preset,
    registered_presets,
    validate_config,
)
from .data import class_captions, export_corpus, generate_corpus, import_corpus, make_views, tokenize
from .ema import ema_update, lambda_at
from .evaluate import eval_retrieval, eval_zero_shot, run_ablation, visualize_masks
from .gradcheck import grad_check
from .masking import attention_values, select_mask
from .model import ClipDistillModel, build_model
from .objectives import clip_loss, cls_distill_loss, patch_distill_loss, reconstruction_loss, total_loss
from .trainer import forward_step, train

__all__ = [
    "TrainConfig",
    "Settings",
    "get_settings",
    "load_train_config",
    "load_preset",
    "list_presets",
    "preset",
    "registered_presets",
    "validate_config",
    "config_hash",
    "generate_corpus",
    "export_corpus",
    "import_corpus",
    "class_captions",
    "tokenize",
    "make_views",
    "attention_values",
    "select_mask",
    "clip_loss",
    "cls_distill_loss",
    "patch_distill_loss",
    "reconstruction_loss",
    "total_loss",
    "lambda_at",
    "ema_update",
    "ClipDistillModel",
    "build_model",
    "TrainState",
    "save_checkpoint",
    "load_checkpoint",
    "forward_step",
    "train",
    "grad_check",
    "eval_retrieval",
    "eval_zero_shot",
    "visualize_masks",
    "run_ablation",
    "console_hook",
]
