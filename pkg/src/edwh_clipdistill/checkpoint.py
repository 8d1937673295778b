# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Training state and its on-disk checkpoint format.

A checkpoint is a directory:
    manifest.json       format version, step, config (+ hash), and a descriptor per array
    arrays/<name>.bin   raw little-endian float32, one file per named array

Student (φ) and teacher (θ) parameters, the teacher center and the optimizer moments are all stored as arrays, so a
load + save round trip reproduces every payload byte for byte.
"""

import contextlib
import dataclasses
import json
import shutil
import typing
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig, build_config, config_dict, config_hash
from .constants import ARRAY_DTYPE, CHECKPOINT_FORMAT_VERSION, MANIFEST_NAME
from .ema import EmaState
from .exceptions import ConfigMismatch, IoError, RangeError, ShapeMismatch, VersionError
from .model import ClipDistillModel, build_model

OPTIMIZER_PREFIX = "optimizer"
MOMENTS = ("exp_avg", "exp_avg_sq", "step")


@dataclasses.dataclass
class TrainState:
    """
    Everything that evolves during training. Batches and views derive from (cfg.seed, step), so no RNG state is kept.
    """

    cfg: TrainConfig
    model: ClipDistillModel
    optimizer: torch.optim.Optimizer
    step: int = 0

    @property
    def ema(self) -> EmaState:
        """Momentum schedule at the current step. Derived from step and cfg, never stored."""
        return EmaState(self.step, self.cfg.total_steps, self.cfg.lambda_start)

    @property
    def param_names(self) -> dict[torch.Tensor, str]:
        return {param: name for name, param in self.model.student_parameters().items()}


def build_optimizer(model: ClipDistillModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """
    AdamW (decoupled weight decay); biases, normalization gains, embeddings of rank < 2 and τ are not decayed.
    """
    decay, no_decay = [], []
    for name, param in model.student_parameters().items():
        if param.ndim < 2 or name.endswith(".bias") or name.endswith("logit_scale"):
            no_decay.append(param)
        else:
            decay.append(param)

    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        betas=(0.9, 0.98),
        eps=1e-6,
    )


def new_train_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg)
    return TrainState(cfg=cfg, model=model, optimizer=build_optimizer(model, cfg), step=0)


# ------------------------------------------------------------------------------------------------
# arrays
# ------------------------------------------------------------------------------------------------


def state_arrays(state: TrainState) -> dict[str, torch.Tensor]:
    """
    Every named array of the state: model parameters and buffers, then optimizer moments.
    """
    arrays = {name: tensor.detach() for name, tensor in state.model.state_dict().items()}

    names = state.param_names
    for group in state.optimizer.param_groups:
        for param in group["params"]:
            moments = state.optimizer.state.get(param)
            if not moments:
                continue
            for moment in MOMENTS:
                value = torch.as_tensor(moments[moment]).detach()
                arrays[f"{OPTIMIZER_PREFIX}.{moment}.{names[param]}"] = value

    return arrays


def _to_little_endian_f4(tensor: torch.Tensor) -> np.ndarray:
    array = tensor.detach().cpu().to(torch.float32).numpy()
    return np.ascontiguousarray(array, dtype=ARRAY_DTYPE)


@contextlib.contextmanager
def checkpoint_directory(path: str | Path) -> typing.Generator[Path, None, None]:
    """
    Context manager that yields a scratch directory, which replaces `path` only after the with block succeeded.

    On any exception the scratch directory is removed and the previous checkpoint (if any) stays untouched.
    """
    path = Path(path)
    partial = path.with_name(f"{path.name}.partial")
    if partial.exists():
        shutil.rmtree(partial)

    try:
        (partial / "arrays").mkdir(parents=True)
        yield partial
        # executed after successful with block:
        if path.exists():
            shutil.rmtree(path)
        partial.rename(path)
    except OSError as e:
        shutil.rmtree(partial, ignore_errors=True)
        raise IoError(f"could not write checkpoint {path}: {e}") from e
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise


def save_checkpoint(state: TrainState, path: str | Path) -> dict[str, typing.Any]:
    """
    Write the state to a checkpoint directory and return the manifest.
    """
    arrays = state_arrays(state)
    non_finite = [name for name, tensor in arrays.items() if not bool(torch.isfinite(tensor).all())]
    if non_finite:
        raise RangeError(f"refusing to save non-finite arrays: {non_finite[:5]}")

    manifest: dict[str, typing.Any] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "config_hash": config_hash(state.cfg),
        "config": config_dict(state.cfg),
        "arrays": {},
    }

    with checkpoint_directory(path) as directory:
        for name, tensor in arrays.items():
            filename = f"arrays/{name}.bin"
            _to_little_endian_f4(tensor).tofile(directory / filename)
            manifest["arrays"][name] = {
                "file": filename,
                "dtype": ARRAY_DTYPE,
                "shape": list(tensor.shape),
                "byte_order": "little",
            }
        (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))

    return manifest


def read_manifest(path: str | Path) -> dict[str, typing.Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise IoError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"could not read {manifest_path}: {e}") from e

    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionError(f"checkpoint format {version} can not be read (expected {CHECKPOINT_FORMAT_VERSION})")
    return typing.cast(dict[str, typing.Any], manifest)


def read_array(directory: Path, descriptor: dict[str, typing.Any]) -> torch.Tensor:
    shape = tuple(descriptor["shape"])
    if descriptor.get("dtype") != ARRAY_DTYPE:
        raise VersionError(f"unsupported array dtype {descriptor.get('dtype')}")
    filename = directory / descriptor["file"]
    if not filename.exists():
        raise IoError(f"missing array file {filename}")

    array = np.fromfile(filename, dtype=ARRAY_DTYPE)
    if array.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatch(f"{filename} holds {array.size} values, manifest says {shape}")
    return torch.from_numpy(array.astype(np.float32).reshape(shape))


def load_checkpoint(
    path: str | Path,
    cfg: Optional[TrainConfig] = None,
    allow_config_mismatch: bool = False,
) -> TrainState:
    """
    Restore a TrainState.

    Args:
        path: checkpoint directory.
        cfg: config to build the model from; defaults to the config stored in the manifest.
        allow_config_mismatch: load even when `cfg` hashes differently from the stored config
            (the arrays still have to fit, otherwise ShapeMismatch).
    """
    directory = Path(path)
    manifest = read_manifest(directory)

    stored = build_config(manifest["config"])
    if cfg is None:
        cfg = stored
    elif config_hash(cfg) != manifest["config_hash"] and not allow_config_mismatch:
        raise ConfigMismatch(f"{directory} was written with a different config (hash {manifest['config_hash'][:12]})")

    state = new_train_state(cfg)
    descriptors: dict[str, dict[str, typing.Any]] = manifest["arrays"]

    model_state = state.model.state_dict()
    missing = sorted(set(model_state) - set(descriptors))
    if missing:
        raise ShapeMismatch(f"checkpoint lacks arrays: {missing[:5]}")

    loaded = {}
    for name, expected in model_state.items():
        if list(expected.shape) != list(descriptors[name]["shape"]):
            raise ShapeMismatch(f"{name}: checkpoint {descriptors[name]['shape']} vs model {list(expected.shape)}")
        loaded[name] = read_array(directory, descriptors[name]).to(expected.dtype)
    state.model.load_state_dict(loaded)

    for name, param in state.model.student_parameters().items():
        keys = {moment: f"{OPTIMIZER_PREFIX}.{moment}.{name}" for moment in MOMENTS}
        if not all(key in descriptors for key in keys.values()):
            continue
        moments = {moment: read_array(directory, descriptors[key]) for moment, key in keys.items()}
        if moments["exp_avg"].shape != param.shape:
            raise ShapeMismatch(f"optimizer moments of {name} do not fit {tuple(param.shape)}")
        state.optimizer.state[param] = {
            "step": moments["step"].reshape(()),
            "exp_avg": moments["exp_avg"].to(param.dtype),
            "exp_avg_sq": moments["exp_avg_sq"].to(param.dtype),
        }

    state.step = int(manifest["step"])
    return state
