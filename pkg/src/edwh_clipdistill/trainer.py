# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
The training step and loop.

One step, in order:
 1. the teacher (g_θ, h_θ) embeds both views without gradients and records its [CLS] attention;
 2. masks are derived from the teacher attention;
 3. the student (g_φ) encodes the masked views;
 4. CLIP embeddings of both views and the captions;
 5. distillation logits from the shared head h_φ, sharpened teacher targets;
 6. reconstruction of the masked patches by the decoder;
 7. the weighted sum of all terms.
After the optimizer update the teacher follows the student (EMA) and the teacher center moves.
"""

import dataclasses
import math
import typing
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
from tqdm import tqdm

from .checkpoint import TrainState, load_checkpoint, new_train_state, save_checkpoint
from .config import TrainConfig, config_dict, build_config
from .constants import LOSS_LOG_FIELDS, LOSS_LOG_NAME
from .data import Batch, CaptionedImage, batch_iterator
from .ema import ema_update
from .exceptions import IoError, NonFiniteLoss, RangeError
from .helpers import deterministic_mode, torch_generator
from .masking import build_mask
from .model import ClipDistillModel
from .objectives import (
    CenterState,
    LossBreakdown,
    clip_loss,
    cls_distill_loss,
    logit_mean,
    patch_distill_loss,
    reconstruction_loss,
    sharpen_teacher,
    total_loss,
)
from .vision import patchify

CHECKPOINT_DIR = "checkpoint"


@dataclasses.dataclass
class StepOutput:
    """
    Result of one forward pass.

    `teacher_mean` is the proposed center update; it is only applied by `train_step`.
    """

    losses: LossBreakdown
    mask_u: torch.Tensor
    mask_v: torch.Tensor
    teacher_mean: torch.Tensor


@dataclasses.dataclass
class TrainResult:
    state: TrainState
    log_path: Path
    checkpoint_path: Path
    records: list[dict[str, float]]


# ------------------------------------------------------------------------------------------------
# forward
# ------------------------------------------------------------------------------------------------


def forward_step(model: ClipDistillModel, cfg: TrainConfig, batch: Batch, step: int = 0) -> StepOutput:
    """
    Compute every loss term for one batch. Nothing is mutated (not even the teacher center).
    """
    dtype = model.center.dtype
    views_u = batch.views_u.to(dtype)
    views_v = batch.views_v.to(dtype)
    batch_size = views_u.shape[0]

    with torch.no_grad():
        teacher_u, record_u = model.teacher_visual(views_u, record_attention=True)
        teacher_v, record_v = model.teacher_visual(views_v, record_attention=True)
        teacher_logits_u = model.teacher_head(teacher_u)
        teacher_logits_v = model.teacher_head(teacher_v)

    num_patches = cfg.num_patches
    mask_u = build_mask(
        cfg.mask_strategy, record_u, cfg.mask_ratio, batch_size, num_patches, torch_generator(cfg.seed, step, 0)
    )
    mask_v = build_mask(
        cfg.mask_strategy, record_v, cfg.mask_ratio, batch_size, num_patches, torch_generator(cfg.seed, step, 1)
    )

    student_u, _ = model.visual(views_u, mask=mask_u)
    student_v, _ = model.visual(views_v, mask=mask_v)

    text = model.text(batch.tokens, batch.eot_index)
    l_i2t, l_t2i, l_clip = clip_loss([model.clip(student_u), model.clip(student_v)], text, model.clip.scale())

    center = CenterState(model.center, cfg.center_momentum)
    probs_u = sharpen_teacher(teacher_logits_u, cfg.teacher_temp, center, update=False)
    probs_v = sharpen_teacher(teacher_logits_v, cfg.teacher_temp, center, update=False)
    student_logits_u = model.dist_head(student_u)
    student_logits_v = model.dist_head(student_v)

    direction = typing.cast(typing.Any, cfg.kl_direction)
    l_cls = cls_distill_loss(
        student_logits_u[:, 0],
        student_logits_v[:, 0],
        probs_u[:, 0],
        probs_v[:, 0],
        cfg.student_temp,
        direction,
    )

    # without masking every patch is scored
    if cfg.mask_strategy == "none":
        loss_mask_u = loss_mask_v = torch.ones_like(mask_u)
    else:
        loss_mask_u, loss_mask_v = mask_u, mask_v

    l_patch = (
        patch_distill_loss(student_logits_u[:, 1:], probs_u[:, 1:], loss_mask_u, cfg.student_temp, direction)
        + patch_distill_loss(student_logits_v[:, 1:], probs_v[:, 1:], loss_mask_v, cfg.student_temp, direction)
    ) / 2

    l_rec = (
        reconstruction_loss(model.decoder(student_u, mask_u), patchify(views_u, cfg.patch_size), loss_mask_u)
        + reconstruction_loss(model.decoder(student_v, mask_v), patchify(views_v, cfg.patch_size), loss_mask_v)
    ) / 2

    losses = total_loss(l_i2t, l_t2i, l_clip, l_cls, l_patch, l_rec, cfg.alpha1, cfg.alpha2, cfg.alpha3)
    return StepOutput(
        losses=losses,
        mask_u=mask_u,
        mask_v=mask_v,
        teacher_mean=logit_mean(teacher_logits_u, teacher_logits_v),
    )


# ------------------------------------------------------------------------------------------------
# optimisation
# ------------------------------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Linear warmup over `warmup_steps`, then cosine decay from `lr` to `min_lr` at `total_steps`.
    """
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    progress = min(1.0, (step - cfg.warmup_steps) / max(1, cfg.total_steps - cfg.warmup_steps))
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def train_step(state: TrainState, batch: Batch) -> dict[str, float]:
    """
    forward_step + backward + AdamW update + EMA teacher update + center update, then step += 1.

    Returns the loss log record of this step.
    """
    cfg, model = state.cfg, state.model
    step = state.step

    output = forward_step(model, cfg, batch, step)
    non_finite = output.losses.non_finite()
    if non_finite:
        raise NonFiniteLoss(step, non_finite)

    tau = model.clip.temperature()
    lam = state.ema.current

    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(step, cfg)
    state.optimizer.zero_grad(set_to_none=True)
    output.losses.l_tot.backward()
    if cfg.grad_clip > 0:
        nn.utils.clip_grad_norm_(list(model.student_parameters().values()), cfg.grad_clip)
    state.optimizer.step()

    ema_update(model.teacher_visual, model.visual, lam)
    ema_update(model.teacher_head, model.dist_head, lam)
    CenterState(model.center, cfg.center_momentum).update(output.teacher_mean)

    state.step = step + 1
    return {"step": state.step, **output.losses.as_floats(), "lambda": lam, "tau": tau}


# ------------------------------------------------------------------------------------------------
# loss log
# ------------------------------------------------------------------------------------------------


def format_record(record: dict[str, float]) -> str:
    values = [str(int(record["step"]))] + [repr(float(record[field])) for field in LOSS_LOG_FIELDS[1:]]
    return "\t".join(values)


def read_loss_log(path: str | Path) -> list[dict[str, float]]:
    """
    Parse a loss log back into records (the header line is skipped).
    """
    path = Path(path)
    if not path.exists():
        raise IoError(f"no loss log at {path}")
    records = []
    lines = path.read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        values = line.split("\t")
        record: dict[str, float] = {field: float(value) for field, value in zip(LOSS_LOG_FIELDS, values)}
        record["step"] = int(record["step"])
        records.append(record)
    return records


def _open_loss_log(path: Path, resume_step: int) -> typing.TextIO:
    """
    Fresh log (header only) for a new run; on resume keep the records up to the checkpoint's step.
    """
    if resume_step and path.exists():
        kept = [format_record(record) for record in read_loss_log(path) if record["step"] <= resume_step]
        f = path.open("w")
        f.write("\t".join(LOSS_LOG_FIELDS) + "\n")
        f.writelines(line + "\n" for line in kept)
        return f

    f = path.open("w")
    f.write("\t".join(LOSS_LOG_FIELDS) + "\n")
    return f


# ------------------------------------------------------------------------------------------------
# loop
# ------------------------------------------------------------------------------------------------


def train(
    cfg: TrainConfig,
    corpus: typing.Sequence[CaptionedImage],
    out_dir: str | Path,
    resume: str | Path | None = None,
    stop_at: Optional[int] = None,
    deterministic: bool = False,
    log_every: int = 10,
    verbose: bool = True,
    num_threads: int = 0,
) -> TrainResult:
    """
    Run the training loop and write `losses.tsv` plus `checkpoint/` into out_dir.

    Args:
        cfg: validated training config.
        corpus: training samples.
        out_dir: output directory (created when missing).
        resume: checkpoint directory to continue from; its config has to hash equal to cfg.
        stop_at: stop after this step instead of cfg.total_steps (the schedules still span total_steps).
        deterministic: single-threaded deterministic kernels (bitwise reproducible logs).
        log_every: refresh interval of the progress bar's loss display.
        verbose: show the progress bar.
        num_threads: intra-op threads outside of deterministic mode (0 = torch default).
    """
    if not corpus:
        raise RangeError("the training corpus is empty")
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"could not create {out_dir}: {e}") from e

    log_path = out_dir / LOSS_LOG_NAME
    checkpoint_path = out_dir / CHECKPOINT_DIR

    with deterministic_mode(enabled=deterministic, num_threads=num_threads):
        state = load_checkpoint(resume, cfg) if resume else new_train_state(cfg)
        if verbose and resume:
            print(f"resuming from {resume} at step {state.step}")

        records: list[dict[str, float]] = []
        with _open_loss_log(log_path, state.step) as log:
            progress = tqdm(
                batch_iterator(corpus, cfg, state.step, end),
                total=end - state.step,
                desc="train",
                disable=not verbose,
            )
            for _, batch in progress:
                record = train_step(state, batch)
                records.append(record)
                log.write(format_record(record) + "\n")

                if log_every and state.step % log_every == 0:
                    progress.set_postfix(l_tot=f"{record['l_tot']:.4f}", tau=f"{record['tau']:.4f}")
                if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and state.step < end:
                    log.flush()
                    save_checkpoint(state, checkpoint_path)
            progress.close()

        save_checkpoint(state, checkpoint_path)

    if verbose:
        print(f"wrote {log_path} and {checkpoint_path} (step {state.step})")
    return TrainResult(state=state, log_path=log_path, checkpoint_path=checkpoint_path, records=records)


def with_overrides(cfg: TrainConfig, **overrides: typing.Any) -> TrainConfig:
    """
    Copy of cfg with some fields replaced.
    """
    data = config_dict(cfg)
    data.update(overrides)
    return build_config(data)
