# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Every loss term and their weighted sum.

 * clip_loss: symmetric cross-entropy over scaled cosine similarities (image->text and text->image).
 * cls_distill_loss: KL between student and teacher [CLS] distributions, cross-view.
 * patch_distill_loss: KL between student and teacher patch distributions, masked patches only, same view.
 * reconstruction_loss: squared error of the predicted pixels, masked patches only.
 * total_loss: α₁·L_cls + α₂·L_patch + α₃·L_rec + L_clip.

The KL terms are written as D_KL(p_student ‖ p_teacher) by default; `direction="teacher_student"` flips them.
"""

import dataclasses
import math
import typing

import torch
import torch.nn.functional as F

from .exceptions import DegenerateBatch, EmptyMask, RangeError, ShapeError, ZeroNormError

Direction: typing.TypeAlias = typing.Literal["student_teacher", "teacher_student"]


@dataclasses.dataclass
class LossBreakdown:
    """
    Scalar tensors for every term; `l_tot` is the one to backpropagate.
    """

    l_i2t: torch.Tensor
    l_t2i: torch.Tensor
    l_clip: torch.Tensor
    l_cls: torch.Tensor
    l_patch: torch.Tensor
    l_rec: torch.Tensor
    l_tot: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {field.name: float(getattr(self, field.name).detach()) for field in dataclasses.fields(self)}

    def non_finite(self) -> dict[str, float]:
        """
        Terms that are NaN or infinite (empty when all is well).
        """
        return {name: value for name, value in self.as_floats().items() if not math.isfinite(value)}


@dataclasses.dataclass
class CenterState:
    """
    Running mean of the teacher logits, subtracted before sharpening.

    Only ever updated from teacher logits and never part of the autograd graph.
    """

    center: torch.Tensor
    momentum: float = 0.9

    @torch.no_grad()
    def update(self, batch_mean: torch.Tensor) -> None:
        """
        center <- m · center + (1 - m) · batch_mean (in place, so a model buffer passed in stays in sync).
        """
        self.center.mul_(self.momentum).add_(batch_mean.to(self.center.dtype), alpha=1 - self.momentum)


def logit_mean(*logits: torch.Tensor) -> torch.Tensor:
    """
    Mean over every position of one or more ... x K logit tensors -> K.
    """
    return torch.cat([t.reshape(-1, t.shape[-1]) for t in logits]).mean(dim=0)


@torch.no_grad()
def sharpen_teacher(
    logits: torch.Tensor,
    temp: float,
    center: CenterState,
    update: bool = True,
) -> torch.Tensor:
    """
    softmax((logits - center) / temp); afterwards (when `update`) the center moves towards this batch's mean.
    """
    if temp <= 0:
        raise RangeError(f"teacher temperature must be positive, got {temp}")
    probs = ((logits - center.center) / temp).softmax(dim=-1)
    if update:
        center.update(logit_mean(logits))
    return probs


def _safe_log(probs: torch.Tensor) -> torch.Tensor:
    return probs.clamp_min(torch.finfo(probs.dtype).tiny).log()


def kl_divergence(student_probs: torch.Tensor, teacher_probs: torch.Tensor, direction: Direction) -> torch.Tensor:
    """
    Position-wise KL over the last axis.
    """
    log_s, log_t = _safe_log(student_probs), _safe_log(teacher_probs)
    if direction == "student_teacher":
        return (student_probs * (log_s - log_t)).sum(dim=-1)
    if direction == "teacher_student":
        return (teacher_probs * (log_t - log_s)).sum(dim=-1)
    raise RangeError(f"unknown KL direction {direction}")


def student_probs(logits: torch.Tensor, temp: float) -> torch.Tensor:
    """softmax(logits / temp) over the last axis. No centering on the student side."""
    if temp <= 0:
        raise RangeError(f"student temperature must be positive, got {temp}")
    return (logits / temp).softmax(dim=-1)


def clip_loss(
    img_embeds: torch.Tensor | typing.Sequence[torch.Tensor],
    txt_embeds: torch.Tensor,
    logit_scale: torch.Tensor | float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Contrastive loss of N matched (image, text) pairs, the diagonal being the positives.

    Args:
        img_embeds: N x D image embeddings, or a sequence of them (one per view); views are averaged.
        txt_embeds: N x D text embeddings.
        logit_scale: 1/τ.

    Returns:
        (l_i2t, l_t2i, l_clip) with l_clip = (l_i2t + l_t2i) / 2.
    """
    views = [img_embeds] if isinstance(img_embeds, torch.Tensor) else list(img_embeds)
    if txt_embeds.ndim != 2 or txt_embeds.shape[0] == 0:
        raise DegenerateBatch(f"need at least one (image, text) pair, got text shape {tuple(txt_embeds.shape)}")
    if bool((txt_embeds.norm(dim=-1) == 0).any()):
        raise ZeroNormError("text embedding with zero norm")
    texts = txt_embeds / txt_embeds.norm(dim=-1, keepdim=True)

    i2t, t2i = [], []
    for images in views:
        if images.shape != txt_embeds.shape:
            raise ShapeError(f"image embeddings {tuple(images.shape)} do not match text {tuple(txt_embeds.shape)}")
        if bool((images.norm(dim=-1) == 0).any()):
            raise ZeroNormError("image embedding with zero norm")
        images = images / images.norm(dim=-1, keepdim=True)

        logits = logit_scale * images @ texts.T
        labels = torch.arange(logits.shape[0], device=logits.device)
        i2t.append(F.cross_entropy(logits, labels))
        t2i.append(F.cross_entropy(logits.T, labels))

    l_i2t = torch.stack(i2t).mean()
    l_t2i = torch.stack(t2i).mean()
    return l_i2t, l_t2i, (l_i2t + l_t2i) / 2


def cls_distill_loss(
    student_logits_u: torch.Tensor,
    student_logits_v: torch.Tensor,
    teacher_probs_u: torch.Tensor,
    teacher_probs_v: torch.Tensor,
    student_temp: float,
    direction: Direction = "student_teacher",
) -> torch.Tensor:
    """
    [CLS] distillation, cross-view: the student's view u is matched to the teacher's view v and vice versa.

    Inputs are B x K; the result is averaged over the batch and both pairings.
    """
    if student_logits_u.shape != teacher_probs_v.shape or student_logits_v.shape != teacher_probs_u.shape:
        raise ShapeError("student logits and teacher probabilities must have the same shape")

    uv = kl_divergence(student_probs(student_logits_u, student_temp), teacher_probs_v, direction)
    vu = kl_divergence(student_probs(student_logits_v, student_temp), teacher_probs_u, direction)
    return (uv.mean() + vu.mean()) / 2


def _masked_mean(per_position: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    B x P values -> mean over the masked positions of each sample, then over the batch.
    """
    if per_position.shape != mask.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match {tuple(per_position.shape)}")
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptyMask("every sample needs at least one masked patch")
    weights = mask.to(per_position.dtype)
    return ((per_position * weights).sum(dim=1) / counts.to(per_position.dtype)).mean()


def patch_distill_loss(
    student_logits: torch.Tensor,
    teacher_probs: torch.Tensor,
    mask: torch.Tensor,
    student_temp: float,
    direction: Direction = "student_teacher",
) -> torch.Tensor:
    """
    Patch distillation for one view: B x P x K student logits vs teacher probabilities, masked patches only.
    """
    if student_logits.shape != teacher_probs.shape:
        raise ShapeError("student logits and teacher probabilities must have the same shape")
    per_patch = kl_divergence(student_probs(student_logits, student_temp), teacher_probs, direction)
    return _masked_mean(per_patch, mask)


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    (1/|M|) Σ_{i∈M} ‖pred_i - target_i‖² per sample, averaged over the batch. Shapes: B x P x patch_dim.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    per_patch = ((pred - target) ** 2).sum(dim=-1)
    return _masked_mean(per_patch, mask)


def total_loss(
    l_i2t: torch.Tensor,
    l_t2i: torch.Tensor,
    l_clip: torch.Tensor,
    l_cls: torch.Tensor,
    l_patch: torch.Tensor,
    l_rec: torch.Tensor,
    alpha1: float = 1.0,
    alpha2: float = 1.0,
    alpha3: float = 1.0,
) -> LossBreakdown:
    """
    α₁·l_cls + α₂·l_patch + α₃·l_rec + l_clip.

    All parts are kept in the breakdown, also when their weight is 0.
    """
    as_tensor = [torch.as_tensor(part) for part in (l_i2t, l_t2i, l_clip, l_cls, l_patch, l_rec)]
    l_i2t, l_t2i, l_clip, l_cls, l_patch, l_rec = as_tensor
    l_tot = alpha1 * l_cls + alpha2 * l_patch + alpha3 * l_rec + l_clip
    return LossBreakdown(
        l_i2t=l_i2t, l_t2i=l_t2i, l_clip=l_clip, l_cls=l_cls, l_patch=l_patch, l_rec=l_rec, l_tot=l_tot
    )
