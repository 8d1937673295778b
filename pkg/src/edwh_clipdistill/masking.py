# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Attention-guided token masking.

The teacher's [CLS] attention rows are averaged over every head of every layer into one attention value (AV) per
patch; the patches with the lowest AV are hidden from the student.
"""

import typing

import torch

from .config import masked_count
from .exceptions import RangeError, ShapeError


def attention_values(record: torch.Tensor) -> torch.Tensor:
    """
    AttentionRecord (B x layers x heads x (P+1)) -> AttentionSummary (B x P).

    The rows are used as computed, so the [CLS]->[CLS] share stays in the normalisation and is simply not a candidate:
    sum(av) + mean [CLS] self-attention = 1.
    """
    if record.ndim != 4 or record.shape[-1] < 2:
        raise ShapeError(f"expected B x layers x heads x (P+1) attention rows, got {tuple(record.shape)}")
    return record[..., 1:].mean(dim=(1, 2))


def select_mask(summary: torch.Tensor, ratio: float) -> torch.Tensor:
    """
    Mask the ceil(ratio · P) patches with the smallest attention value.

    Ties are broken by patch index (lower index is masked first).

    Returns:
        B x P boolean MaskSet, True = masked.
    """
    if not 0 < ratio < 1:
        raise RangeError(f"mask ratio must be in (0, 1), got {ratio}")
    if summary.ndim != 2:
        raise ShapeError(f"expected B x P attention values, got {tuple(summary.shape)}")

    count = masked_count(ratio, summary.shape[1])
    order = torch.sort(summary, dim=1, stable=True).indices[:, :count]
    mask = torch.zeros(summary.shape, dtype=torch.bool, device=summary.device)
    return mask.scatter(1, order, True)


def random_mask(batch_size: int, num_patches: int, ratio: float, generator: torch.Generator) -> torch.Tensor:
    """
    Same cardinality as `select_mask`, but the hidden patches are chosen uniformly at random (ablation only).
    """
    noise = torch.rand(batch_size, num_patches, generator=generator)
    return select_mask(noise, ratio)


def empty_mask(batch_size: int, num_patches: int) -> torch.Tensor:
    """
    All-false mask: the student sees every patch (test mode).
    """
    return torch.zeros(batch_size, num_patches, dtype=torch.bool)


def build_mask(
    strategy: str,
    record: typing.Optional[torch.Tensor],
    ratio: float,
    batch_size: int,
    num_patches: int,
    generator: typing.Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Mask for one view according to the configured strategy ('attention', 'random' or 'none').
    """
    if strategy == "attention":
        if record is None:
            raise ShapeError("attention masking needs the teacher's attention record")
        return select_mask(attention_values(record), ratio)
    if strategy == "random":
        return random_mask(batch_size, num_patches, ratio, generator or torch.Generator())
    if strategy == "none":
        return empty_mask(batch_size, num_patches)
    raise RangeError(f"unknown mask strategy {strategy}")
