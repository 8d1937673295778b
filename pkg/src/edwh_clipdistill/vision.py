# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Vision encoder g: patchify, mask-token substitution and [CLS] attention recording.

Masked patches are not dropped: their patch embedding is replaced by a learned mask token before the
transformer layers, so the output always holds P + 1 positions ([CLS] first, patches in row-major order).
"""

import typing

import torch
import torch.nn as nn
from einops import rearrange

from .config import TrainConfig
from .exceptions import MaskCardinalityError, ShapeError
from .transformer import Block, init_weights


def patchify(views: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    B x H x W x 3 (or H x W x 3) image -> B x P x (patch_size² · 3), row-major, non-overlapping.
    """
    if views.ndim == 3:
        return patchify(views[None], patch_size)[0]
    if views.ndim != 4 or views.shape[-1] != 3:
        raise ShapeError(f"expected B x H x W x 3 images, got {tuple(views.shape)}")
    _, height, width, _ = views.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"image {height}x{width} is not divisible into {patch_size}px patches")
    return rearrange(views, "b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(patches: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    Inverse of `patchify` (square images only).
    """
    if patches.ndim == 2:
        return unpatchify(patches[None], patch_size)[0]
    grid = int(round(patches.shape[1] ** 0.5))
    if grid * grid != patches.shape[1] or patches.shape[2] != patch_size**2 * 3:
        raise ShapeError(f"can not unpatchify {tuple(patches.shape)} with patch size {patch_size}")
    return rearrange(patches, "b (h w) (p1 p2 c) -> b (h p1) (w p2) c", h=grid, p1=patch_size, p2=patch_size)


def stack_attention(rows: list[torch.Tensor]) -> torch.Tensor:
    """
    Per-layer [CLS] rows (each B x heads x (P+1)) -> AttentionRecord tensor B x layers x heads x (P+1).
    """
    return torch.stack(rows, dim=1)


class VisionEncoder(nn.Module):
    """
    ViT with learned absolute position embeddings and pre-norm blocks.
    """

    def __init__(self, cfg: TrainConfig) -> None:
        super().__init__()
        self.image_size = cfg.image_size
        self.patch_size = cfg.patch_size
        self.num_patches = cfg.num_patches
        self.masked_count = cfg.masked_count

        width = cfg.vision_width
        self.patch_embed = nn.Linear(cfg.patch_dim, width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, width))
        self.blocks = nn.ModuleList(
            [Block(width, cfg.vision_heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers)]
        )
        self.norm = nn.LayerNorm(width)

        self.apply(init_weights)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def check_mask(self, mask: torch.Tensor, batch_size: int) -> None:
        """
        A mask hides exactly ceil(mask_ratio · P) patches per sample; an all-false mask is the no-op test mode.
        """
        if mask.shape != (batch_size, self.num_patches) or mask.dtype != torch.bool:
            raise ShapeError(f"expected a {batch_size} x {self.num_patches} boolean mask, got {tuple(mask.shape)}")
        counts = mask.sum(dim=1)
        if not bool(((counts == self.masked_count) | (counts == 0)).all()):
            raise MaskCardinalityError(f"mask hides {counts.tolist()} patches, expected {self.masked_count}")

    def forward(
        self,
        views: torch.Tensor,
        mask: typing.Optional[torch.Tensor] = None,
        record_attention: bool = False,
    ) -> tuple[torch.Tensor, typing.Optional[torch.Tensor]]:
        """
        Encode B x H x W x 3 views.

        Returns:
            (tokens B x (P+1) x width, attention record B x layers x heads x (P+1) or None)
        """
        if views.ndim != 4 or views.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError(f"expected B x {self.image_size} x {self.image_size} x 3, got {tuple(views.shape)}")

        x = self.patch_embed(patchify(views, self.patch_size))
        if mask is not None:
            self.check_mask(mask, x.shape[0])
            x = torch.where(mask[..., None], self.mask_token.to(x.dtype), x)

        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos_embed

        rows = []
        for block in self.blocks:
            x, cls_row = block(x, record=record_attention)
            if cls_row is not None:
                rows.append(cls_row)

        record = stack_attention(rows) if record_attention else None
        return self.norm(x), record
