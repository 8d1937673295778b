"""
Projection heads: the shared distillation head h, the CLIP image projection with its temperature, and decoder d.
"""

import math
import typing

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .config import TrainConfig
from .exceptions import ShapeError
from .transformer import Block, init_weights


class DistillHead(nn.Module):
    """
    3-layer MLP with an L2-normalized bottleneck, followed by a weight-normalized linear layer to K logits.

    Applied position-wise, with the same weights, to [CLS] and to every patch token.
    The gain of the last layer is fixed at 1.
    """

    def __init__(self, in_dim: int, hidden_dim: int, bottleneck_dim: int, out_dim: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.apply(init_weights)

        self.last_layer = weight_norm(nn.Linear(bottleneck_dim, out_dim, bias=False))
        gain = self.last_layer.parametrizations.weight.original0
        gain.data.fill_(1)
        gain.requires_grad = False

    def bottleneck(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.in_dim:
            raise ShapeError(f"expected features of width {self.in_dim}, got {tuple(tokens.shape)}")
        return F.normalize(self.mlp(tokens), dim=-1, p=2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """
        ... x width -> ... x K logits.
        """
        return self.last_layer(self.bottleneck(tokens))


class ClipProjection(nn.Module):
    """
    Linear image projection of the [CLS] position and the learnable logit scale 1/τ (stored as a log).
    """

    def __init__(self, cfg: TrainConfig) -> None:
        super().__init__()
        self.image_projection = nn.Linear(cfg.vision_width, cfg.clip_embed_dim, bias=False)
        nn.init.xavier_uniform_(self.image_projection.weight)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(cfg.logit_scale_init)))
        self.max_log_scale = math.log(cfg.logit_scale_max)

    def scale(self) -> torch.Tensor:
        """
        1/τ, clamped to at most logit_scale_max.
        """
        return self.logit_scale.clamp(max=self.max_log_scale).exp()

    def temperature(self) -> float:
        return float(1 / self.scale().detach())

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """
        B x (P+1) x width -> B x clip_embed_dim, from the [CLS] position only.
        """
        if tokens.ndim != 3:
            raise ShapeError(f"expected B x (P+1) x width tokens, got {tuple(tokens.shape)}")
        return self.image_projection(tokens[:, 0])


class Decoder(nn.Module):
    """
    Reconstruction decoder d with its pixel head.

    Drops [CLS], maps every patch token to decoder_width, adds decoder position embeddings and predicts the pixels
    of all P patches; restricting to masked patches is the loss's job.
    """

    def __init__(self, cfg: TrainConfig) -> None:
        super().__init__()
        self.num_patches = cfg.num_patches
        self.decoder_embed = nn.Linear(cfg.vision_width, cfg.decoder_width)
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, cfg.decoder_width))
        self.decoder_blocks = nn.ModuleList(
            [Block(cfg.decoder_width, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_layers)]
        )
        self.decoder_norm = nn.LayerNorm(cfg.decoder_width)
        self.decoder_pred = nn.Linear(cfg.decoder_width, cfg.patch_dim)

        self.apply(init_weights)
        nn.init.normal_(self.decoder_pos_embed, std=0.02)

    def forward(self, tokens: torch.Tensor, mask: typing.Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        B x (P+1) x width -> B x P x patch_dim.
        """
        if tokens.ndim != 3 or tokens.shape[1] != self.num_patches + 1:
            raise ShapeError(f"expected B x {self.num_patches + 1} x width tokens, got {tuple(tokens.shape)}")
        if mask is not None and mask.shape != tokens.shape[:1] + (self.num_patches,):
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not match the tokens")

        x = self.decoder_embed(tokens[:, 1:]) + self.decoder_pos_embed
        for block in self.decoder_blocks:
            x, _ = block(x)
        return self.decoder_pred(self.decoder_norm(x))
