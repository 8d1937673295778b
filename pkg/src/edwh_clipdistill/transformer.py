"""
Pre-norm transformer building blocks shared by the vision encoder, the text encoder and the decoder.
"""

import typing

import torch
import torch.nn as nn
from einops import rearrange

from .exceptions import ShapeError


class Mlp(nn.Module):
    """Two-layer GELU feed-forward."""

    def __init__(self, dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    """
    Multi-head self-attention that can hand back the softmax row of the first ([CLS]) query.

    The scores are computed explicitly (no fused kernel) so the recorded row is exactly the one used.
    """

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"width {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        allowed: typing.Optional[torch.Tensor] = None,
        record: bool = False,
    ) -> tuple[torch.Tensor, typing.Optional[torch.Tensor]]:
        """
        Args:
            x: B x N x C tokens.
            allowed: optional boolean mask broadcastable to B x heads x N x N; False keys are not attended.
            record: return the [CLS] query's attention row (B x heads x N) as the second element.
        """
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.num_heads)

        scores = (q @ k.transpose(-2, -1)) * self.scale
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        attn = scores.softmax(dim=-1)

        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        cls_row = attn[:, :, 0, :] if record else None
        return self.proj(out), cls_row


class Block(nn.Module):
    """
    Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x)).

    With record set, forward also returns the [CLS] row of the attention weights (B x heads x N), else None.
    """

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(
        self,
        x: torch.Tensor,
        allowed: typing.Optional[torch.Tensor] = None,
        record: bool = False,
    ) -> tuple[torch.Tensor, typing.Optional[torch.Tensor]]:
        attended, cls_row = self.attn(self.norm1(x), allowed=allowed, record=record)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, cls_row


def init_weights(module: nn.Module) -> None:
    """
    Xavier-uniform linear layers with zero bias, unit LayerNorm; use with `module.apply(init_weights)`.
    """
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.constant_(module.bias, 0)
    elif isinstance(module, nn.LayerNorm):
        nn.init.constant_(module.bias, 0)
        nn.init.constant_(module.weight, 1.0)
