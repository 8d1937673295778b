"""
Text encoder e: causal transformer over the closed vocabulary, pooled at the <eos> position.
"""

import torch
import torch.nn as nn

from .config import TrainConfig
from .data import PAD_ID
from .exceptions import LengthError, VocabularyError
from .transformer import Block, init_weights


class TextEncoder(nn.Module):
    """
    Causal transformer over token ids. A caption is represented by its final-normed token at the EOT position,
    projected to clip_embed_dim.
    """

    def __init__(self, cfg: TrainConfig) -> None:
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.context_length = cfg.context_length

        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.context_length, cfg.text_width))
        self.blocks = nn.ModuleList(
            [Block(cfg.text_width, cfg.text_heads, cfg.mlp_ratio) for _ in range(cfg.text_layers)]
        )
        self.ln_final = nn.LayerNorm(cfg.text_width)
        self.text_projection = nn.Linear(cfg.text_width, cfg.clip_embed_dim, bias=False)

        self.apply(init_weights)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)

        causal = torch.ones(cfg.context_length, cfg.context_length, dtype=torch.bool).tril()
        self.register_buffer("causal", causal, persistent=False)

    def forward(self, tokens: torch.Tensor, eot_index: torch.Tensor) -> torch.Tensor:
        """
        B x context_length token ids + B eos positions -> B x clip_embed_dim.
        """
        if tokens.ndim != 2 or tokens.shape[1] != self.context_length:
            raise LengthError(f"expected B x {self.context_length} tokens, got {tuple(tokens.shape)}")
        if bool((tokens < 0).any()) or bool((tokens >= self.vocab_size).any()):
            raise VocabularyError(f"token ids must be in [0, {self.vocab_size})")
        if bool((eot_index < 0).any()) or bool((eot_index >= self.context_length).any()):
            raise LengthError("eot_index outside of the context")

        # causal, and <pad> keys are never attended
        allowed = self.causal[None, None] & (tokens != PAD_ID)[:, None, None, :]

        x = self.token_embedding(tokens) + self.positional_embedding
        for block in self.blocks:
            x, _ = block(x, allowed=allowed)
        x = self.ln_final(x)

        pooled = x[torch.arange(x.shape[0]), eot_index]
        return self.text_projection(pooled)
