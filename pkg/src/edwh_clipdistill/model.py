"""
The complete set of trainable (student) and EMA (teacher) modules.

Only the vision encoder g and the distillation head h have a teacher copy; the text encoder, the CLIP projection
and the decoder exist once.
"""

import copy

import torch
import torch.nn as nn

from .config import TrainConfig
from .heads import ClipProjection, Decoder, DistillHead
from .text import TextEncoder
from .vision import VisionEncoder

STUDENT_COMPONENTS = ("visual", "dist_head", "text", "clip", "decoder")
TEACHER_COMPONENTS = ("teacher_visual", "teacher_head")


class ClipDistillModel(nn.Module):
    """Student modules, their teacher copies and the teacher center."""

    def __init__(self, cfg: TrainConfig) -> None:
        super().__init__()
        self.visual = VisionEncoder(cfg)
        self.dist_head = DistillHead(cfg.vision_width, cfg.head_hidden_dim, cfg.head_bottleneck_dim, cfg.head_out_dim)
        self.text = TextEncoder(cfg)
        self.clip = ClipProjection(cfg)
        self.decoder = Decoder(cfg)

        # θ₀ = φ₀
        self.teacher_visual = copy.deepcopy(self.visual).requires_grad_(False)
        self.teacher_head = copy.deepcopy(self.dist_head).requires_grad_(False)

        self.register_buffer("center", torch.zeros(cfg.head_out_dim))

    def student_parameters(self) -> dict[str, nn.Parameter]:
        """
        Trainable parameters by qualified name.
        """
        return {
            name: param
            for name, param in self.named_parameters()
            if param.requires_grad and name.split(".")[0] in STUDENT_COMPONENTS
        }

    def teacher_parameters(self) -> dict[str, nn.Parameter]:
        return {name: param for name, param in self.named_parameters() if name.split(".")[0] in TEACHER_COMPONENTS}


def build_model(cfg: TrainConfig) -> ClipDistillModel:
    """
    Initialise a model from cfg.seed without touching the global torch RNG.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return ClipDistillModel(cfg)


def parameter_count(module: nn.Module) -> int:
    """Number of scalar parameters, frozen ones included."""
    return sum(param.numel() for param in module.parameters())
