"""
Teacher maintenance: the teacher parameters θ follow the student φ as θ <- (1 - λ)·φ + λ·θ.

λ follows a cosine schedule from lambda_start (step 0) to 1.0 (last step).
"""

import dataclasses
import math
import typing

import torch
import torch.nn as nn

from .exceptions import RangeError, ShapeMismatch


def lambda_at(step: int, total_steps: int, lambda_start: float = 0.996) -> float:
    """
    λ = 1 - (1 - lambda_start) · (cos(π · step / total_steps) + 1) / 2.
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise RangeError(f"step must be in [0, {total_steps}], got {step}")
    if not 0 < lambda_start <= 1:
        raise RangeError(f"lambda_start must be in (0, 1], got {lambda_start}")
    if step == total_steps:
        return 1.0
    return 1 - (1 - lambda_start) * (math.cos(math.pi * step / total_steps) + 1) / 2


@dataclasses.dataclass
class EmaState:
    """
    Where the momentum schedule stands. Steps past total_steps keep λ at 1.0.
    """

    step: int
    total_steps: int
    lambda_start: float

    @property
    def current(self) -> float:
        return lambda_at(min(self.step, self.total_steps), self.total_steps, self.lambda_start)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, lam: float) -> None:
    """
    Element-wise convex combination over every parameter (and floating point buffer) of the teacher, in place.
    """
    if not 0 <= lam <= 1:
        raise RangeError(f"λ must be in [0, 1], got {lam}")

    teacher_state = dict(teacher.named_parameters())
    teacher_state.update(dict(teacher.named_buffers()))
    student_state = dict(student.named_parameters())
    student_state.update(dict(student.named_buffers()))

    if teacher_state.keys() != student_state.keys():
        missing = sorted(teacher_state.keys() ^ student_state.keys())
        raise ShapeMismatch(f"teacher and student differ in parameters: {missing}")

    for name, theta in teacher_state.items():
        phi = student_state[name]
        if theta.shape != phi.shape:
            raise ShapeMismatch(f"{name}: teacher {tuple(theta.shape)} vs student {tuple(phi.shape)}")
        if not theta.is_floating_point():
            continue
        if lam == 0:
            theta.copy_(phi)
        else:
            theta.mul_(lam).add_(phi, alpha=1 - lam)


def parameter_distance(teacher: nn.Module, student: nn.Module) -> float:
    """
    ‖θ - φ‖ over all parameters.
    """
    pairs: typing.Iterable[tuple[torch.Tensor, torch.Tensor]] = zip(teacher.parameters(), student.parameters())
    squared = sum(float(((theta - phi) ** 2).sum()) for theta, phi in pairs)
    return math.sqrt(squared)
