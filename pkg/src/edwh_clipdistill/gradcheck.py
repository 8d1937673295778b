# SPDX-FileCopyrightText: 2023-present Remco <remco@educationwarehouse.nl>
#
# SPDX-License-Identifier: MIT
"""
Finite-difference check of ∂l_tot/∂w for sampled student parameters, in double precision.
"""

import contextlib
import dataclasses
import typing

import torch
from tabulate import tabulate

from .config import TrainConfig
from .data import CaptionedImage, generate_corpus, make_batch
from .helpers import numpy_rng
from .model import STUDENT_COMPONENTS, ClipDistillModel, build_model
from .trainer import forward_step

GRAD_CHECK_SALT = 7919
ALWAYS_CHECKED = ("clip.logit_scale",)


@dataclasses.dataclass
class GradEntry:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def component(self) -> str:
        return self.name.split(".")[0]

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclasses.dataclass
class GradCheckReport:
    eps: float
    entries: list[GradEntry]
    # largest |∂l_tot/∂θ| over every teacher parameter; the teacher is never differentiated, so this is 0
    teacher_max_abs_grad: float

    @property
    def max_rel_error(self) -> float:
        return max((entry.rel_error for entry in self.entries), default=0.0)

    @property
    def components(self) -> set[str]:
        return {entry.component for entry in self.entries}

    def table(self) -> str:
        rows = [
            [entry.name, entry.index, entry.analytic, entry.numeric, entry.rel_error]
            for entry in sorted(self.entries, key=lambda entry: -entry.rel_error)
        ]
        body = tabulate(rows, headers=["parameter", "index", "analytic", "numeric", "rel. error"], floatfmt=".3e")
        footer = (
            f"max relative error {self.max_rel_error:.3e} (eps={self.eps:g}); "
            f"teacher grad {self.teacher_max_abs_grad}"
        )
        return f"{body}\n{footer}"


def relative_error(analytic: float, numeric: float) -> float:
    """
    |a - n| / max(|a|, |n|, 1e-6).
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def sample_parameters(model: ClipDistillModel, n_params: int, seed: int) -> list[tuple[str, int]]:
    """
    Pick `n_params` (name, flat index) pairs round-robin over the student components; τ is always included.
    """
    params = model.student_parameters()
    by_component: dict[str, list[str]] = {component: [] for component in STUDENT_COMPONENTS}
    for name in params:
        by_component[name.split(".")[0]].append(name)

    rng = numpy_rng(seed, GRAD_CHECK_SALT)
    picked = [(name, 0) for name in ALWAYS_CHECKED if name in params]
    components = [component for component in STUDENT_COMPONENTS if by_component[component]]
    while len(picked) < n_params:
        component = components[len(picked) % len(components)]
        name = by_component[component][int(rng.integers(len(by_component[component])))]
        index = int(rng.integers(params[name].numel()))
        picked.append((name, index))
    return picked[:n_params]


@contextlib.contextmanager
def teacher_requires_grad(model: ClipDistillModel) -> typing.Generator[list[torch.nn.Parameter], None, None]:
    """
    Temporarily mark the teacher parameters as differentiable, so autograd can report their (zero) gradient.
    """
    teacher = list(model.teacher_parameters().values())
    previous = [param.requires_grad for param in teacher]
    for param in teacher:
        param.requires_grad_(True)
    try:
        yield teacher
    finally:
        for param, flag in zip(teacher, previous):
            param.requires_grad_(flag)


def grad_check(
    cfg: TrainConfig,
    n_params: int = 50,
    eps: float = 1e-5,
    corpus: typing.Optional[typing.Sequence[CaptionedImage]] = None,
) -> GradCheckReport:
    """
    Compare analytic gradients of l_tot with central differences (l(w + eps) - l(w - eps)) / (2 · eps).

    Runs on the step-0 batch of `corpus` (a fresh synthetic one by default). Masks only depend on the teacher,
    so they are the same for every perturbed evaluation.
    """
    model = build_model(cfg).double()
    corpus = corpus or generate_corpus(max(cfg.batch_size, 24), cfg.seed, cfg.source_size)
    batch = make_batch(corpus, cfg, 0)

    def loss() -> torch.Tensor:
        return forward_step(model, cfg, batch, 0).losses.l_tot

    params = model.student_parameters()
    picked = sample_parameters(model, n_params, cfg.seed)

    with teacher_requires_grad(model) as teacher:
        student = list(params.values())
        grads = torch.autograd.grad(loss(), student + teacher, allow_unused=True)

    analytic = {name: grad for name, grad in zip(params, grads[: len(student)])}
    teacher_max = max(
        (float(grad.abs().max()) for grad in grads[len(student) :] if grad is not None),
        default=0.0,
    )

    entries = []
    with torch.no_grad():
        for name, index in picked:
            flat = params[name].view(-1)
            original = float(flat[index])

            flat[index] = original + eps
            plus = float(loss())
            flat[index] = original - eps
            minus = float(loss())
            flat[index] = original

            grad = analytic[name]
            value = 0.0 if grad is None else float(grad.reshape(-1)[index])
            entries.append(GradEntry(name=name, index=index, analytic=value, numeric=(plus - minus) / (2 * eps)))

    return GradCheckReport(eps=eps, entries=entries, teacher_max_abs_grad=teacher_max)
