import math

import pytest
import torch
import torch.nn as nn

from src.edwh_clipdistill.ema import EmaState, ema_update, lambda_at, parameter_distance
from src.edwh_clipdistill.exceptions import RangeError, ShapeMismatch


def _filled(value: float, dtype=torch.float32) -> nn.Linear:
    layer = nn.Linear(3, 2).to(dtype)
    with torch.no_grad():
        for param in layer.parameters():
            param.fill_(value)
    return layer


def test_lambda_schedule_endpoints():
    assert lambda_at(0, 1000) == pytest.approx(0.996, abs=1e-12)
    assert lambda_at(500, 1000) == pytest.approx(0.998, abs=1e-12)
    assert lambda_at(1000, 1000) == 1.0


def test_lambda_schedule_is_monotone():
    values = [lambda_at(step, 1000) for step in range(1001)]

    assert all(a <= b for a, b in zip(values, values[1:]))
    assert all(0.996 - 1e-12 <= value <= 1.0 for value in values)


def test_lambda_schedule_validates():
    with pytest.raises(RangeError):
        lambda_at(1001, 1000)

    with pytest.raises(RangeError):
        lambda_at(-1, 1000)

    with pytest.raises(RangeError):
        lambda_at(0, 0)

    with pytest.raises(RangeError):
        lambda_at(0, 10, lambda_start=0.0)


def test_ema_state():
    state = EmaState(step=0, total_steps=10, lambda_start=0.99)
    assert state.current == pytest.approx(0.99)

    state.step = 25
    # past the schedule
    assert state.current == 1.0


def test_ema_update_extremes():
    teacher, student = _filled(0.0), _filled(1.0)

    ema_update(teacher, student, 1.0)
    assert all(torch.equal(p, torch.zeros_like(p)) for p in teacher.parameters())

    ema_update(teacher, student, 0.996)
    assert all(torch.allclose(p, torch.full_like(p, 0.004)) for p in teacher.parameters())

    ema_update(teacher, student, 0.0)
    assert all(torch.equal(p, torch.ones_like(p)) for p in teacher.parameters())
    # the student is never touched
    assert all(torch.equal(p, torch.ones_like(p)) for p in student.parameters())


def test_ema_update_contracts_towards_student():
    torch.manual_seed(0)
    teacher, student = nn.Linear(4, 4).double(), nn.Linear(4, 4).double()
    start = parameter_distance(teacher, student)

    product = 1.0
    for step in range(20):
        lam = lambda_at(step, 20, lambda_start=0.9)
        ema_update(teacher, student, lam)
        product *= lam

    assert parameter_distance(teacher, student) == pytest.approx(product * start, rel=1e-9)
    assert math.isfinite(product) and product < 1


def test_ema_update_validates():
    with pytest.raises(RangeError):
        ema_update(_filled(0.0), _filled(1.0), 1.5)

    with pytest.raises(ShapeMismatch):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 4), 0.5)

    with pytest.raises(ShapeMismatch):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 2, bias=False), 0.5)
