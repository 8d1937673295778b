import math

import pytest
import torch

from src.edwh_clipdistill.exceptions import RangeError, ShapeError
from src.edwh_clipdistill.masking import attention_values, build_mask, empty_mask, random_mask, select_mask


def brute_force_attention_values(record: torch.Tensor) -> list[list[float]]:
    batch, layers, heads, tokens = record.shape
    result = []
    for b in range(batch):
        row = []
        for patch in range(1, tokens):
            total = 0.0
            for layer in range(layers):
                for head in range(heads):
                    total += float(record[b, layer, head, patch])
            row.append(total / (layers * heads))
        result.append(row)
    return result


def full_sort_mask(values: list[float], ratio: float) -> set[int]:
    count = math.ceil(round(ratio * len(values), 9))
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    return set(order[:count])


def random_record(generator: torch.Generator, batch: int = 2, layers: int = 3, heads: int = 2, patches: int = 9):
    scores = torch.randn(batch, layers, heads, patches + 1, generator=generator, dtype=torch.float64)
    return scores.softmax(dim=-1)


def test_attention_values_match_brute_force():
    generator = torch.Generator().manual_seed(0)
    for _ in range(100):
        record = random_record(generator)
        summary = attention_values(record)

        expected = torch.tensor(brute_force_attention_values(record), dtype=torch.float64)
        assert torch.allclose(summary, expected, rtol=1e-6, atol=0)


def test_attention_values_leave_out_cls():
    record = random_record(torch.Generator().manual_seed(1))
    summary = attention_values(record)

    cls_share = record[..., 0].mean(dim=(1, 2))
    assert torch.allclose(summary.sum(dim=1) + cls_share, torch.ones(2, dtype=torch.float64))

    with pytest.raises(ShapeError):
        attention_values(record[0])


def test_attention_values_are_linear():
    generator = torch.Generator().manual_seed(2)
    records = [random_record(generator) for _ in range(4)]

    of_mean = attention_values(torch.stack(records).mean(dim=0))
    mean_of = torch.stack([attention_values(record) for record in records]).mean(dim=0)
    assert torch.allclose(of_mean, mean_of, rtol=1e-12, atol=1e-15)


def test_select_mask_matches_full_sort():
    generator = torch.Generator().manual_seed(2)
    for instance in range(100):
        if instance % 2:
            # few distinct values: plenty of ties
            summary = torch.randint(0, 3, (3, 16), generator=generator).double()
        else:
            summary = torch.rand(3, 16, generator=generator, dtype=torch.float64)

        mask = select_mask(summary, 0.5)

        for row in range(3):
            expected = full_sort_mask(summary[row].tolist(), 0.5)
            assert set(torch.nonzero(mask[row]).flatten().tolist()) == expected


@pytest.mark.parametrize("num_patches", [4, 7, 16, 49, 64, 196])
def test_select_mask_cardinality(num_patches):
    summary = torch.rand(4, num_patches, generator=torch.Generator().manual_seed(num_patches))

    mask = select_mask(summary, 0.5)

    assert mask.dtype == torch.bool
    assert mask.sum(dim=1).tolist() == [math.ceil(0.5 * num_patches)] * 4


def test_select_mask_ties_by_index():
    mask = select_mask(torch.full((1, 10), 0.1), 0.5)

    assert mask[0].tolist() == [True] * 5 + [False] * 5


def test_select_mask_is_invariant_under_monotone_maps():
    generator = torch.Generator().manual_seed(3)
    for _ in range(100):
        # distinct values, at least 1/P apart
        summary = (torch.randperm(16, generator=generator).double() / 16)[None]
        a, b, c = (torch.rand(3, generator=generator, dtype=torch.float64) + 0.1).tolist()

        transformed = a * summary**3 + b * summary + c

        assert torch.equal(select_mask(summary, 0.5), select_mask(transformed, 0.5))


def test_select_mask_validates():
    with pytest.raises(RangeError):
        select_mask(torch.rand(1, 8), 0.0)

    with pytest.raises(ShapeError):
        select_mask(torch.rand(8), 0.5)


def test_random_mask():
    first = random_mask(3, 16, 0.5, torch.Generator().manual_seed(4))
    again = random_mask(3, 16, 0.5, torch.Generator().manual_seed(4))

    assert torch.equal(first, again)
    assert first.sum(dim=1).tolist() == [8, 8, 8]


def test_build_mask_strategies():
    record = random_record(torch.Generator().manual_seed(5), patches=16)

    attention = build_mask("attention", record, 0.5, 2, 16)
    assert torch.equal(attention, select_mask(attention_values(record), 0.5))

    assert torch.equal(build_mask("none", None, 0.5, 2, 16), empty_mask(2, 16))
    assert build_mask("random", None, 0.5, 2, 16, torch.Generator().manual_seed(0)).sum() == 16

    with pytest.raises(ShapeError):
        build_mask("attention", None, 0.5, 2, 16)

    with pytest.raises(RangeError):
        build_mask("checkerboard", record, 0.5, 2, 16)
