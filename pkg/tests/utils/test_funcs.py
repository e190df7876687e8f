from __future__ import annotations

import operator
from contextlib import nullcontext as does_not_raise
from typing import Callable
from typing import List
from typing import Tuple

import pytest

from ddbounds.utils._funcs import first_zero_crossing
from ddbounds.utils._funcs import is_strictly_decreasing
from ddbounds.utils._funcs import loglog_slope
from ddbounds.utils._funcs import pairwise
from ddbounds.utils._funcs import pairwise_comparison


def test_pairwise(sample_list: List[int], sample_pairs: List[Tuple[int, int]]):
    """Tests pairwise function."""
    assert list(pairwise(sample_list)) == sample_pairs


@pytest.mark.parametrize(
    "op, expected",
    [
        (operator.lt, [True, True, True, True]),
        (operator.gt, [False, False, False, False]),
        (operator.eq, [False, False, False, False]),
    ],
)
def test_pairwise_comparison(sample_list: List[int], op: Callable[[int, int], bool], expected: List[bool]):
    """Tests pairwise_comparison function."""
    assert list(pairwise_comparison(sample_list, op)) == expected


@pytest.mark.parametrize(
    "values, expected",
    [([3.0, 2.0, 1.0], True), ([3.0, 3.0, 1.0], False), ([1.0], True), ([1.0, 2.0], False)],
)
def test_is_strictly_decreasing(values: List[float], expected: bool):
    """Tests is_strictly_decreasing on monotone and flat sequences."""
    assert is_strictly_decreasing(values) is expected


@pytest.mark.parametrize(
    "iterations, values, expected, context",
    [
        ([0, 1, 2, 3], [-2.0, -0.5, 0.1, 0.3], 2, does_not_raise()),
        ([0, 1, 2], [-1.0, -0.5, -0.1], None, does_not_raise()),
        ([0, 1, 2], [1.0, -0.5, 0.2], 2, does_not_raise()),
        ([0, 1, 2], [0.5, 0.4, 0.3], None, does_not_raise()),
        ([0, 1], [1.0], None, pytest.raises(ValueError, match="must have the same length")),
    ],
)
def test_first_zero_crossing(iterations, values, expected, context):
    """Tests the iteration at which a sequence first becomes positive."""
    with context:
        assert first_zero_crossing(iterations, values) == expected


@pytest.mark.parametrize(
    "sizes, values, expected, context",
    [
        ([1.0, 0.5, 0.25], [4.0, 2.0, 1.0], 1.0, does_not_raise()),
        ([1.0, 0.5, 0.25], [1.0, 0.25, 0.0625], 2.0, does_not_raise()),
        ([1.0], [1.0], None, pytest.raises(ValueError, match="At least two")),
        ([1.0, 0.5], [1.0, 0.0], None, pytest.raises(ValueError, match="strictly positive")),
    ],
)
def test_loglog_slope(sizes, values, expected, context):
    """Tests the least-squares convergence rate."""
    with context:
        assert loglog_slope(sizes, values) == pytest.approx(expected)
