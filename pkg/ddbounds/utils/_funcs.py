from __future__ import annotations

import operator
from itertools import tee
from typing import Callable
from typing import Iterable
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import TypeVar

import numpy as np

T = TypeVar("T")


def pairwise(iterable: Iterable[T]) -> Iterable[Tuple[T, T]]:
    """Returns an iterator that yields pairs of consecutive elements from the given iterable.

    s -> (s0, s1), (s1, s2), (s2, s3), ...
    """
    a, b = tee(iterable)
    next(b, None)
    return zip(a, b)


def pairwise_comparison(iterable: Iterable[T], comparison_op: Callable[[T, T], bool]) -> Iterable[bool]:
    """Apply pairwise comparison on consecutive elements.

    s -> (s0, s1), (s1, s2), ... -> comparison_op(s0, s1), comparison_op(s1, s2), ...

    Arguments:
        iterable: The iterable to iterate over.
        comparison_op: The comparison operator to apply to the pairs of consecutive elements.

    Returns:
        An iterator that yields the result of applying the given comparison operator.
    """
    return (comparison_op(a, b) for a, b in pairwise(iterable))


def is_strictly_decreasing(values: Iterable[float]) -> bool:
    """Whether every element is strictly smaller than its predecessor."""
    return all(pairwise_comparison(values, operator.gt))


def first_zero_crossing(iterations: Sequence[int], values: Sequence[float]) -> Optional[int]:
    """Returns the first iteration at which `values` becomes strictly positive after being non-positive.

    Used on the separated lower bound, whose sign change tells when the algebraic error falls below the discretization
    error.

    Arguments:
        iterations: Iteration indices, same length as `values`.
        values: Observed values.

    Returns:
        The iteration of the first crossing, or `None` if the sequence never crosses zero from below.

    Examples:
        ```python
        from ddbounds.utils._funcs import first_zero_crossing

        first_zero_crossing([0, 1, 2, 3], [-2.0, -0.5, 0.1, 0.3])  # 2
        ```
    """
    if len(iterations) != len(values):
        msg = f"`iterations` and `values` must have the same length. Found {len(iterations)} and {len(values)}"
        raise ValueError(msg)

    for it, (prev, curr) in zip(iterations[1:], pairwise(values)):
        if prev <= 0.0 < curr:
            return it
    return None


def loglog_slope(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of `log(values)` against `log(sizes)`.

    Raises:
        ValueError: If fewer than two points are given or any entry is not strictly positive.
    """
    h = np.asarray(sizes, dtype=float)
    v = np.asarray(values, dtype=float)
    if h.size < 2 or h.size != v.size:  # noqa: PLR2004
        msg = "At least two (size, value) pairs of equal length are required."
        raise ValueError(msg)
    if np.any(h <= 0) or np.any(v <= 0):
        msg = "Sizes and values must be strictly positive for a log-log fit."
        raise ValueError(msg)
    slope, _ = np.polyfit(np.log(h), np.log(v), 1)
    return float(slope)
