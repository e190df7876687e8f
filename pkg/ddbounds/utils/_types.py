from __future__ import annotations

import sys
from typing import Literal
from typing import Protocol

import numpy as np

if sys.version_info >= (3, 10):
    from typing import TypeAlias  # pragma: no cover
else:
    from typing_extensions import TypeAlias  # pragma: no cover

if sys.version_info >= (3, 11):
    from typing import Self  # pragma: no cover
else:
    from typing_extensions import Self  # pragma: no cover

Hypothesis: TypeAlias = Literal["plane_strain", "plane_stress"]
Approach: TypeAlias = Literal["primal_bdd", "dual_feti"]
StopKind: TypeAlias = Literal["tolerance", "envelope", "discr_tenth"]
ExtractorKind: TypeAlias = Literal["mean_sxx"]
RefinementRule: TypeAlias = Literal["global_split"]
RunStatus: TypeAlias = Literal["met", "budget_exhausted", "completed"]


class VectorFunction(Protocol):
    """VectorFunction protocol for type hinting purposes.

    A callable evaluated pointwise on coordinate arrays `x` and `y` of identical shape, returning an array of shape
    `(2, *x.shape)` (or anything broadcastable to it).
    """

    def __call__(self: Self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


class ScalarFunction(Protocol):
    """ScalarFunction protocol for type hinting purposes.

    A callable evaluated pointwise on coordinate arrays `x` and `y`, returning an array broadcastable to `x.shape`.
    """

    def __call__(self: Self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


class BlockOperator(Protocol):
    """BlockOperator protocol for type hinting purposes.

    A linear map applied column-wise to a two dimensional block of vectors of shape `(n, k)`.
    """

    def __call__(self: Self, block: np.ndarray) -> np.ndarray: ...
