from __future__ import annotations

from typing import List
from typing import Tuple

import numpy as np
import pytest

from ddbounds.driver import BenchmarkProblem
from ddbounds.driver import square_benchmark
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.fem import default_material
from ddbounds.mesh import Mesh
from ddbounds.mesh import build_structured_rectangle
from ddbounds.mesh import build_structured_square


@pytest.fixture()
def sample_list() -> List[int]:
    """Returns a sample list."""
    return [1, 2, 3, 4, 5]


@pytest.fixture()
def sample_pairs() -> List[Tuple[int, int]]:
    """Returns a sample list of pairs."""
    return [(1, 2), (2, 3), (3, 4), (4, 5)]


@pytest.fixture()
def material() -> Material:
    """Plane strain, E = 1, nu = 0.3."""
    return default_material()


@pytest.fixture()
def unit_square() -> Mesh:
    """Two triangles covering the unit square, clamped on every edge."""
    return build_structured_rectangle(1, 1, (0.0, 1.0, 0.0, 1.0))


@pytest.fixture()
def small_square() -> Mesh:
    """The benchmark square `[-3, 3]^2` on a 6x6 grid, with the `omega` region."""
    return square_benchmark(6).mesh


@pytest.fixture()
def cantilever() -> Mesh:
    """A 4x2 strip `[0, 2] x [0, 1]`, clamped on the left and pulled on the right."""

    def _tags(mx: np.ndarray, my: np.ndarray) -> List[str]:  # noqa: ARG001
        return ["dirichlet" if x < 1e-9 else "neumann:pull" if x > 2.0 - 1e-9 else "free" for x in mx]

    return build_structured_rectangle(4, 2, (0.0, 2.0, 0.0, 1.0), boundary_tag=_tags)


@pytest.fixture()
def pull_loads() -> LoadSet:
    """Unit horizontal traction on `neumann:pull`."""

    def _pull(x: np.ndarray, y: np.ndarray) -> np.ndarray:  # noqa: ARG001
        return np.stack([np.ones_like(x), np.zeros_like(x)])

    return LoadSet(tractions={"neumann:pull": _pull})


@pytest.fixture()
def square_problem() -> BenchmarkProblem:
    """The analytic square benchmark on a 6x6 grid."""
    return square_benchmark(6)


@pytest.fixture(params=[2, 3])
def patch_refinement(request) -> int:
    """Fixture for setting the star patch subdivision factor."""
    return request.param


@pytest.fixture()
def plain_square() -> Mesh:
    """The benchmark square without regions on a 3x3 grid."""
    return build_structured_square(3)
