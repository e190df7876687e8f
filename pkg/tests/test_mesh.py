from __future__ import annotations

import logging
from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from ddbounds.mesh import INTERFACE
from ddbounds.mesh import Mesh
from ddbounds.mesh import Partition
from ddbounds.mesh import build_cracked_plate
from ddbounds.mesh import build_structured_square
from ddbounds.mesh import load_mesh
from ddbounds.mesh import load_partition
from ddbounds.mesh import partition_regular
from ddbounds.mesh import partition_sectors
from ddbounds.mesh import refine_by_splitting
from ddbounds.mesh import save_mesh
from ddbounds.mesh import save_partition
from ddbounds.mesh import star_patches
from ddbounds.mesh import subdivide

_SQUARE_NODES = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
_SQUARE_ELEMENTS = np.array([[0, 1, 2], [0, 2, 3]])
_SQUARE_EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])


@pytest.mark.parametrize(
    "elements, edges, tags, context",
    [
        (_SQUARE_ELEMENTS, _SQUARE_EDGES, ("dirichlet", "free", "neumann:top", "free"), does_not_raise()),
        (
            np.array([[0, 2, 1], [0, 2, 3]]),
            _SQUARE_EDGES,
            ("dirichlet",) * 4,
            pytest.raises(ValueError, match="negatively oriented"),
        ),
        (_SQUARE_ELEMENTS, _SQUARE_EDGES[:3], ("dirichlet",) * 3, pytest.raises(ValueError, match="carry no tag")),
        (_SQUARE_ELEMENTS, _SQUARE_EDGES, ("dirichlet",) * 3, pytest.raises(ValueError, match="boundary tags")),
        (
            _SQUARE_ELEMENTS,
            _SQUARE_EDGES,
            ("dirichlet", "neumann:", "free", "free"),
            pytest.raises(ValueError, match="invalid boundary tags"),
        ),
        (
            np.array([[0, 1, 2], [0, 2, 4]]),
            _SQUARE_EDGES,
            ("free",) * 4,
            pytest.raises(ValueError, match="element node ids must lie in"),
        ),
        (
            _SQUARE_ELEMENTS,
            np.array([[0, 1], [1, 2], [2, 3], [3, 0], [0, 2]]),
            ("free",) * 5,
            pytest.raises(ValueError, match="not boundary edges of exactly one element"),
        ),
    ],
)
def test_mesh_validation(elements, edges, tags, context):
    """Tests the invariants checked at construction."""
    with context:
        mesh = Mesh(nodes=_SQUARE_NODES, elements=elements, boundary_edges=edges, boundary_tags=tags)
        assert mesh.n_nodes == 4
        assert mesh.n_dofs == 8
        assert mesh.neumann_tags == ("neumann:top",)


def test_mesh_validation_reports_all_errors():
    """Several violations are reported in a single message."""
    with pytest.raises(ValueError, match="boundary tags") as exc_info:
        Mesh(
            nodes=_SQUARE_NODES,
            elements=_SQUARE_ELEMENTS,
            boundary_edges=_SQUARE_EDGES,
            boundary_tags=("bogus",) * 3,
            region_tags={"omega": [5]},
        )
    message = str(exc_info.value)
    assert "invalid boundary tags" in message
    assert "region `omega`" in message


def test_mesh_geometry(unit_square: Mesh):
    """Tests areas, edges and boundary ownership on two triangles."""
    np.testing.assert_allclose(unit_square.areas, [0.5, 0.5])
    assert unit_square.edges.shape == (5, 2)
    assert unit_square.h == pytest.approx(np.sqrt(2.0))
    assert unit_square.dirichlet_nodes.all()

    owners, local = unit_square.boundary_owners
    for (a, b), owner, k in zip(unit_square.boundary_edges, owners, local):
        element = unit_square.elements[owner]
        assert {a, b} == {element[k], element[(k + 1) % 3]}

    shared = np.flatnonzero(unit_square.edge_elements[:, 1] >= 0)
    assert shared.size == 1


def test_edge_ids_unknown_pair(unit_square: Mesh):
    """Tests the lookup of a node pair that is not an edge."""
    with pytest.raises(ValueError, match="not edges of the mesh"):
        unit_square.edge_ids(np.array([[1, 2]]))


@pytest.mark.parametrize(
    "n, half_width, context",
    [
        (3, 1.0, does_not_raise()),
        (4, 0.5, does_not_raise()),
        (0, 1.0, pytest.raises(ValueError, match="`side_subdivisions` must be at least 1")),
        (3, 0.0, pytest.raises(ValueError, match="`half_width` must be strictly positive")),
    ],
)
def test_build_structured_square(n: int, half_width: float, context):
    """Tests the benchmark square triangulation."""
    with context:
        mesh = build_structured_square(n, half_width)
        assert mesh.n_elements == 2 * n * n
        assert mesh.n_nodes == (n + 1) ** 2
        assert mesh.areas.sum() == pytest.approx(36.0 * half_width**2)
        assert set(mesh.boundary_tags) == {"dirichlet"}


def test_square_omega_region(small_square: Mesh):
    """The region of the quantity of interest covers `[-2, 0] x [-2, -1]`."""
    omega = small_square.region_tags["omega"]
    assert omega.size == 4
    assert small_square.areas[omega].sum() == pytest.approx(2.0)


@pytest.mark.parametrize(
    "cells_per_unit, context",
    [
        (4, does_not_raise()),
        (3, pytest.raises(ValueError, match="multiple of 4")),
        (0, pytest.raises(ValueError, match="multiple of 4")),
    ],
)
def test_build_cracked_plate(cells_per_unit: int, context):
    """Tests the plate with holes and a slit."""
    with context:
        mesh = build_cracked_plate(cells_per_unit)
        assert set(mesh.boundary_tags) == {"dirichlet", "free", "neumann:pull"}
        assert mesh.region_tags["omega"].size > 0
        assert mesh.areas.sum() < 16.0


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_subdivide(plain_square: Mesh, r: int):
    """Uniform subdivision keeps the geometry, the tags and the coarse vertex ids."""
    refinement = subdivide(plain_square, r)
    fine = refinement.fine

    assert fine.n_elements == plain_square.n_elements * r * r
    assert fine.areas.sum() == pytest.approx(plain_square.areas.sum())
    np.testing.assert_allclose(fine.areas, np.repeat(plain_square.areas / r**2, r * r))
    np.testing.assert_allclose(fine.nodes[: plain_square.n_nodes], plain_square.nodes)
    assert fine.boundary_edges.shape[0] == plain_square.boundary_edges.shape[0] * r
    assert np.array_equal(refinement.parent, np.repeat(np.arange(plain_square.n_elements), r * r))
    assert np.array_equal(refinement.children(np.array([1])), np.arange(r * r, 2 * r * r))


def test_subdivide_prolongation_reproduces_linear_fields(plain_square: Mesh):
    """Nodal interpolation of a linear field is exact on the refined mesh."""
    refinement = subdivide(plain_square, 3)
    coarse = 2.0 * plain_square.nodes[:, 0] - plain_square.nodes[:, 1] + 1.0
    fine = 2.0 * refinement.fine.nodes[:, 0] - refinement.fine.nodes[:, 1] + 1.0
    np.testing.assert_allclose(refinement.prolongation @ coarse, fine)
    np.testing.assert_allclose(np.asarray(refinement.prolongation.sum(axis=1)).ravel(), 1.0)

    dofs = np.column_stack([coarse, -coarse]).ravel()
    np.testing.assert_allclose(refinement.prolong(dofs), np.column_stack([fine, -fine]).ravel())


def test_subdivide_boundary_parent(small_square: Mesh):
    """Every fine boundary edge lies on its parent coarse boundary edge."""
    refinement = subdivide(small_square, 4)
    coarse, fine = refinement.coarse, refinement.fine
    parents = coarse.boundary_edges[refinement.boundary_parent]
    a, b = coarse.nodes[parents[:, 0]], coarse.nodes[parents[:, 1]]
    for column in range(2):
        p = fine.nodes[fine.boundary_edges[:, column]]
        cross = (b - a)[:, 0] * (p - a)[:, 1] - (b - a)[:, 1] * (p - a)[:, 0]
        np.testing.assert_allclose(cross, 0.0, atol=1e-12)
    assert fine.region_tags["omega"].size == 16 * small_square.region_tags["omega"].size


def test_subdivide_invalid_factor(unit_square: Mesh):
    """Tests the validation of the subdivision factor."""
    with pytest.raises(ValueError, match="`r` must be a positive integer"):
        subdivide(unit_square, 0)


def test_refine_by_splitting(unit_square: Mesh):
    """Midpoint splitting makes four children per element."""
    refinement = refine_by_splitting(unit_square)
    assert refinement.factor == 2
    assert refinement.fine.n_elements == 8
    assert refinement.fine.n_nodes == 9


def test_partition_regular(small_square: Mesh):
    """A 3x3 grid of boxes on the 6x6 square gives nine subdomains of eight elements."""
    partition = partition_regular(small_square, (3, 3))
    assert partition.n_subdomains == 9
    assert np.array_equal(np.bincount(partition.subdomain_of), np.full(9, 8))
    assert partition.interface_nodes.size == 24
    np.testing.assert_array_equal(partition.elements_of(0), np.flatnonzero(partition.subdomain_of == 0))


def test_partition_single_box(small_square: Mesh):
    """One box means no interface."""
    partition = partition_regular(small_square, (1, 1))
    assert partition.n_subdomains == 1
    assert partition.interface_nodes.size == 0


def test_partition_regular_reattaches_hinged_pieces(caplog):
    """Boxes cutting through cells leave no subdomain whose pieces touch only at a vertex."""
    mesh = build_structured_square(8)
    with caplog.at_level(logging.INFO, logger="ddbounds.mesh"):
        partition = partition_regular(mesh, (3, 3))
    assert partition.n_subdomains == 9
    assert "hinged" in caplog.text

    pairs = mesh.edge_elements
    inner = pairs[pairs[:, 1] >= 0]
    owner = partition.subdomain_of
    inside = inner[owner[inner[:, 0]] == owner[inner[:, 1]]]
    m = mesh.n_elements
    graph = sparse.csr_matrix((np.ones(len(inside)), (inside[:, 0], inside[:, 1])), shape=(m, m))
    n_components, _ = connected_components(graph, directed=False)
    assert n_components == partition.n_subdomains


@pytest.mark.parametrize(
    "assignment, context",
    [
        ([0, 1], does_not_raise()),
        ([0, 2], pytest.raises(ValueError, match="dense")),
        ([0], pytest.raises(ValueError, match="one entry per element")),
        ([-1, 0], pytest.raises(ValueError, match="dense")),
    ],
)
def test_partition_from_assignment(unit_square: Mesh, assignment, context):
    """Tests the validation of explicit element assignments."""
    with context:
        partition = Partition.from_assignment(unit_square, assignment)
        assert partition.n_subdomains == 2
        np.testing.assert_array_equal(partition.interface_nodes, [0, 3])


def test_partition_refine(small_square: Mesh):
    """Children stay in the subdomain of their parent."""
    partition = partition_regular(small_square, (2, 2))
    refinement = refine_by_splitting(small_square)
    fine = partition.refine(refinement)
    assert fine.n_subdomains == partition.n_subdomains
    np.testing.assert_array_equal(fine.subdomain_of, np.repeat(partition.subdomain_of, 4))


def test_partition_sectors(small_square: Mesh):
    """Sectors cover every element."""
    partition = partition_sectors(small_square, 3)
    assert partition.n_subdomains == 3
    assert partition.subdomain_of.size == small_square.n_elements


def test_restrict_tags_new_boundary_as_interface(small_square: Mesh):
    """Restricting to one subdomain tags the cut edges `interface`."""
    partition = partition_regular(small_square, (3, 3))
    sub, local_to_global = small_square.restrict(partition.elements_of(4))

    assert sub.n_elements == 8
    assert set(sub.boundary_tags) == {INTERFACE}
    np.testing.assert_allclose(sub.nodes, small_square.nodes[local_to_global])

    corner, _ = small_square.restrict(partition.elements_of(0))
    assert set(corner.boundary_tags) == {INTERFACE, "dirichlet"}
    assert corner.region_tags["omega"].size == 2


def test_restrict_node_order(unit_square: Mesh):
    """Tests that `node_order` must be a permutation of the used nodes."""
    with pytest.raises(ValueError, match="`node_order` must be a permutation"):
        unit_square.restrict(np.array([0]), node_order=np.array([0, 1, 3]))


def test_star_patches(small_square: Mesh, patch_refinement: int):
    """One patch per vertex; an interior vertex of the grid has six triangles around it."""
    patches = star_patches(small_square, patch_refinement)
    assert len(patches) == small_square.n_nodes

    center = patches[24]
    np.testing.assert_allclose(small_square.nodes[center.center], [0.0, 0.0])
    assert center.elements.size == 6
    assert center.area == pytest.approx(3.0)
    assert center.children.size == 6 * patch_refinement**2
    np.testing.assert_array_equal(small_square.elements[center.elements, center.local_index], 24)

    total = sum(p.area for p in patches)
    assert total == pytest.approx(3.0 * small_square.areas.sum())


def test_save_and_load(tmp_path, small_square: Mesh):
    """Meshes and partitions survive a trip through JSON files."""
    partition = partition_regular(small_square, (2, 3))
    save_mesh(small_square, tmp_path / "mesh.json")
    save_partition(partition, tmp_path / "partition.json")

    mesh = load_mesh(tmp_path / "mesh.json")
    loaded = load_partition(mesh, tmp_path / "partition.json")

    np.testing.assert_allclose(mesh.nodes, small_square.nodes)
    assert mesh.boundary_tags == small_square.boundary_tags
    np.testing.assert_array_equal(mesh.region_tags["omega"], small_square.region_tags["omega"])
    np.testing.assert_array_equal(loaded.subdomain_of, partition.subdomain_of)
