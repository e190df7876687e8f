from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from dataclasses import field
from functools import cached_property
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

DIRICHLET = "dirichlet"
FREE = "free"
INTERFACE = "interface"
NEUMANN_PREFIX = "neumann:"

_LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])

TagRule = Union[str, Callable[[np.ndarray, np.ndarray], Sequence[str]]]
CellRule = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _is_valid_tag(tag: str) -> bool:
    return tag in (DIRICHLET, FREE, INTERFACE) or (tag.startswith(NEUMANN_PREFIX) and len(tag) > len(NEUMANN_PREFIX))


def _unique_edges(elements: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique sorted edges, the edge id of each local element edge and the number of incident elements."""
    local = elements[:, _LOCAL_EDGES].reshape(-1, 2)
    edges, inverse, counts = np.unique(np.sort(local, axis=1), axis=0, return_inverse=True, return_counts=True)
    return edges, inverse.reshape(elements.shape[0], 3), counts


def _free_edges(elements: np.ndarray) -> np.ndarray:
    """Edges with a single incident element, oriented as in that element."""
    edges, element_edges, counts = _unique_edges(elements)
    local = elements[:, _LOCAL_EDGES]
    mask = counts[element_edges] == 1
    return local[mask]


@dataclass(frozen=True, eq=False)
class Mesh:
    """A conforming two dimensional triangulation with tagged boundary edges.

    Node ids are dense from 0; dofs are interleaved, node `i` owning dofs `2 i` (x) and `2 i + 1` (y).

    Arguments:
        nodes: Node coordinates, shape `(n, 2)`.
        elements: Triangles as node id triples with positive orientation, shape `(m, 3)`.
        boundary_edges: Boundary node pairs, shape `(k, 2)`.
        boundary_tags: One tag per boundary edge: `"dirichlet"`, `"free"`, `"interface"` (internal boundaries created
            by substructuring) or `"neumann:<name>"`.
        region_tags: Optional map from a label to the element ids it covers.

    Raises:
        ValueError: If any of the invariants (shapes, dense ids, positive areas, conformity, complete and valid
            boundary tagging, region ids) is violated. All violations are reported together.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: Tuple[str, ...]
    region_tags: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self: Self) -> None:
        """Post init used to normalize the arrays and validate the `Mesh` invariants."""
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "elements", np.ascontiguousarray(self.elements, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_tags", tuple(self.boundary_tags))
        object.__setattr__(
            self, "region_tags", {k: np.asarray(v, dtype=np.int64).reshape(-1) for k, v in self.region_tags.items()}
        )

        errors: List[str] = []
        n, m = self.nodes.shape[0], self.elements.shape[0]

        if m == 0:
            errors.append("mesh has no elements")
        elif self.elements.min() < 0 or self.elements.max() >= n:
            errors.append(f"element node ids must lie in [0, {n})")
        elif np.unique(self.elements).size != n:
            errors.append("node ids are not dense: some nodes are not used by any element")

        if len(self.boundary_tags) != self.boundary_edges.shape[0]:
            errors.append(
                f"{self.boundary_edges.shape[0]} boundary edges but {len(self.boundary_tags)} boundary tags"
            )
        bad_tags = sorted({t for t in self.boundary_tags if not _is_valid_tag(t)})
        if bad_tags:
            errors.append(f"invalid boundary tags {bad_tags}")

        for label, ids in self.region_tags.items():
            if ids.size and (ids.min() < 0 or ids.max() >= m):
                errors.append(f"region `{label}` references element ids outside [0, {m})")

        if not errors:
            errors.extend(self._geometric_errors())

        if errors:
            msg = "Invalid mesh:\n" + "\n".join(errors)
            raise ValueError(msg)

    def _geometric_errors(self: Self) -> List[str]:
        errors: List[str] = []
        scale = max(float(np.ptp(self.nodes, axis=0).max()), 1e-300) ** 2
        if np.any(self.areas <= 1e-12 * scale):
            bad = np.flatnonzero(self.areas <= 1e-12 * scale)
            errors.append(f"degenerate or negatively oriented elements {bad[:10].tolist()}")

        counts = self._edge_counts
        if np.any(counts > 2):  # noqa: PLR2004
            errors.append("non-conforming mesh: some edges are shared by more than two elements")

        free = np.sort(self.edges[counts == 1], axis=1)
        tagged = np.sort(self.boundary_edges, axis=1)
        free_keys = set(map(tuple, free.tolist()))
        tagged_list = list(map(tuple, tagged.tolist()))
        tagged_keys = set(tagged_list)
        if len(tagged_keys) != len(tagged_list):
            errors.append("some boundary edges are tagged more than once")
        if tagged_keys - free_keys:
            errors.append(f"{len(tagged_keys - free_keys)} tagged edges are not boundary edges of exactly one element")
        if free_keys - tagged_keys:
            errors.append(f"{len(free_keys - tagged_keys)} boundary edges carry no tag")
        return errors

    @cached_property
    def _edge_structure(self: Self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _unique_edges(self.elements)

    @property
    def edges(self: Self) -> np.ndarray:
        """Unique edges as sorted node pairs, shape `(E, 2)`."""
        return self._edge_structure[0]

    @property
    def element_edges(self: Self) -> np.ndarray:
        """Edge id of the local edges `(a, b), (b, c), (c, a)` of each element, shape `(m, 3)`."""
        return self._edge_structure[1]

    @property
    def _edge_counts(self: Self) -> np.ndarray:
        return self._edge_structure[2]

    @cached_property
    def edge_elements(self: Self) -> np.ndarray:
        """The (one or two) elements incident to each edge, shape `(E, 2)`, with -1 marking a missing neighbour."""
        element_edges = self.element_edges.ravel()
        owner = np.repeat(np.arange(self.n_elements), 3)
        order = np.argsort(element_edges, kind="stable")
        starts = np.searchsorted(element_edges[order], np.arange(self.edges.shape[0]))
        out = np.full((self.edges.shape[0], 2), -1, dtype=np.int64)
        out[:, 0] = owner[order[starts]]
        shared = np.flatnonzero(self._edge_counts == 2)  # noqa: PLR2004
        out[shared, 1] = owner[order[starts[shared] + 1]]
        return out

    def edge_ids(self: Self, pairs: np.ndarray) -> np.ndarray:
        """Edge ids of the given node pairs (any orientation).

        Raises:
            ValueError: If a pair is not an edge of the mesh.
        """
        pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        keys = self.edges[:, 0] * self.n_nodes + self.edges[:, 1]
        query = pairs[:, 0] * self.n_nodes + pairs[:, 1]
        idx = np.searchsorted(keys, query)
        idx = np.clip(idx, 0, keys.size - 1)
        if not np.array_equal(keys[idx], query):
            msg = "Some node pairs are not edges of the mesh."
            raise ValueError(msg)
        return idx

    @cached_property
    def boundary_owners(self: Self) -> Tuple[np.ndarray, np.ndarray]:
        """For each boundary edge, the owning element and the local edge index (0, 1 or 2) inside it."""
        ids = self.edge_ids(self.boundary_edges)
        owners = self.edge_elements[ids, 0]
        local = np.argmax(self.element_edges[owners] == ids[:, None], axis=1)
        return owners, local

    @property
    def n_nodes(self: Self) -> int:
        """Number of nodes."""
        return int(self.nodes.shape[0])

    @property
    def n_elements(self: Self) -> int:
        """Number of elements."""
        return int(self.elements.shape[0])

    @property
    def n_dofs(self: Self) -> int:
        """Number of displacement dofs (two per node)."""
        return 2 * self.n_nodes

    @cached_property
    def areas(self: Self) -> np.ndarray:
        """Signed element areas."""
        x = self.nodes[self.elements]
        e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def centroids(self: Self) -> np.ndarray:
        """Element centroids, shape `(m, 2)`."""
        return self.nodes[self.elements].mean(axis=1)

    @property
    def h(self: Self) -> float:
        """Largest edge length."""
        e = self.nodes[self.edges[:, 1]] - self.nodes[self.edges[:, 0]]
        return float(np.sqrt((e**2).sum(axis=1)).max())

    def tagged_nodes(self: Self, tag: str) -> np.ndarray:
        """Boolean node mask of the nodes lying on boundary edges with the given tag."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        selected = np.array([t == tag for t in self.boundary_tags], dtype=bool)
        mask[self.boundary_edges[selected].ravel()] = True
        return mask

    @cached_property
    def dirichlet_nodes(self: Self) -> np.ndarray:
        """Boolean node mask of the nodes on `"dirichlet"` edges."""
        return self.tagged_nodes(DIRICHLET)

    @property
    def neumann_tags(self: Self) -> Tuple[str, ...]:
        """Sorted distinct `"neumann:<name>"` tags present on the boundary."""
        return tuple(sorted({t for t in self.boundary_tags if t.startswith(NEUMANN_PREFIX)}))

    def vertex_incidence(self: Self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Node to element incidence in compressed form.

        Returns:
            Tuple `(indptr, element_ids, local_index)`: the elements sharing node `i` are
            `element_ids[indptr[i]:indptr[i + 1]]` (sorted), and `local_index` gives the position of node `i` inside
            each of them.
        """
        flat = self.elements.ravel()
        order = np.argsort(flat, kind="stable")
        indptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=self.n_nodes))])
        return indptr, order // 3, order % 3

    def restrict(
        self: Self, element_ids: np.ndarray, node_order: Optional[np.ndarray] = None
    ) -> Tuple[Mesh, np.ndarray]:
        """Extracts the sub-mesh made of the given elements.

        Boundary edges of the original mesh keep their tags, new boundary edges are tagged `"interface"` and region
        tags are restricted (labels are kept even when empty).

        Arguments:
            element_ids: Elements of the sub-mesh.
            node_order: Optional ordering of the global node ids of the sub-mesh; defaults to sorted ids.

        Returns:
            The sub-mesh and the array mapping its local node ids to the original ones.
        """
        element_ids = np.asarray(element_ids, dtype=np.int64)
        used = np.unique(self.elements[element_ids])
        if node_order is None:
            node_order = used
        elif not np.array_equal(np.sort(node_order), used):
            msg = "`node_order` must be a permutation of the nodes used by the selected elements."
            raise ValueError(msg)

        glob2loc = np.full(self.n_nodes, -1, dtype=np.int64)
        glob2loc[node_order] = np.arange(node_order.size)
        local_elements = glob2loc[self.elements[element_ids]]

        in_sub = np.zeros(self.n_elements, dtype=bool)
        in_sub[element_ids] = True
        owners, _ = self.boundary_owners
        keep = in_sub[owners]
        edges = [glob2loc[self.boundary_edges[keep]]]
        tags = [t for t, k in zip(self.boundary_tags, keep) if k]

        new_free = np.sort(_free_edges(local_elements), axis=1)
        old = set(map(tuple, np.sort(edges[0], axis=1).tolist()))
        internal = np.array([e for e in new_free.tolist() if tuple(e) not in old], dtype=np.int64).reshape(-1, 2)
        edges.append(internal)
        tags.extend([INTERFACE] * internal.shape[0])

        global2local_elem = np.full(self.n_elements, -1, dtype=np.int64)
        global2local_elem[element_ids] = np.arange(element_ids.size)
        regions = {label: global2local_elem[ids[in_sub[ids]]] for label, ids in self.region_tags.items()}

        sub = Mesh(
            nodes=self.nodes[node_order],
            elements=local_elements,
            boundary_edges=np.concatenate(edges),
            boundary_tags=tuple(tags),
            region_tags=regions,
        )
        return sub, node_order


@dataclass(frozen=True, eq=False)
class Refinement:
    """Result of a uniform lattice subdivision of a mesh.

    Coarse vertices keep their ids in the fine mesh, children of coarse element `e` are the fine elements
    `e * factor**2 + k` for `k < factor**2`, and `prolongation` interpolates coarse P1 nodal values onto fine nodes.

    Arguments:
        coarse: The subdivided mesh.
        fine: The refined mesh.
        parent: Coarse element of each fine element.
        prolongation: Sparse `(n_fine_nodes, n_coarse_nodes)` nodal interpolation matrix.
        factor: Number of segments each coarse edge is split into.
        boundary_parent: Coarse boundary edge of each fine boundary edge.
    """

    coarse: Mesh
    fine: Mesh
    parent: np.ndarray
    prolongation: sparse.csr_matrix
    factor: int
    boundary_parent: np.ndarray

    @cached_property
    def dof_prolongation(self: Self) -> sparse.csr_matrix:
        """Prolongation acting on interleaved dof vectors."""
        return sparse.kron(self.prolongation, sparse.identity(2, format="csr"), format="csr")

    def prolong(self: Self, values: np.ndarray) -> np.ndarray:
        """Interpolates a coarse interleaved dof vector (or a block of them, column-wise) onto the fine mesh."""
        return self.dof_prolongation @ values

    def children(self: Self, elements: np.ndarray) -> np.ndarray:
        """Fine element ids of the children of the given coarse elements."""
        k = self.factor**2
        return (np.asarray(elements, dtype=np.int64)[:, None] * k + np.arange(k)[None, :]).ravel()


def _lattice(r: int) -> Tuple[List[Tuple[int, int]], List[Tuple[Tuple[int, int], ...]]]:
    interior = [(i, j) for j in range(1, r) for i in range(1, r) if i + j < r]
    children: List[Tuple[Tuple[int, int], ...]] = []
    for j in range(r):
        for i in range(r - j):
            children.append(((i, j), (i + 1, j), (i, j + 1)))
            if i + j <= r - 2:  # noqa: PLR2004
                children.append(((i + 1, j), (i + 1, j + 1), (i, j + 1)))
    return interior, children


def subdivide(mesh: Mesh, r: int) -> Refinement:
    """Splits every triangle into `r**2` congruent children on a barycentric lattice.

    The refinement is conforming: points on a shared coarse edge are created once. Boundary tags and region tags are
    inherited by the children.

    Arguments:
        mesh: The mesh to refine.
        r: Number of segments per coarse edge (`r = 1` returns an identical copy, `r = 2` is the split by midpoints).

    Returns:
        The `Refinement`, holding the fine mesh and the nodal prolongation.

    Raises:
        ValueError: If `r < 1`.
    """
    if int(r) != r or r < 1:
        msg = f"`r` must be a positive integer. Found {r}"
        raise ValueError(msg)
    r = int(r)

    nc, m = mesh.n_nodes, mesh.n_elements
    edges, element_edges = mesh.edges, mesh.element_edges
    n_edges = edges.shape[0]
    interior, children_template = _lattice(r)
    n_int = len(interior)
    n_fine = nc + n_edges * (r - 1) + m * n_int

    # Fine node coordinates and interpolation weights
    coords = np.empty((n_fine, 2))
    coords[:nc] = mesh.nodes
    rows: List[np.ndarray] = [np.arange(nc)]
    cols: List[np.ndarray] = [np.arange(nc)]
    vals: List[np.ndarray] = [np.ones(nc)]

    if r > 1:
        k = np.arange(1, r)
        t = k / r
        xa, xb = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
        pts = xa[:, None, :] + t[None, :, None] * (xb - xa)[:, None, :]
        ids = nc + np.arange(n_edges)[:, None] * (r - 1) + (k - 1)[None, :]
        coords[ids.ravel()] = pts.reshape(-1, 2)
        rows += [ids.ravel(), ids.ravel()]
        cols += [np.repeat(edges[:, 0], r - 1), np.repeat(edges[:, 1], r - 1)]
        vals += [np.tile(1.0 - t, n_edges), np.tile(t, n_edges)]

    verts = mesh.nodes[mesh.elements]
    base = nc + n_edges * (r - 1)
    for idx, (i, j) in enumerate(interior):
        ids = base + np.arange(m) * n_int + idx
        lam = np.array([1.0 - (i + j) / r, i / r, j / r])
        coords[ids] = np.einsum("a,mad->md", lam, verts)
        for a in range(3):
            rows.append(ids)
            cols.append(mesh.elements[:, a])
            vals.append(np.full(m, lam[a]))

    prolongation = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_fine, nc)
    )

    # Fine id of every lattice point of every element
    starts = mesh.elements
    forward = starts == edges[element_edges, 0]

    def _edge_point(local_edge: int, param: int) -> np.ndarray:
        k_ = np.where(forward[:, local_edge], param, r - param)
        return nc + element_edges[:, local_edge] * (r - 1) + (k_ - 1)

    interior_index = {p: idx for idx, p in enumerate(interior)}

    def _point(i: int, j: int) -> np.ndarray:
        if (i, j) == (0, 0):
            return mesh.elements[:, 0]
        if i == r:
            return mesh.elements[:, 1]
        if j == r:
            return mesh.elements[:, 2]
        if j == 0:
            return _edge_point(0, i)
        if i + j == r:
            return _edge_point(1, j)
        if i == 0:
            return _edge_point(2, r - j)
        return base + np.arange(m) * n_int + interior_index[(i, j)]

    lattice_ids = {(i, j): _point(i, j) for j in range(r + 1) for i in range(r + 1 - j)}
    fine_elements = np.stack(
        [np.stack([lattice_ids[p] for p in child], axis=1) for child in children_template], axis=1
    ).reshape(-1, 3)
    parent = np.repeat(np.arange(m), r * r)

    # Boundary edges follow the lattice points of their coarse edge
    fine_edges: List[np.ndarray] = []
    boundary_parent: List[np.ndarray] = []
    tags: List[str] = []
    edge_ids = mesh.edge_ids(mesh.boundary_edges) if mesh.boundary_edges.size else np.zeros(0, dtype=np.int64)
    for b, ((a, c), eid, tag) in enumerate(zip(mesh.boundary_edges, edge_ids, mesh.boundary_tags)):
        inner = nc + eid * (r - 1) + np.arange(r - 1)
        chain = np.concatenate([[a], inner if a < c else inner[::-1], [c]])
        fine_edges.append(np.column_stack([chain[:-1], chain[1:]]))
        boundary_parent.append(np.full(r, b))
        tags.extend([tag] * r)

    k2 = r * r
    regions = {
        label: (ids[:, None] * k2 + np.arange(k2)[None, :]).ravel() for label, ids in mesh.region_tags.items()
    }
    fine = Mesh(
        nodes=coords,
        elements=fine_elements,
        boundary_edges=np.concatenate(fine_edges) if fine_edges else np.zeros((0, 2), dtype=np.int64),
        boundary_tags=tuple(tags),
        region_tags=regions,
    )
    _LOGGER.debug("Subdivided %s elements by %s into %s elements", m, r, fine.n_elements)
    return Refinement(
        coarse=mesh,
        fine=fine,
        parent=parent,
        prolongation=prolongation,
        factor=r,
        boundary_parent=np.concatenate(boundary_parent) if boundary_parent else np.zeros(0, dtype=np.int64),
    )


def refine_by_splitting(mesh: Mesh) -> Refinement:
    """Splits every triangle into 4 by its edge midpoints.

    Returns:
        The `Refinement`: `.fine` is the refined mesh and `.prolongation` the nodal linear interpolation.
    """
    return subdivide(mesh, 2)


def build_structured_rectangle(  # noqa: PLR0913
    nx: int,
    ny: int,
    bounds: Tuple[float, float, float, float],
    *,
    boundary_tag: TagRule = DIRICHLET,
    keep_cell: Optional[CellRule] = None,
    regions: Optional[Mapping[str, CellRule]] = None,
) -> Mesh:
    """Triangulates a rectangle on an `nx` by `ny` grid of cells, each split by its rising diagonal.

    Arguments:
        nx: Number of cells along x.
        ny: Number of cells along y.
        bounds: `(x_min, x_max, y_min, y_max)`.
        boundary_tag: A tag for the whole boundary, or a function of edge midpoints `(x, y)` returning one tag per
            boundary edge.
        keep_cell: Optional function of cell centers returning a boolean mask of cells to keep; unused nodes are
            dropped and ids compacted.
        regions: Optional map from a label to a function of element centroids returning a boolean mask.

    Returns:
        The triangulation.
    """
    if nx < 1 or ny < 1:
        msg = f"`nx` and `ny` must be at least 1. Found {nx} and {ny}"
        raise ValueError(msg)
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        msg = f"`bounds` must describe a non-empty rectangle. Found {bounds}"
        raise ValueError(msg)

    xs, ys = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ci, cj = ci.ravel(), cj.ravel()
    if keep_cell is not None:
        centers_x = 0.5 * (xs[ci] + xs[ci + 1])
        centers_y = 0.5 * (ys[cj] + ys[cj + 1])
        keep = np.asarray(keep_cell(centers_x, centers_y), dtype=bool)
        ci, cj = ci[keep], cj[keep]

    p00 = cj * (nx + 1) + ci
    p10, p01, p11 = p00 + 1, p00 + nx + 1, p00 + nx + 2
    elements = np.stack([np.column_stack([p00, p10, p11]), np.column_stack([p00, p11, p01])], axis=1).reshape(-1, 3)

    used, elements = np.unique(elements, return_inverse=True)
    elements = elements.reshape(-1, 3)
    nodes = nodes[used]

    boundary = _free_edges(elements)
    mid = 0.5 * (nodes[boundary[:, 0]] + nodes[boundary[:, 1]])
    if isinstance(boundary_tag, str):
        tags: Tuple[str, ...] = (boundary_tag,) * boundary.shape[0]
    else:
        tags = tuple(boundary_tag(mid[:, 0], mid[:, 1]))

    centroids = nodes[elements].mean(axis=1)
    region_tags = {
        label: np.flatnonzero(np.asarray(rule(centroids[:, 0], centroids[:, 1]), dtype=bool))
        for label, rule in (regions or {}).items()
    }
    return Mesh(nodes=nodes, elements=elements, boundary_edges=boundary, boundary_tags=tags, region_tags=region_tags)


def build_structured_square(
    side_subdivisions: int,
    half_width: float = 1.0,
    *,
    regions: Optional[Mapping[str, CellRule]] = None,
) -> Mesh:
    """Uniform single-diagonal triangulation of `[-3 l, 3 l]^2` with the whole boundary tagged `"dirichlet"`.

    Arguments:
        side_subdivisions: Number of cells per side `n`, giving `2 n^2` triangles.
        half_width: The length `l`.
        regions: Optional region rules on element centroids.

    Raises:
        ValueError: If `side_subdivisions < 1` or `half_width <= 0`.
    """
    if side_subdivisions < 1:
        msg = f"`side_subdivisions` must be at least 1. Found {side_subdivisions}"
        raise ValueError(msg)
    if half_width <= 0:
        msg = f"`half_width` must be strictly positive. Found {half_width}"
        raise ValueError(msg)
    a = 3.0 * half_width
    return build_structured_rectangle(
        side_subdivisions, side_subdivisions, (-a, a, -a, a), boundary_tag=DIRICHLET, regions=regions
    )


CRACKED_HOLES = ((1.5, 1.5), (2.5, 2.5))
CRACKED_HOLE_RADIUS = 0.3
CRACKED_SLIT = (1.25, 1.5, 3.5)  # x_left, x_right, y_tip


def build_cracked_plate(cells_per_unit: int = 4) -> Mesh:
    """Plate `[0, 4]^2` with two circular holes and a slit cut down from the top edge.

    The left edge is clamped, the right edge carries the tag `"neumann:pull"` and every other boundary edge is free.
    The region `"omega"` holds the elements just below the slit tip.

    Arguments:
        cells_per_unit: Grid cells per unit length; must be a multiple of 4 so that the slit aligns with the grid.
    """
    if cells_per_unit < 4 or cells_per_unit % 4:  # noqa: PLR2004
        msg = f"`cells_per_unit` must be a positive multiple of 4. Found {cells_per_unit}"
        raise ValueError(msg)

    n = 4 * cells_per_unit
    tol = 0.25 / cells_per_unit
    x_left, x_right, y_tip = CRACKED_SLIT

    def _keep(cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
        keep = np.ones_like(cx, dtype=bool)
        for hx, hy in CRACKED_HOLES:
            keep &= (cx - hx) ** 2 + (cy - hy) ** 2 > CRACKED_HOLE_RADIUS**2
        keep &= ~((cx > x_left) & (cx < x_right) & (cy > y_tip))
        return keep

    def _tags(mx: np.ndarray, my: np.ndarray) -> List[str]:  # noqa: ARG001
        return [DIRICHLET if x < tol else "neumann:pull" if x > 4.0 - tol else FREE for x in mx]

    def _omega(cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
        return (cx > x_left - 0.25) & (cx < x_right + 0.25) & (cy > y_tip - 0.25) & (cy < y_tip)

    return build_structured_rectangle(
        n, n, (0.0, 4.0, 0.0, 4.0), boundary_tag=_tags, keep_cell=_keep, regions={"omega": _omega}
    )


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of every element to exactly one subdomain.

    Arguments:
        subdomain_of: Subdomain id of each element, ids dense in `[0, n_subdomains)`.
        n_subdomains: Number of subdomains.
        interface_nodes: Sorted ids of the nodes incident to elements of at least two subdomains.
    """

    subdomain_of: np.ndarray
    n_subdomains: int
    interface_nodes: np.ndarray

    @classmethod
    def from_assignment(cls, mesh: Mesh, subdomain_of: Sequence[int]) -> Partition:
        """Builds a partition from an element to subdomain map, computing the interface nodes.

        Raises:
            ValueError: If the map has the wrong length or its ids are not dense from 0.
        """
        owner = np.asarray(subdomain_of, dtype=np.int64).reshape(-1)
        if owner.size != mesh.n_elements:
            msg = f"`subdomain_of` must have one entry per element ({mesh.n_elements}). Found {owner.size}"
            raise ValueError(msg)
        n_sd = int(owner.max()) + 1 if owner.size else 0
        if owner.min() < 0 or np.unique(owner).size != n_sd:
            msg = "Subdomain ids must be dense in [0, n_subdomains)."
            raise ValueError(msg)

        incidence = sparse.csr_matrix(
            (np.ones(mesh.elements.size), (mesh.elements.ravel(), np.repeat(owner, 3))),
            shape=(mesh.n_nodes, n_sd),
        )
        count = np.diff(incidence.indptr)
        return cls(subdomain_of=owner, n_subdomains=n_sd, interface_nodes=np.flatnonzero(count >= 2))  # noqa: PLR2004

    def elements_of(self: Self, subdomain: int) -> np.ndarray:
        """Element ids of a subdomain."""
        return np.flatnonzero(self.subdomain_of == subdomain)

    def refine(self: Self, refinement: Refinement) -> Partition:
        """Partition of the refined mesh where every child stays in its parent's subdomain."""
        return Partition.from_assignment(refinement.fine, self.subdomain_of[refinement.parent])


def _edge_pieces(mesh: Mesh, owner: np.ndarray) -> np.ndarray:
    """Labels of the element sets that stay connected through edges shared inside one subdomain."""
    pairs = mesh.edge_elements
    inner = pairs[pairs[:, 1] >= 0]
    inner = inner[owner[inner[:, 0]] == owner[inner[:, 1]]]
    m = mesh.n_elements
    graph = sparse.csr_matrix((np.ones(len(inner)), (inner[:, 0], inner[:, 1])), shape=(m, m))
    _, labels = connected_components(graph, directed=False)
    return labels


def _reattach(mesh: Mesh, owner: np.ndarray) -> np.ndarray:
    """Moves every piece of a subdomain other than its largest to the neighbour it shares the most edges with.

    Box boundaries that cut through mesh cells can leave a few elements of a subdomain hinged to the rest at a
    single vertex; such a subdomain has a floating relative rotation.
    """
    owner = owner.copy()
    pairs = mesh.edge_elements
    inner = pairs[pairs[:, 1] >= 0]
    while True:
        labels = _edge_pieces(mesh, owner)
        sizes = np.bincount(labels)
        piece_owner = np.zeros(sizes.size, dtype=np.int64)
        piece_owner[labels] = owner
        main: Dict[int, int] = {}
        for label in np.argsort(-sizes, kind="stable"):
            main.setdefault(int(piece_owner[label]), int(label))
        detached = [label for label in range(sizes.size) if main[int(piece_owner[label])] != label]
        if not detached:
            return owner
        piece = min(detached, key=lambda label: sizes[label])
        side = labels[inner] == piece
        across = side[:, 0] != side[:, 1]
        neighbours = np.where(side[across, 0], owner[inner[across, 1]], owner[inner[across, 0]])
        if neighbours.size == 0:
            # the mesh itself is disconnected
            return owner
        target = int(np.bincount(neighbours).argmax())
        _LOGGER.info(
            "Moving %s elements hinged to subdomain %s at a vertex into subdomain %s",
            int(sizes[piece]),
            int(piece_owner[piece]),
            target,
        )
        owner[labels == piece] = target


def _compact(mesh: Mesh, owner: np.ndarray) -> Partition:
    owner = _reattach(mesh, owner)
    used = np.unique(owner)
    if used.size != owner.max() + 1:
        _LOGGER.warning("Dropping %s empty subdomains and renumbering", int(owner.max()) + 1 - used.size)
    return Partition.from_assignment(mesh, np.searchsorted(used, owner))


def partition_regular(mesh: Mesh, grid: Tuple[int, int]) -> Partition:
    """Assigns elements by centroid to an `nx` by `ny` grid of boxes covering the mesh bounding box.

    Box `(ix, iy)` gets id `iy * nx + ix`. A centroid lying on a box boundary goes to the lower box. Pieces of a
    box that touch the rest of it only at a vertex join the neighbouring box they share the most edges with. Empty
    boxes are dropped and the remaining ids compacted.

    Arguments:
        mesh: The mesh.
        grid: `(nx, ny)` number of boxes per direction.
    """
    nx, ny = grid
    if nx < 1 or ny < 1:
        msg = f"`grid` entries must be at least 1. Found {grid}"
        raise ValueError(msg)
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    scaled = (mesh.centroids - lo) / (hi - lo) * np.array([nx, ny])
    ix = np.clip(np.ceil(scaled[:, 0]).astype(np.int64) - 1, 0, nx - 1)
    iy = np.clip(np.ceil(scaled[:, 1]).astype(np.int64) - 1, 0, ny - 1)
    return _compact(mesh, iy * nx + ix)


def partition_sectors(mesh: Mesh, n_parts: int) -> Partition:
    """Irregular partition into angular sectors around the center of the bounding box."""
    if n_parts < 1:
        msg = f"`n_parts` must be at least 1. Found {n_parts}"
        raise ValueError(msg)
    center = 0.5 * (mesh.nodes.min(axis=0) + mesh.nodes.max(axis=0))
    d = mesh.centroids - center
    angle = np.mod(np.arctan2(d[:, 1], d[:, 0]) + 0.3, 2.0 * np.pi)
    return _compact(mesh, np.minimum((angle / (2.0 * np.pi) * n_parts).astype(np.int64), n_parts - 1))


@dataclass(frozen=True, eq=False)
class StarPatch:
    """The support of a vertex shape function together with its refined submesh.

    Arguments:
        center: The vertex id.
        elements: Coarse elements sharing the vertex.
        local_index: Position of the vertex inside each of those elements.
        children: Fine element ids of the refined patch in `refinement.fine`.
        fine_nodes: Fine node ids used by `children`.
        refinement: The refinement shared by all patches of the mesh.
    """

    center: int
    elements: np.ndarray
    local_index: np.ndarray
    children: np.ndarray
    fine_nodes: np.ndarray
    refinement: Refinement

    @property
    def area(self: Self) -> float:
        """Patch area."""
        return float(self.refinement.coarse.areas[self.elements].sum())


def star_patches(mesh: Mesh, r: int = 2) -> List[StarPatch]:
    """One star patch per vertex, each refined into `r**2` children per element.

    Arguments:
        mesh: The mesh.
        r: Subdivision factor of the patch submeshes.
    """
    refinement = subdivide(mesh, r)
    indptr, element_ids, local_index = mesh.vertex_incidence()
    patches = []
    for v in range(mesh.n_nodes):
        sl = slice(indptr[v], indptr[v + 1])
        children = refinement.children(element_ids[sl])
        patches.append(
            StarPatch(
                center=v,
                elements=element_ids[sl],
                local_index=local_index[sl],
                children=children,
                fine_nodes=np.unique(refinement.fine.elements[children]),
                refinement=refinement,
            )
        )
    return patches


def mesh_to_dict(mesh: Mesh) -> Dict[str, Any]:
    """JSON-ready representation of a mesh."""
    return {
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "boundary": [{"edge": e, "tag": t} for e, t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)],
        "regions": {k: v.tolist() for k, v in mesh.region_tags.items()},
    }


def mesh_from_dict(payload: Mapping[str, Any]) -> Mesh:
    """Builds a mesh from its JSON representation."""
    boundary = payload.get("boundary", [])
    return Mesh(
        nodes=np.asarray(payload["nodes"], dtype=float),
        elements=np.asarray(payload["elements"], dtype=np.int64),
        boundary_edges=np.asarray([b["edge"] for b in boundary], dtype=np.int64).reshape(-1, 2),
        boundary_tags=tuple(b["tag"] for b in boundary),
        region_tags={k: np.asarray(v, dtype=np.int64) for k, v in payload.get("regions", {}).items()},
    )


def save_mesh(mesh: Mesh, path: Union[str, Path]) -> None:
    """Writes a mesh as JSON."""
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


def load_mesh(path: Union[str, Path]) -> Mesh:
    """Reads a JSON mesh."""
    return mesh_from_dict(json.loads(Path(path).read_text()))


def save_partition(partition: Partition, path: Union[str, Path]) -> None:
    """Writes a partition as JSON."""
    Path(path).write_text(json.dumps({"subdomain_of": partition.subdomain_of.tolist()}))


def load_partition(mesh: Mesh, path: Union[str, Path]) -> Partition:
    """Reads a JSON partition of `mesh`."""
    payload = json.loads(Path(path).read_text())
    return Partition.from_assignment(mesh, payload["subdomain_of"])
