from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from functools import cached_property
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy import linalg
from scipy import sparse
from scipy.sparse.linalg import splu

from ddbounds.ddsolver import IterationFields
from ddbounds.fem import ElementStress
from ddbounds.fem import element_gradients
from ddbounds.fem import element_prestress
from ddbounds.fem import element_stiffness
from ddbounds.fem import evaluate_vector
from ddbounds.fem import strain_displacement
from ddbounds.fem import strains
from ddbounds.fem import stresses
from ddbounds.mesh import INTERFACE
from ddbounds.mesh import Mesh
from ddbounds.mesh import Refinement
from ddbounds.quadrature import edge_rule
from ddbounds.quadrature import map_triangles
from ddbounds.substructure import FineOperators
from ddbounds.substructure import InterfaceAlgebra
from ddbounds.substructure import SubdomainProblem
from ddbounds.substructure import rigid_body_modes
from ddbounds.utils._errors import AdmissibilityError
from ddbounds.utils._errors import PatchSolveError

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

DEFAULT_PATCH_REFINEMENT = 4
ADMISSIBILITY_TOLERANCE = 1e-8
PATCH_COMPATIBILITY_TOLERANCE = 1e-8


def _interface_selection(mesh: Mesh) -> np.ndarray:
    return np.flatnonzero(np.array([t == INTERFACE for t in mesh.boundary_tags], dtype=bool))


def _edge_lookup(problem: SubdomainProblem, selected: np.ndarray, edge_keys: np.ndarray, n_global: int) -> np.ndarray:
    pairs = problem.nodes[problem.mesh.boundary_edges[selected]]
    return np.searchsorted(edge_keys, pairs.min(axis=1) * n_global + pairs.max(axis=1))


def averaged_flux(
    problems: Sequence[SubdomainProblem], algebra: InterfaceAlgebra, fields: IterationFields
) -> np.ndarray:
    """Mean stress vector of the two sides of every interface edge, seen from its lower subdomain.

    Each side contributes `(H eps(u_N) - sigma_0) n` of the element owning the edge, with `n` the outward normal of
    that side, so that both contributions approximate the same traction.

    Returns:
        Array of shape `(E, 2)` aligned with `algebra.interface_edges`.
    """
    edges, owners = algebra.interface_edges, algebra.edge_owners
    flux = np.zeros((edges.shape[0], 2))
    if edges.shape[0] == 0:
        return flux

    n_global = int(max(p.nodes.max() for p in problems)) + 1
    edge_keys = edges[:, 0] * n_global + edges[:, 1]
    for p, u in zip(problems, fields.u_neumann):
        selected = _interface_selection(p.mesh)
        if selected.size == 0:
            continue
        mesh = p.mesh
        sigma = stresses(mesh, p.material, u).values - element_prestress(mesh, p.loads[fields.load_case])
        element = mesh.boundary_owners[0][selected]
        local = mesh.boundary_edges[selected]
        tangent = mesh.nodes[local[:, 1]] - mesh.nodes[local[:, 0]]
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / np.linalg.norm(tangent, axis=1)[:, None]
        midpoint = 0.5 * (mesh.nodes[local[:, 0]] + mesh.nodes[local[:, 1]])
        inward = np.einsum("kd,kd->k", normal, midpoint - mesh.centroids[element]) < 0
        normal[inward] *= -1.0

        s = sigma[element]
        vector = np.column_stack(
            [s[:, 0] * normal[:, 0] + s[:, 2] * normal[:, 1], s[:, 2] * normal[:, 0] + s[:, 1] * normal[:, 1]]
        )
        e = _edge_lookup(p, selected, edge_keys, n_global)
        sign = np.where(owners[e, 0] == p.index, 1.0, -1.0)
        np.add.at(flux, e, 0.5 * sign[:, None] * vector)
    return flux


def interface_tractions(
    problems: Sequence[SubdomainProblem], algebra: InterfaceAlgebra, fields: IterationFields
) -> Tuple[np.ndarray, ...]:
    """Turns the balanced nodal reactions into piecewise linear tractions on the interface edges.

    Each interface edge carries one linear traction `t`, seen with a `+` sign by its lower subdomain and a `-` sign by
    the higher one. The work of the tractions against every trace shape function must equal the reaction `lambda_N`.
    Among those tractions, `t` is the one closest to the averaged stress vector `t_bar` of both sides in the edge
    `L2` norm:

        min (t - t_bar)^T M (t - t_bar)  subject to  P M t = lambda_N

    where `M` is the edge mass matrix and `P` the signed incidence of edge endpoints to subdomain trace dofs. With
    `t = t_bar + P^T y`, the multipliers solve `P M P^T y = lambda_N - P M t_bar`. At every interface dof the rows of
    the subdomains sharing it add up to zero, so the row of the highest subdomain is dropped; the remaining system is
    symmetric positive definite.

    Returns:
        Per subdomain, an array of shape `(k, 2, 2)` aligned with `mesh.boundary_edges` of the local mesh: the traction
        at both endpoints of each boundary edge (zero off the interface).
    """
    edges, owners = algebra.interface_edges, algebra.edge_owners
    n_edges = edges.shape[0]
    out = [np.zeros((p.mesh.boundary_edges.shape[0], 2, 2)) for p in problems]
    if n_edges == 0:
        return tuple(out)

    n_global = int(max(p.nodes.max() for p in problems)) + 1
    stride = 2 * n_global
    keys = np.concatenate([p.index * stride + p.global_dofs[p.dofs_b] for p in problems])
    rhs = np.concatenate([lam for lam in fields.reactions])
    order = np.argsort(keys)
    keys, rhs = keys[order], rhs[order]

    coords = np.zeros((n_global, 2))
    for p in problems:
        coords[p.nodes] = p.mesh.nodes
    length = np.linalg.norm(coords[edges[:, 1]] - coords[edges[:, 0]], axis=1)

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    signs: List[np.ndarray] = []
    e_ids = np.arange(n_edges)
    for side, sign in ((0, 1.0), (1, -1.0)):
        s = owners[:, side]
        for j in range(2):
            for c in range(2):
                key = s * stride + 2 * edges[:, j] + c
                pos = np.clip(np.searchsorted(keys, key), 0, keys.size - 1)
                found = keys[pos] == key
                rows.append(pos[found])
                cols.append(4 * e_ids[found] + 2 * j + c)
                signs.append(np.full(int(found.sum()), sign))

    n_unknowns = 4 * n_edges
    incidence = sparse.csr_matrix(
        (np.concatenate(signs), (np.concatenate(rows), np.concatenate(cols))), shape=(keys.size, n_unknowns)
    )
    block = np.kron(np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]]), np.eye(2))
    mass = sparse.kron(sparse.diags(length), block, format="csr")
    work = incidence @ mass

    flux = averaged_flux(problems, algebra, fields)
    t_bar = np.repeat(flux[:, None, :], 2, axis=1).reshape(-1)

    # rows without edges carry no equation; the last non-empty row of each dof is redundant
    nonempty = np.flatnonzero(np.diff(incidence.indptr) > 0)
    dof, subdomain = keys[nonempty] % stride, keys[nonempty] // stride
    by_dof = np.lexsort((subdomain, dof))
    last = np.ones(nonempty.size, dtype=bool)
    last[by_dof[:-1]] = dof[by_dof[:-1]] != dof[by_dof[1:]]
    kept = nonempty[~last]

    values = t_bar.copy()
    if kept.size:
        reduced = incidence[kept]
        gram = (reduced @ mass @ reduced.T).tocsc()
        y = splu(gram).solve(rhs[kept] - work[kept] @ t_bar)
        values += reduced.T @ y

    misfit = float(np.abs(work @ values - rhs).max(initial=0.0))
    if misfit > 1e-10 * max(float(np.abs(rhs).max(initial=0.0)), 1e-300):
        _LOGGER.warning("Interface reactions are not exactly representable by edge tractions (misfit %.3e)", misfit)
    values = values.reshape(n_edges, 2, 2)

    edge_keys = edges[:, 0] * n_global + edges[:, 1]
    for p, target in zip(problems, out):
        selected = _interface_selection(p.mesh)
        if selected.size == 0:
            continue
        pairs = p.nodes[p.mesh.boundary_edges[selected]]
        e = _edge_lookup(p, selected, edge_keys, n_global)
        sign = np.where(owners[e, 0] == p.index, 1.0, -1.0)
        first_is_low = pairs[:, 0] == edges[e, 0]
        target[selected, 0] = sign[:, None] * np.where(first_is_low[:, None], values[e, 0], values[e, 1])
        target[selected, 1] = sign[:, None] * np.where(first_is_low[:, None], values[e, 1], values[e, 0])
    return tuple(out)


@dataclass(frozen=True, eq=False)
class PatchSolution:
    """Solution of one star-patch problem on the refined subdomain mesh.

    Arguments:
        vertex: Local coarse vertex at the center of the patch.
        subdomain: Subdomain id.
        fine_nodes: Fine node ids of the refined patch.
        values: Nodal values of `e^i`, shape `(n, 2)`; zero on Dirichlet nodes, orthogonal to rigid motions otherwise.
        rhs: Weighted residual right-hand side, same shape.
        compatibility_defect: Relative rigid-body component of the right-hand side on floating patches.
    """

    vertex: int
    subdomain: int
    fine_nodes: np.ndarray
    values: np.ndarray
    rhs: np.ndarray
    compatibility_defect: float


class PatchAssembler:
    """Weighted residuals and stiffness blocks of the star patches of one subdomain.

    The residual of the source field is `R(v) = L(v) + T(v) - int (H eps(u) - sigma_0) : eps(v)` where `T` is the work
    of the interface tractions. For every fine element the terms `R(phi_A psi_a e_c)` are precomputed for the three
    coarse shape functions `phi_A` of its parent, so that a patch only gathers the rows of its own vertex.

    Arguments:
        problem: The subdomain problem.
        u_source: Source displacement over all local dofs.
        tractions: Interface tractions aligned with the local boundary edges, shape `(k, 2, 2)`.
        r: Subdivision factor of the patch meshes.
        load_case: Load case providing `L`.
    """

    def __init__(  # noqa: PLR0913
        self: Self,
        *,
        problem: SubdomainProblem,
        u_source: np.ndarray,
        tractions: np.ndarray,
        r: int = DEFAULT_PATCH_REFINEMENT,
        load_case: int = 0,
    ) -> None:
        self.problem_ = problem
        self.u_source_ = np.asarray(u_source, dtype=float)
        self.tractions_ = np.asarray(tractions, dtype=float)
        self.r_ = r
        self.load_case_ = load_case
        self.fine_: FineOperators = problem.fine_operators(r)
        self.hooke_ = problem.material.hooke

    @property
    def refinement(self: Self) -> Refinement:
        """The subdivision of the local mesh."""
        return self.fine_.refinement

    @cached_property
    def _coarse_geometry(self: Self) -> Tuple[np.ndarray, np.ndarray]:
        mesh = self.problem_.mesh
        _, grads = element_gradients(mesh.nodes, mesh.elements)
        return grads, mesh.centroids

    def _coarse_shape(self: Self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Values of the parent shape functions at points, `points` shape `(m, q, 2)`, output `(m, q, 3)`."""
        grads, centroids = self._coarse_geometry
        offset = points - centroids[elements][:, None, :]
        return 1.0 / 3.0 + np.einsum("mqd,mad->mqa", offset, grads[elements])

    @cached_property
    def fine_stiffness(self: Self) -> np.ndarray:
        """Element stiffness matrices of the fine mesh."""
        return element_stiffness(self.refinement.fine, self.problem_.material)

    @cached_property
    def fine_strain_operator(self: Self) -> np.ndarray:
        """Strain-displacement matrices of the fine mesh."""
        fine = self.refinement.fine
        return strain_displacement(element_gradients(fine.nodes, fine.elements)[1])

    @cached_property
    def source_strain(self: Self) -> np.ndarray:
        """Strain of the source on the coarse elements."""
        return strains(self.problem_.mesh, self.u_source_)

    @cached_property
    def child_terms(self: Self) -> np.ndarray:
        """`R(phi_A psi_a e_c)` restricted to every fine element, shape `(m_fine, 3, 3, 2)`."""
        problem, fine = self.problem_, self.refinement.fine
        parent = self.refinement.parent
        loads = problem.loads[self.load_case_]
        degree = problem.quadrature_degree + 1
        coarse_grads, _ = self._coarse_geometry

        areas, fine_grads = element_gradients(fine.nodes, fine.elements)
        sigma = self.source_strain @ self.hooke_.T - element_prestress(problem.mesh, loads)
        sigma = sigma[parent]
        phi_c = self._coarse_shape(parent, fine.centroids[:, None, :])[:, 0, :]

        g = (areas / 3.0)[:, None, None, None] * coarse_grads[parent][:, :, None, :] + (
            areas[:, None, None, None] * phi_c[:, :, None, None] * fine_grads[:, None, :, :]
        )
        terms = np.empty((fine.n_elements, 3, 3, 2))
        terms[..., 0] = -(sigma[:, None, None, 0] * g[..., 0] + sigma[:, None, None, 2] * g[..., 1])
        terms[..., 1] = -(sigma[:, None, None, 2] * g[..., 0] + sigma[:, None, None, 1] * g[..., 1])

        if loads.body_force is not None:
            x, y, weights, lam = map_triangles(fine.nodes[fine.elements], degree)
            f = evaluate_vector(loads.body_force, x, y)
            phi = self._coarse_shape(parent, np.stack([x, y], axis=-1))
            terms += np.einsum("mq,cmq,qa,mqA->mAac", weights, f, lam, phi)

        edge_terms, owners, positions = self._edge_terms(degree, interface_only=False)
        for j in range(2):
            np.add.at(terms, (owners, slice(None), positions[:, j]), edge_terms[:, :, j])
        return terms

    def _edge_terms(self: Self, degree: int, *, interface_only: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Edge loads `int g_c phi_A psi_j` on Neumann and interface fine edges.

        Returns:
            The terms, shape `(k, 3, 2, 2)`, the owning fine elements and the local positions of both endpoints.
        """
        problem, refinement = self.problem_, self.refinement
        fine, coarse = refinement.fine, problem.mesh
        loads = problem.loads[self.load_case_]
        tags = fine.boundary_tags
        wanted = {INTERFACE} if interface_only else {INTERFACE, *loads.tractions}
        selected = np.flatnonzero(np.array([t in wanted for t in tags], dtype=bool))

        owners_all, local_all = fine.boundary_owners
        owners, local = owners_all[selected], local_all[selected]
        edges = fine.boundary_edges[selected]
        forward = fine.elements[owners, local] == edges[:, 0]
        positions = np.column_stack(
            [np.where(forward, local, (local + 1) % 3), np.where(forward, (local + 1) % 3, local)]
        )
        if selected.size == 0:
            return np.zeros((0, 3, 2, 2)), owners, positions

        t, w = edge_rule(degree)
        xa, xb = fine.nodes[edges[:, 0]], fine.nodes[edges[:, 1]]
        pts = xa[:, None, :] + t[None, :, None] * (xb - xa)[:, None, :]
        length = np.linalg.norm(xb - xa, axis=1)

        values = np.zeros((selected.size, t.size, 2))
        for k, tag in enumerate(tags[i] for i in selected):
            if tag != INTERFACE:
                values[k] = evaluate_vector(loads.tractions[tag], pts[k, :, 0], pts[k, :, 1]).T
        on_interface = np.array([tags[i] == INTERFACE for i in selected], dtype=bool)
        if on_interface.any():
            parent_edge = refinement.boundary_parent[selected[on_interface]]
            ca = coarse.nodes[coarse.boundary_edges[parent_edge, 0]]
            cb = coarse.nodes[coarse.boundary_edges[parent_edge, 1]]
            span = cb - ca
            s = np.einsum("kqd,kd->kq", pts[on_interface] - ca[:, None, :], span) / np.einsum("kd,kd->k", span, span)[
                :, None
            ]
            ends = self.tractions_[parent_edge]
            values[on_interface] = (1.0 - s)[..., None] * ends[:, None, 0, :] + s[..., None] * ends[:, None, 1, :]

        phi = self._coarse_shape(refinement.parent[owners], pts)
        psi = np.column_stack([1.0 - t, t])
        terms = np.einsum("k,q,kqc,kqA,qj->kAjc", length, w, values, phi, psi)
        return terms, owners, positions

    def interface_load(self: Self) -> np.ndarray:
        """Work of the interface tractions against every fine shape function."""
        fine = self.refinement.fine
        terms, owners, positions = self._edge_terms(self.problem_.quadrature_degree + 1, interface_only=True)
        out = np.zeros(fine.n_dofs)
        nodes = fine.elements[owners[:, None], positions]
        np.add.at(out, (2 * nodes[..., None] + np.arange(2)).reshape(-1), terms.sum(axis=1).reshape(-1))
        return out

    @cached_property
    def _incidence(self: Self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.problem_.mesh.vertex_incidence()

    def patch_residual(self: Self, vertex: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Weighted residual `R(phi_i (psi - Pi_H psi))` of a patch.

        Returns:
            The fine nodes of the patch, its fine elements and the right-hand side of shape `(n, 2)`.
        """
        indptr, element_ids, local_index = self._incidence
        sl = slice(indptr[vertex], indptr[vertex + 1])
        k2 = self.r_**2
        children = self.refinement.children(element_ids[sl])
        which = np.repeat(local_index[sl], k2)
        fine = self.refinement.fine

        nodes = np.unique(fine.elements[children])
        local = np.searchsorted(nodes, fine.elements[children])
        rhs = np.zeros((nodes.size, 2))
        np.add.at(rhs, local, self.child_terms[children, which])

        coarse_nodes = np.unique(self.problem_.mesh.elements[element_ids[sl]])
        weights = self.refinement.prolongation[nodes][:, coarse_nodes].toarray()
        rhs[np.searchsorted(nodes, coarse_nodes)] -= weights.T @ rhs
        return nodes, children, rhs

    def solve(self: Self, vertex: int) -> PatchSolution:
        """Solves the Neumann problem of the patch of a coarse vertex.

        Raises:
            PatchSolveError: If the regularized patch system is singular.
        """
        nodes, children, rhs = self.patch_residual(vertex)
        fine = self.refinement.fine
        n = nodes.size

        dofs = (2 * np.searchsorted(nodes, fine.elements[children])[..., None] + np.arange(2)).reshape(-1, 6)
        stiffness = np.zeros((2 * n, 2 * n))
        np.add.at(stiffness, (dofs[:, :, None], dofs[:, None, :]), self.fine_stiffness[children])

        constrained = np.repeat(self.fine_.dirichlet_nodes[nodes], 2)
        free = np.flatnonzero(~constrained)
        b = rhs.reshape(-1)[free]
        modes = rigid_body_modes(fine.nodes[nodes])
        kernel = linalg.null_space(modes[constrained]) if constrained.any() else np.eye(3)
        rigid = modes[free] @ kernel
        if rigid.shape[1]:
            rigid, _ = np.linalg.qr(rigid)

        scale = float(np.linalg.norm(b))
        defect = float(np.linalg.norm(rigid.T @ b)) / scale if scale > 0 else 0.0
        if defect > PATCH_COMPATIBILITY_TOLERANCE:
            _LOGGER.warning(
                "Patch %s of subdomain %s has a compatibility defect %.3e", vertex, self.problem_.index, defect
            )

        k_ff = stiffness[np.ix_(free, free)]
        m = rigid.shape[1]
        system = np.block([[k_ff, rigid], [rigid.T, np.zeros((m, m))]])
        try:
            solution = linalg.solve(system, np.concatenate([b, np.zeros(m)]), assume_a="sym")
        except linalg.LinAlgError as exc:
            msg = f"Singular patch problem at vertex {vertex} of subdomain {self.problem_.index}."
            raise PatchSolveError(msg, subdomain=self.problem_.index, vertex=vertex) from exc

        values = np.zeros(2 * n)
        values[free] = solution[: free.size]
        return PatchSolution(
            vertex=vertex,
            subdomain=self.problem_.index,
            fine_nodes=nodes,
            values=values.reshape(n, 2),
            rhs=np.where(constrained.reshape(n, 2), 0.0, rhs),
            compatibility_defect=defect,
        )


def solve_star_patch(  # noqa: PLR0913
    problem: SubdomainProblem,
    u_source: np.ndarray,
    tractions: np.ndarray,
    vertex: int,
    *,
    r: int = DEFAULT_PATCH_REFINEMENT,
    load_case: int = 0,
) -> PatchSolution:
    """Solves `a(e^i, v) = R(phi_i (v - Pi_H v))` for every refined test field `v` on the patch of `vertex`.

    The correction by the coarse interpolant `Pi_H` leaves the right-hand side unchanged for a Galerkin source and
    makes it vanish on rigid motions, so floating patches are compatible.

    Arguments:
        problem: The subdomain problem.
        u_source: Source displacement over all local dofs (typically `u_N`).
        tractions: Interface tractions from `interface_tractions`.
        vertex: Local coarse vertex.
        r: Subdivision factor.
        load_case: Load case providing the loads.
    """
    assembler = PatchAssembler(problem=problem, u_source=u_source, tractions=tractions, r=r, load_case=load_case)
    return assembler.solve(vertex)


def _fine_strain_correction(assembler: PatchAssembler, patches: Sequence[PatchSolution]) -> np.ndarray:
    fine = assembler.refinement.fine
    indptr, element_ids, _ = assembler.problem_.mesh.vertex_incidence()
    correction = np.zeros((fine.n_elements, 3))
    for patch in patches:
        children = assembler.refinement.children(element_ids[indptr[patch.vertex] : indptr[patch.vertex + 1]])
        local = np.searchsorted(patch.fine_nodes, fine.elements[children])
        values = patch.values[local].reshape(-1, 6)
        correction[children] += np.einsum("mkj,mj->mk", assembler.fine_strain_operator[children], values)
    return correction


def build_sa_stress(
    assembler: PatchAssembler, patches: Sequence[PatchSolution], u_source: Optional[np.ndarray] = None
) -> ElementStress:
    """Statically admissible stress `H (eps(u) + sum_i eps(e^i))` on the refined subdomain mesh."""
    u = assembler.u_source_ if u_source is None else np.asarray(u_source, dtype=float)
    strain = strains(assembler.problem_.mesh, u)[assembler.refinement.parent]
    return ElementStress((strain + _fine_strain_correction(assembler, patches)) @ assembler.hooke_.T)


def interface_vertices(problem: SubdomainProblem) -> np.ndarray:
    """Boolean mask of the local vertices lying on the interface."""
    mask = problem.mesh.tagged_nodes(INTERFACE)
    mask[np.unique(problem.dofs_b // 2)] = True
    return mask


def build_w(assembler: PatchAssembler, patches: Sequence[PatchSolution]) -> Tuple[np.ndarray, float]:
    """Continuous estimate `w = Pi_h(sum_i phi_i e^i)` skipping the patches of interface vertices.

    Returns:
        The fine dof vector of `w`, exactly zero on interface and Dirichlet nodes, and `|||w|||^2`.
    """
    skip = interface_vertices(assembler.problem_)
    prolongation = assembler.refinement.prolongation
    fine = assembler.refinement.fine
    w = np.zeros((fine.n_nodes, 2))
    for patch in patches:
        if skip[patch.vertex]:
            continue
        weight = prolongation[patch.fine_nodes][:, [patch.vertex]].toarray()
        w[patch.fine_nodes] += weight * patch.values
    vector = w.reshape(-1)
    return vector, float(vector @ (assembler.fine_.stiffness @ vector))


@dataclass(frozen=True, eq=False)
class SubdomainRecovery:
    """Recovered quantities of one subdomain.

    Arguments:
        index: Subdomain id.
        problem: The subdomain problem.
        r: Subdivision factor of the recovery mesh.
        load_case: Load case.
        sa_stress: Statically admissible stress on the refined mesh.
        w: Fine dof vector of the continuous estimate.
        w_energy: `|||w|||^2`.
        ecr_neumann: `E_cr(u_N, sigma_hat)`.
        admissibility_residual: Largest equilibrium residual of `sigma_hat` against the refined test space, relative.
        interface_load: Fine load vector of the interface tractions.
    """

    index: int
    problem: SubdomainProblem
    r: int
    load_case: int
    sa_stress: ElementStress
    w: np.ndarray
    w_energy: float
    ecr_neumann: float
    admissibility_residual: float
    interface_load: np.ndarray

    @property
    def refinement(self: Self) -> Refinement:
        """The recovery mesh."""
        return self.problem.refinement(self.r)

    @property
    def fine_mesh(self: Self) -> Mesh:
        """The refined local mesh."""
        return self.refinement.fine

    def stress_gap(self: Self, u_local: np.ndarray) -> np.ndarray:
        """`sigma_hat - H eps(u)` on the fine elements, for a coarse local displacement `u`."""
        strain = strains(self.problem.mesh, u_local)[self.refinement.parent]
        return self.sa_stress.values - strain @ self.problem.material.hooke.T

    def ecr(self: Self, u_local: np.ndarray) -> float:
        """Error in constitutive relation `E_cr(u, sigma_hat)` on the subdomain."""
        gap = self.stress_gap(u_local)
        q = np.einsum("mi,ij,mj->m", gap, self.problem.material.compliance, gap)
        return float(np.sqrt(max(float(np.sum(self.fine_mesh.areas * q)), 0.0)))

    def residual(self: Self, u_local: np.ndarray, test: np.ndarray, load_case: Optional[int] = None) -> float:
        """`L^(s)(v) - a(u, v)` for a fine test field vanishing on the interface."""
        fine = self.problem.fine_operators(self.r)
        case = self.load_case if load_case is None else load_case
        u_fine = self.refinement.prolong(np.asarray(u_local, dtype=float))
        return float(test @ fine.force[:, case] - test @ (fine.stiffness @ u_fine))

    def energy_product(self: Self, first: np.ndarray, second: np.ndarray) -> float:
        """`a(first, second)` for fine dof vectors."""
        return float(first @ (self.problem.fine_operators(self.r).stiffness @ second))


@dataclass(frozen=True, eq=False)
class AdmissibleRecovery:
    """Admissible pair and continuous estimate of every subdomain for one iteration and load case."""

    iteration: int
    load_case: int
    subdomains: Tuple[SubdomainRecovery, ...]

    @property
    def ecr_neumann(self: Self) -> np.ndarray:
        """Per subdomain `E_cr(u_N, sigma_hat)`."""
        return np.array([s.ecr_neumann for s in self.subdomains])

    @property
    def w_energy(self: Self) -> float:
        """`sum_s |||w^(s)|||^2`."""
        return float(sum(s.w_energy for s in self.subdomains))

    @property
    def degenerate(self: Self) -> bool:
        """Whether `w` vanishes identically."""
        return self.w_energy <= 0.0

    @property
    def admissibility_residual(self: Self) -> float:
        """Largest relative equilibrium residual over the subdomains."""
        return max((s.admissibility_residual for s in self.subdomains), default=0.0)


def _admissibility(
    assembler: PatchAssembler, stress: ElementStress, interface_load: np.ndarray, load_case: int
) -> Tuple[float, np.ndarray]:
    fine = assembler.refinement.fine
    areas = fine.areas
    internal_local = areas[:, None] * np.einsum("mkj,mk->mj", assembler.fine_strain_operator, stress.values)
    internal = np.zeros(fine.n_dofs)
    np.add.at(internal, (2 * fine.elements[..., None] + np.arange(2)).reshape(-1, 6), internal_local)
    external = assembler.fine_.force[:, load_case] + interface_load
    free = ~np.repeat(assembler.fine_.dirichlet_nodes, 2)
    witness = np.where(free, internal - external, 0.0)
    scale = max(float(np.abs(external).max(initial=0.0)), float(np.abs(internal).max(initial=0.0)), 1e-300)
    return float(np.abs(witness).max(initial=0.0)) / scale, witness


def recover_subdomain(  # noqa: PLR0913
    problem: SubdomainProblem,
    u_neumann: np.ndarray,
    tractions: np.ndarray,
    *,
    r: int = DEFAULT_PATCH_REFINEMENT,
    load_case: int = 0,
    check: bool = True,
) -> SubdomainRecovery:
    """Runs every star-patch problem of a subdomain and assembles `sigma_hat`, `w` and the ECR of `u_N`.

    Raises:
        AdmissibilityError: If `check` and the equilibrium residual of `sigma_hat` exceeds `1e-8` relative.
    """
    assembler = PatchAssembler(problem=problem, u_source=u_neumann, tractions=tractions, r=r, load_case=load_case)
    patches = [assembler.solve(v) for v in range(problem.mesh.n_nodes)]
    stress = build_sa_stress(assembler, patches)
    w, w_energy = build_w(assembler, patches)
    if w_energy <= 0.0:
        _LOGGER.warning("Subdomain %s has no non-interface patch contribution; w vanishes", problem.index)

    interface_load = assembler.interface_load()
    residual, witness = _admissibility(assembler, stress, interface_load, load_case)
    if check and residual > ADMISSIBILITY_TOLERANCE:
        msg = f"Recovered stress of subdomain {problem.index} is not admissible (residual {residual:.3e})."
        raise AdmissibilityError(msg, residual=residual, witness=witness)

    correction = _fine_strain_correction(assembler, patches)
    fine = assembler.refinement.fine
    q = np.einsum("mi,ij,mj->m", correction, assembler.hooke_, correction)
    ecr = float(np.sqrt(max(float(np.sum(fine.areas * q)), 0.0)))
    return SubdomainRecovery(
        index=problem.index,
        problem=problem,
        r=r,
        load_case=load_case,
        sa_stress=stress,
        w=w,
        w_energy=w_energy,
        ecr_neumann=ecr,
        admissibility_residual=residual,
        interface_load=interface_load,
    )


def recover(
    problems: Sequence[SubdomainProblem],
    algebra: InterfaceAlgebra,
    fields: IterationFields,
    *,
    r: int = DEFAULT_PATCH_REFINEMENT,
    check: bool = True,
) -> AdmissibleRecovery:
    """Builds the admissible recovery of every subdomain from the fields of one iteration.

    Arguments:
        problems: Subdomain problems.
        algebra: Interface algebra.
        fields: `u_N` and `lambda_N` of the iteration.
        r: Subdivision factor of the star patches.
        check: Whether to certify static admissibility.
    """
    tractions = interface_tractions(problems, algebra, fields)
    subdomains = tuple(
        recover_subdomain(p, u, t, r=r, load_case=fields.load_case, check=check)
        for p, u, t in zip(problems, fields.u_neumann, tractions)
    )
    recovery = AdmissibleRecovery(iteration=fields.iteration, load_case=fields.load_case, subdomains=subdomains)
    _LOGGER.debug(
        "Recovered iteration %s, case %s: theta_discr %.6e", fields.iteration, fields.load_case,
        float(np.sqrt(np.sum(recovery.ecr_neumann**2))),
    )
    return recovery
