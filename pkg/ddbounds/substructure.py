from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from functools import cached_property
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy import linalg
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from ddbounds.fem import DEFAULT_QUADRATURE_DEGREE
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.fem import assemble_load
from ddbounds.fem import assemble_stiffness
from ddbounds.fem import dirichlet_data
from ddbounds.mesh import Mesh
from ddbounds.mesh import Partition
from ddbounds.mesh import Refinement
from ddbounds.mesh import subdivide
from ddbounds.utils._errors import DisconnectedSubdomainError
from ddbounds.utils._errors import IncompatibleLoadError

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

COMPATIBILITY_TOLERANCE = 1e-8


class FineOperators(NamedTuple):
    """A subdivided local mesh with its assembled operators; `dirichlet_nodes` is a fine node mask."""

    refinement: Refinement
    stiffness: sparse.csr_matrix
    force: np.ndarray
    dirichlet_nodes: np.ndarray


class _Factor:
    """Thin wrapper around `splu` that accepts empty systems and 2D right-hand sides."""

    def __init__(self: Self, matrix: sparse.spmatrix) -> None:
        self.size_ = matrix.shape[0]
        self.lu_ = splu(sparse.csc_matrix(matrix)) if self.size_ else None

    def solve(self: Self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.lu_ is None:
            return np.zeros_like(rhs)
        return self.lu_.solve(np.ascontiguousarray(rhs))


def rigid_body_modes(nodes: np.ndarray) -> np.ndarray:
    """Two translations and the rotation about the centroid, interleaved, shape `(2 n, 3)`."""
    center = nodes.mean(axis=0)
    n = nodes.shape[0]
    modes = np.zeros((2 * n, 3))
    modes[0::2, 0] = 1.0
    modes[1::2, 1] = 1.0
    modes[0::2, 2] = -(nodes[:, 1] - center[1])
    modes[1::2, 2] = nodes[:, 0] - center[0]
    return modes


@dataclass(frozen=True, eq=False)
class SubdomainProblem:
    """Local elasticity problem of one subdomain.

    The local node numbering puts interface nodes first. Local dofs are split into three sets:

    - `b`: interface dofs that are not Dirichlet constrained (the trace);
    - `i`: interior free dofs;
    - `d`: Dirichlet dofs.

    The "free" ordering `r` is `b` followed by `i`. Load cases are stored column-wise, with the Dirichlet lift already
    moved to the right-hand side: `load_r = f[r] - K[r, d] u_d`.

    Arguments:
        index: Subdomain id.
        mesh: Local mesh; internal boundaries carry the tag `"interface"`.
        nodes: Global id of every local node.
        elements: Global id of every local element.
        material: The material.
        loads: The load sets, one per load case.
        stiffness: Local stiffness over all local dofs.
        force: Local force vectors, shape `(n_local_dofs, n_cases)`.
        dofs_b: Local trace dofs.
        dofs_i: Local interior free dofs.
        dofs_d: Local Dirichlet dofs.
        dirichlet_values: Prescribed values on `dofs_d`, shape `(n_d, n_cases)`.
        rigid_modes: Orthonormal basis of the kernel of `K_rr`, shape `(n_r, n_modes)`.
    """

    index: int
    mesh: Mesh
    nodes: np.ndarray
    elements: np.ndarray
    material: Material
    loads: Tuple[LoadSet, ...]
    stiffness: sparse.csr_matrix
    force: np.ndarray
    dofs_b: np.ndarray
    dofs_i: np.ndarray
    dofs_d: np.ndarray
    dirichlet_values: np.ndarray
    rigid_modes: np.ndarray
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE
    _fine: Dict[int, FineOperators] = field(default_factory=dict, repr=False)

    @property
    def n_b(self: Self) -> int:
        """Number of trace dofs."""
        return int(self.dofs_b.size)

    @property
    def n_r(self: Self) -> int:
        """Number of free dofs."""
        return int(self.dofs_b.size + self.dofs_i.size)

    @property
    def n_cases(self: Self) -> int:
        """Number of load cases."""
        return int(self.force.shape[1])

    @property
    def is_floating(self: Self) -> bool:
        """Whether the subdomain has a non trivial kernel (no or too few Dirichlet dofs)."""
        return self.rigid_modes.shape[1] > 0

    @cached_property
    def dofs_r(self: Self) -> np.ndarray:
        """Free dofs in the `b`, `i` order."""
        return np.concatenate([self.dofs_b, self.dofs_i])

    @cached_property
    def global_dofs(self: Self) -> np.ndarray:
        """Global dof id of every local dof."""
        return (2 * self.nodes[:, None] + np.arange(2)).ravel()

    @cached_property
    def trace(self: Self) -> sparse.csr_matrix:
        """Boolean selector `t` of the trace dofs, shape `(n_b, n_local_dofs)`."""
        return sparse.csr_matrix(
            (np.ones(self.n_b), (np.arange(self.n_b), self.dofs_b)), shape=(self.n_b, self.mesh.n_dofs)
        )

    @cached_property
    def k_rr(self: Self) -> sparse.csr_matrix:
        """Stiffness restricted to the free dofs."""
        return self.stiffness[self.dofs_r][:, self.dofs_r].tocsr()

    @cached_property
    def load_r(self: Self) -> np.ndarray:
        """Free-dof right-hand sides with the Dirichlet lift, shape `(n_r, n_cases)`."""
        k_rd = self.stiffness[self.dofs_r][:, self.dofs_d]
        return self.force[self.dofs_r] - k_rd @ self.dirichlet_values

    @cached_property
    def _neumann_factor(self: Self) -> _Factor:
        modes = self.rigid_modes
        if modes.shape[1] == 0:
            return _Factor(self.k_rr)
        r = sparse.csr_matrix(modes)
        return _Factor(sparse.bmat([[self.k_rr, r], [r.T, None]], format="csc"))

    @cached_property
    def _interior_factor(self: Self) -> _Factor:
        n_b = self.n_b
        return _Factor(self.k_rr[n_b:, n_b:])

    def pseudo_inverse(self: Self, rhs: np.ndarray) -> np.ndarray:
        """Applies `K_rr^+` column-wise to the rigid-projected `rhs`; the result is orthogonal to the rigid modes."""
        rhs = np.asarray(rhs, dtype=float)
        block = rhs.reshape(self.n_r, -1)
        n_modes = self.rigid_modes.shape[1]
        padded = np.vstack([block, np.zeros((n_modes, block.shape[1]))])
        return self._neumann_factor.solve(padded)[: self.n_r].reshape(rhs.shape)

    def rigid_defect(self: Self, rhs: np.ndarray) -> np.ndarray:
        """Rigid components `R^T rhs` of a free-dof load, shape `(n_modes, ...)`."""
        return self.rigid_modes.T @ rhs

    def interior_solve(self: Self, trace: np.ndarray, rhs_r: np.ndarray) -> np.ndarray:
        """Free-dof field equal to `trace` on `b` and solving the interior equations `K_ii u_i = rhs_i - K_ib u_b`."""
        n_b = self.n_b
        u_b = np.asarray(trace, dtype=float).reshape(n_b, -1)
        rhs = np.asarray(rhs_r, dtype=float).reshape(self.n_r, -1)
        u_i = self._interior_factor.solve(rhs[n_b:] - self.k_rr[n_b:, :n_b] @ u_b)
        return np.vstack([u_b, u_i])

    def trace_reaction(self: Self, u_r: np.ndarray, rhs_r: np.ndarray) -> np.ndarray:
        """Interface reaction `(K_rr u_r - rhs)_b` of a free-dof field."""
        return (self.k_rr @ u_r - rhs_r)[: self.n_b]

    def schur(self: Self, trace: np.ndarray) -> np.ndarray:
        """Applies the primal Schur complement `S` to trace vectors (no load)."""
        u = self.interior_solve(trace, np.zeros((self.n_r, np.asarray(trace).reshape(self.n_b, -1).shape[1])))
        return (self.k_rr @ u)[: self.n_b]

    def to_local(self: Self, u_r: np.ndarray, cases: Optional[Sequence[int]] = None) -> np.ndarray:
        """Expands free-dof columns to all local dofs, inserting the Dirichlet values of the given load cases."""
        u_r = np.asarray(u_r, dtype=float).reshape(self.n_r, -1)
        cases = list(range(u_r.shape[1])) if cases is None else list(cases)
        out = np.zeros((self.mesh.n_dofs, u_r.shape[1]))
        out[self.dofs_r] = u_r
        out[self.dofs_d] = self.dirichlet_values[:, cases]
        return out

    def fine_operators(self: Self, r: int) -> FineOperators:
        """Cached subdivision of the local mesh by `r` with its stiffness, loads and Dirichlet nodes."""
        if r not in self._fine:
            refinement = subdivide(self.mesh, r)
            fine = refinement.fine
            dirichlet = fine.dirichlet_nodes.copy()
            dirichlet[np.unique(self.dofs_d // 2)] = True
            self._fine[r] = FineOperators(
                refinement=refinement,
                stiffness=assemble_stiffness(fine, self.material),
                force=np.column_stack([assemble_load(fine, ls, self.quadrature_degree) for ls in self.loads]),
                dirichlet_nodes=dirichlet,
            )
        return self._fine[r]

    def refinement(self: Self, r: int) -> Refinement:
        """Cached lattice subdivision of the local mesh."""
        return self.fine_operators(r).refinement


@dataclass(frozen=True, eq=False)
class InterfaceAlgebra:
    """Primal and dual assembly operators of a partition.

    The global interface holds the non-Dirichlet dofs of interface nodes. The primal operator `A^(s)` maps the trace
    of subdomain `s` into it (`primal_index[s]`). The dual operator `B^(s)` is signed boolean: every interface dof
    shared by subdomains `s_1 < ... < s_m` yields one connection row per consecutive pair `(s_k, s_k+1)` with `+1`
    on the lower and `-1` on the higher subdomain.

    Arguments:
        interface_dofs: Sorted global dof ids of the interface.
        primal_index: Per subdomain, the interface position of each trace dof.
        multiplicity: Number of subdomains sharing each interface dof.
        dual: Per subdomain, the sparse `(n_connections, n_b)` signed operator `B^(s)`.
        connection_dof: Interface position of the dof of each connection row.
        connection_pair: `(s_low, s_high)` of each connection row.
        interface_edges: Global mesh edges lying between two subdomains, shape `(k, 2)`.
        edge_owners: `(s_low, s_high)` of each interface edge.
    """

    interface_dofs: np.ndarray
    primal_index: Tuple[np.ndarray, ...]
    multiplicity: np.ndarray
    dual: Tuple[sparse.csr_matrix, ...]
    connection_dof: np.ndarray
    connection_pair: np.ndarray
    interface_edges: np.ndarray
    edge_owners: np.ndarray

    @property
    def n_interface(self: Self) -> int:
        """Size of the primal interface."""
        return int(self.interface_dofs.size)

    @property
    def n_connections(self: Self) -> int:
        """Number of dual connection rows."""
        return int(self.connection_dof.size)

    @property
    def n_subdomains(self: Self) -> int:
        """Number of subdomains."""
        return len(self.primal_index)

    def primal(self: Self, s: int) -> sparse.csr_matrix:
        """Boolean assembly operator `A^(s)`, shape `(n_interface, n_b)`."""
        idx = self.primal_index[s]
        return sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(self.n_interface, idx.size))

    def assemble_primal(self: Self, local: Sequence[np.ndarray]) -> np.ndarray:
        """`sum_s A^(s) v^(s)` for trace vectors (or column blocks)."""
        cols = np.asarray(local[0]).shape[1:] if local else ()
        out = np.zeros((self.n_interface, *cols))
        for idx, v in zip(self.primal_index, local):
            np.add.at(out, idx, v)
        return out

    def restrict_primal(self: Self, x: np.ndarray) -> List[np.ndarray]:
        """`A^(s)T x` for every subdomain."""
        return [x[idx] for idx in self.primal_index]

    def assemble_dual(self: Self, local: Sequence[np.ndarray]) -> np.ndarray:
        """`sum_s B^(s) v^(s)`."""
        cols = np.asarray(local[0]).shape[1:] if local else ()
        out = np.zeros((self.n_connections, *cols))
        for b, v in zip(self.dual, local):
            out += b @ v
        return out

    def restrict_dual(self: Self, lam: np.ndarray) -> List[np.ndarray]:
        """`B^(s)T lambda` for every subdomain."""
        return [b.T @ lam for b in self.dual]

    @cached_property
    def _connection_gram(self: Self) -> _Factor:
        gram = sum((b @ b.T for b in self.dual), sparse.csr_matrix((self.n_connections, self.n_connections)))
        return _Factor(gram)

    def solve_connection_gram(self: Self, lam: np.ndarray) -> np.ndarray:
        """Applies `(sum_s B^(s) B^(s)T)^-1`."""
        return self._connection_gram.solve(lam)

    def scaled_dual(self: Self, lam: np.ndarray) -> List[np.ndarray]:
        """`B_D^(s)T lambda` for the scaled operators `B_D = (B B^T)^-1 B`."""
        return self.restrict_dual(self.solve_connection_gram(lam))


class LocalSolution(NamedTuple):
    """A local displacement over all local dofs together with its rigid-body amplitudes."""

    displacement: np.ndarray
    rigid_amplitudes: np.ndarray


def _connected(mesh: Mesh) -> bool:
    pairs = mesh.edge_elements
    inner = pairs[pairs[:, 1] >= 0]
    m = mesh.n_elements
    graph = sparse.csr_matrix((np.ones(len(inner)), (inner[:, 0], inner[:, 1])), shape=(m, m))
    n_components, _ = connected_components(graph, directed=False)
    return n_components == 1


def _local_loads(mesh: Mesh, loads: LoadSet) -> LoadSet:
    tags = set(mesh.neumann_tags)
    return replace(loads, tractions={t: fn for t, fn in loads.tractions.items() if t in tags})


def _build_algebra(
    mesh: Mesh, partition: Partition, problems: Sequence[SubdomainProblem], interface_dofs: np.ndarray
) -> InterfaceAlgebra:
    primal_index = tuple(np.searchsorted(interface_dofs, p.global_dofs[p.dofs_b]) for p in problems)
    multiplicity = np.bincount(np.concatenate(primal_index), minlength=interface_dofs.size) if problems else np.zeros(0)

    g = np.concatenate(primal_index)
    s = np.concatenate([np.full(idx.size, p.index) for p, idx in zip(problems, primal_index)])
    pos = np.concatenate([np.arange(idx.size) for idx in primal_index])
    order = np.lexsort((s, g))
    g, s, pos = g[order], s[order], pos[order]
    lo = np.flatnonzero(g[1:] == g[:-1])
    hi = lo + 1
    rows = np.arange(lo.size)

    dual = []
    for p in problems:
        on_lo, on_hi = s[lo] == p.index, s[hi] == p.index
        data = np.concatenate([np.ones(on_lo.sum()), -np.ones(on_hi.sum())])
        r = np.concatenate([rows[on_lo], rows[on_hi]])
        c = np.concatenate([pos[lo][on_lo], pos[hi][on_hi]])
        dual.append(sparse.csr_matrix((data, (r, c)), shape=(lo.size, p.n_b)))

    both = mesh.edge_elements
    shared = both[:, 1] >= 0
    owner = partition.subdomain_of
    cut = np.flatnonzero(shared & (owner[both[:, 0]] != owner[np.where(shared, both[:, 1], 0)]))
    owners = np.sort(np.column_stack([owner[both[cut, 0]], owner[both[cut, 1]]]), axis=1)

    return InterfaceAlgebra(
        interface_dofs=interface_dofs,
        primal_index=primal_index,
        multiplicity=multiplicity,
        dual=tuple(dual),
        connection_dof=g[lo],
        connection_pair=np.column_stack([s[lo], s[hi]]),
        interface_edges=mesh.edges[cut],
        edge_owners=owners,
    )


def split_problem(  # noqa: PLR0913
    mesh: Mesh,
    partition: Partition,
    material: Material,
    loads: Union[LoadSet, Sequence[LoadSet]],
    *,
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE,
) -> Tuple[List[SubdomainProblem], InterfaceAlgebra]:
    """Builds the local problems and the interface algebra of a partitioned mesh.

    Each element integrates its stiffness and loads into its own subdomain only, so scattering the local matrices and
    vectors back reproduces the global assembly.

    Arguments:
        mesh: The global mesh.
        partition: The element to subdomain assignment.
        material: The material.
        loads: One load set, or several sharing the mesh and the partition (forward and adjoint).
        quadrature_degree: Degree of the load quadrature.

    Returns:
        The subdomain problems (ordered by id) and the interface algebra.

    Raises:
        DisconnectedSubdomainError: If the elements of a subdomain are not connected through shared edges. Pieces
            hinged at a single vertex count as disconnected, their Neumann matrix has a relative rotation mode.
    """
    load_sets: Tuple[LoadSet, ...] = (loads,) if isinstance(loads, LoadSet) else tuple(loads)
    if not load_sets:
        msg = "At least one load set is required."
        raise ValueError(msg)

    is_interface = np.zeros(mesh.n_nodes, dtype=bool)
    is_interface[partition.interface_nodes] = True
    dirichlet = mesh.dirichlet_nodes
    global_ud = np.zeros((mesh.n_dofs, len(load_sets)))
    d_nodes = np.flatnonzero(dirichlet)
    d_dofs = (2 * d_nodes[:, None] + np.arange(2)).ravel()
    for c, ls in enumerate(load_sets):
        global_ud[d_dofs, c] = dirichlet_data(mesh, ls)

    problems: List[SubdomainProblem] = []
    for s in range(partition.n_subdomains):
        elements = partition.elements_of(s)
        used = np.unique(mesh.elements[elements])
        order = np.concatenate([used[is_interface[used]], used[~is_interface[used]]])
        sub, nodes = mesh.restrict(elements, order)
        if not _connected(sub):
            msg = f"Subdomain {s} is not connected through shared edges."
            raise DisconnectedSubdomainError(msg, subdomain=s)

        local_loads = tuple(_local_loads(sub, ls) for ls in load_sets)
        stiffness = assemble_stiffness(sub, material)
        force = np.column_stack([assemble_load(sub, ls, quadrature_degree) for ls in local_loads])

        node_kind = np.where(dirichlet[nodes], 2, np.where(is_interface[nodes], 0, 1))
        dof_kind = np.repeat(node_kind, 2)
        dofs_b, dofs_i, dofs_d = (np.flatnonzero(dof_kind == k) for k in range(3))
        global_dofs = (2 * nodes[:, None] + np.arange(2)).ravel()

        modes = rigid_body_modes(sub.nodes)
        kernel = linalg.null_space(modes[dofs_d]) if dofs_d.size else np.eye(3)
        rigid = modes[np.concatenate([dofs_b, dofs_i])] @ kernel
        if rigid.shape[1]:
            rigid, _ = np.linalg.qr(rigid)

        problems.append(
            SubdomainProblem(
                index=s,
                mesh=sub,
                nodes=nodes,
                elements=elements,
                material=material,
                loads=local_loads,
                stiffness=stiffness,
                force=force,
                dofs_b=dofs_b,
                dofs_i=dofs_i,
                dofs_d=dofs_d,
                dirichlet_values=global_ud[global_dofs[dofs_d]],
                rigid_modes=rigid,
                quadrature_degree=quadrature_degree,
            )
        )

    interface_nodes = partition.interface_nodes[~dirichlet[partition.interface_nodes]]
    interface_dofs = (2 * interface_nodes[:, None] + np.arange(2)).ravel()
    algebra = _build_algebra(mesh, partition, problems, interface_dofs)
    n_floating = sum(p.rigid_modes.shape[1] == 3 for p in problems)  # noqa: PLR2004
    _LOGGER.info(
        "Split %s elements into %s subdomains (%s floating), %s interface dofs",
        mesh.n_elements,
        len(problems),
        n_floating,
        algebra.n_interface,
    )
    return problems, algebra


def local_neumann_solve(
    problem: SubdomainProblem,
    interface_traction: np.ndarray,
    *,
    rigid_amplitudes: Optional[np.ndarray] = None,
    load_case: int = 0,
) -> LocalSolution:
    """Solves `K u = f + t^T lambda` on a subdomain.

    On a floating subdomain the solution is fixed up to a rigid body motion: the returned field is the one orthogonal
    to the rigid modes plus `R rigid_amplitudes`.

    Arguments:
        problem: The subdomain problem.
        interface_traction: Trace vector `lambda` of length `n_b`.
        rigid_amplitudes: Optional rigid component to add.
        load_case: Which load case provides `f` and the Dirichlet values.

    Returns:
        The displacement over all local dofs and the rigid amplitudes actually used.

    Raises:
        IncompatibleLoadError: If the load has a rigid component above `1e-8` times its norm.
    """
    rhs = problem.load_r[:, load_case].copy()
    rhs[: problem.n_b] += np.asarray(interface_traction, dtype=float)
    defect = float(np.linalg.norm(problem.rigid_defect(rhs)))
    if defect > COMPATIBILITY_TOLERANCE * max(float(np.linalg.norm(rhs)), 1e-300):
        msg = f"Subdomain {problem.index} load is not self-equilibrated (rigid component {defect:.3e})."
        raise IncompatibleLoadError(msg, defect=defect)

    n_modes = problem.rigid_modes.shape[1]
    amplitudes = np.zeros(n_modes) if rigid_amplitudes is None else np.asarray(rigid_amplitudes, dtype=float)
    u_r = problem.pseudo_inverse(rhs) + problem.rigid_modes @ amplitudes
    return LocalSolution(problem.to_local(u_r, [load_case])[:, 0], amplitudes)


def local_dirichlet_solve(
    problem: SubdomainProblem, interface_displacement: np.ndarray, *, load_case: int = 0
) -> np.ndarray:
    """Solves the interior equations of a subdomain for a prescribed trace.

    Returns:
        The displacement over all local dofs; its trace equals `interface_displacement` exactly.
    """
    trace = np.asarray(interface_displacement, dtype=float).reshape(problem.n_b, 1)
    u_r = problem.interior_solve(trace, problem.load_r[:, [load_case]])
    return problem.to_local(u_r, [load_case])[:, 0]
