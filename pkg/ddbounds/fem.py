from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Tuple
from typing import Union
from typing import get_args

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from ddbounds.mesh import Mesh
from ddbounds.mesh import Refinement
from ddbounds.quadrature import edge_rule
from ddbounds.quadrature import map_triangles
from ddbounds.utils._errors import SingularSystemError
from ddbounds.utils._types import Hypothesis
from ddbounds.utils._types import VectorFunction

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

_hypothesis_values = get_args(Hypothesis)

DEFAULT_QUADRATURE_DEGREE = 8


@dataclass(frozen=True)
class Material:
    """Isotropic linear elastic material.

    Strains and stresses use the Voigt convention `(xx, yy, xy)` with engineering shear strain `2 e_xy`, so that
    `sigma : eps` is the plain dot product of the Voigt vectors.

    Arguments:
        young_modulus: Young modulus `E`.
        poisson_ratio: Poisson coefficient `nu`.
        hypothesis: Either `"plane_strain"` or `"plane_stress"`.

    Raises:
        ValueError: If `E <= 0`, `nu` is outside `(-1, 0.5)` or the hypothesis is unknown.
    """

    __slots__ = ("young_modulus", "poisson_ratio", "hypothesis")

    young_modulus: float
    poisson_ratio: float
    hypothesis: Hypothesis

    def __post_init__(self: Self) -> None:
        """Post init used to validate the `Material` instance attributes."""
        errors = []
        if not self.young_modulus > 0:
            errors.append(f"`young_modulus` must be strictly positive. Found {self.young_modulus}")
        if not -1.0 < self.poisson_ratio < 0.5:  # noqa: PLR2004
            errors.append(f"`poisson_ratio` must lie in (-1, 0.5). Found {self.poisson_ratio}")
        if self.hypothesis not in _hypothesis_values:
            errors.append(f"`hypothesis` must be one of {_hypothesis_values}. Found {self.hypothesis}")
        if errors:
            msg = "\n".join(errors)
            raise ValueError(msg)

    @property
    def hooke(self: Self) -> np.ndarray:
        """The 3x3 Voigt Hooke matrix."""
        e, nu = self.young_modulus, self.poisson_ratio
        if self.hypothesis == "plane_strain":
            c = e / ((1.0 + nu) * (1.0 - 2.0 * nu))
            return c * np.array([[1.0 - nu, nu, 0.0], [nu, 1.0 - nu, 0.0], [0.0, 0.0, 0.5 * (1.0 - 2.0 * nu)]])
        c = e / (1.0 - nu**2)
        return c * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]])

    @property
    def compliance(self: Self) -> np.ndarray:
        """Inverse of the Hooke matrix."""
        return np.linalg.inv(self.hooke)


def default_material() -> Material:
    """Unit Young modulus, Poisson coefficient 0.3, plane strain."""
    return Material(young_modulus=1.0, poisson_ratio=0.3, hypothesis="plane_strain")


@dataclass(frozen=True, eq=False)
class LoadSet:
    """Data of a linear elasticity problem.

    The linear form is `L(v) = int f.v + sum_tags int_tag g.v + sum_regions int_region sigma_0 : eps(v)`.

    Arguments:
        body_force: Function `(x, y) -> (2, ...)` array, or `None` for no body force.
        tractions: Map from `"neumann:<name>"` tags to traction functions.
        dirichlet_values: Prescribed displacement on `"dirichlet"` nodes; `None` means zero.
        prestress: Map from region labels to a constant Voigt stress `sigma_0`; this is how linear extractors of
            quantities of interest enter an adjoint problem.
    """

    body_force: Optional[VectorFunction] = None
    tractions: Mapping[str, VectorFunction] = field(default_factory=dict)
    dirichlet_values: Optional[VectorFunction] = None
    prestress: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self: Self) -> None:
        """Post init used to validate traction tags and prestress shapes."""
        bad = [t for t in self.tractions if not t.startswith("neumann:")]
        if bad:
            msg = f"Traction tags must start with 'neumann:'. Found {bad}"
            raise ValueError(msg)
        prestress = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in self.prestress.items()}
        if any(v.shape != (3,) for v in prestress.values()):
            msg = "Prestress values must be Voigt vectors of length 3."
            raise ValueError(msg)
        object.__setattr__(self, "prestress", prestress)


@dataclass(frozen=True, eq=False)
class NodalField:
    """A P1 displacement field: interleaved nodal values on a mesh."""

    mesh: Mesh
    vector: np.ndarray

    def __post_init__(self: Self) -> None:
        """Post init used to validate the length of `vector`."""
        vector = np.asarray(self.vector, dtype=float).reshape(-1)
        if vector.size != self.mesh.n_dofs:
            msg = f"A nodal field on this mesh needs {self.mesh.n_dofs} values. Found {vector.size}"
            raise ValueError(msg)
        object.__setattr__(self, "vector", vector)

    @property
    def values(self: Self) -> np.ndarray:
        """Per node 2-vectors, shape `(n, 2)`."""
        return self.vector.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class ElementStress:
    """Element-wise constant Voigt stress `(s_xx, s_yy, s_xy)`, shape `(m, 3)`."""

    values: np.ndarray

    def __post_init__(self: Self) -> None:
        """Post init used to validate shape and finiteness."""
        values = np.asarray(self.values, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(values)):
            msg = "Stress entries must be finite."
            raise ValueError(msg)
        object.__setattr__(self, "values", values)


class DirectSolution(NamedTuple):
    """Output of `solve_dirichlet_direct`."""

    displacement: np.ndarray
    reactions: np.ndarray
    dirichlet_dofs: np.ndarray


class ExactFields(NamedTuple):
    """Pointwise values of the analytic benchmark: displacement, strain, stress and body force."""

    displacement: np.ndarray
    strain: np.ndarray
    stress: np.ndarray
    body_force: np.ndarray


def evaluate_vector(fn: VectorFunction, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluates a vector function and broadcasts its result to `(2, *x.shape)`."""
    return np.broadcast_to(np.asarray(fn(x, y), dtype=float), (2, *np.shape(x)))


def element_gradients(nodes: np.ndarray, elements: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Areas and gradients of the barycentric shape functions.

    Returns:
        Tuple `(areas, grads)` with shapes `(m,)` and `(m, 3, 2)`.
    """
    x = nodes[elements]
    e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    xn, yn = x[..., 0], x[..., 1]
    b = np.roll(yn, -1, axis=1) - np.roll(yn, -2, axis=1)
    c = np.roll(xn, -2, axis=1) - np.roll(xn, -1, axis=1)
    grads = np.stack([b, c], axis=-1) / det[:, None, None]
    return 0.5 * det, grads


def strain_displacement(grads: np.ndarray) -> np.ndarray:
    """Strain-displacement matrices `B` of shape `(m, 3, 6)` for element dofs `(u0x, u0y, u1x, u1y, u2x, u2y)`."""
    m = grads.shape[0]
    b = np.zeros((m, 3, 6))
    b[:, 0, 0::2] = grads[..., 0]
    b[:, 1, 1::2] = grads[..., 1]
    b[:, 2, 0::2] = grads[..., 1]
    b[:, 2, 1::2] = grads[..., 0]
    return b


def element_dofs(elements: np.ndarray) -> np.ndarray:
    """Interleaved global dofs of every element, shape `(m, 6)`."""
    return (2 * elements[:, :, None] + np.arange(2)[None, None, :]).reshape(-1, 6)


def element_stiffness(mesh: Mesh, material: Material) -> np.ndarray:
    """Element stiffness matrices, shape `(m, 6, 6)`."""
    areas, grads = element_gradients(mesh.nodes, mesh.elements)
    if np.any(areas <= 0):
        msg = f"Degenerate elements {np.flatnonzero(areas <= 0)[:10].tolist()}"
        raise ValueError(msg)
    b = strain_displacement(grads)
    return areas[:, None, None] * np.einsum("mki,kl,mlj->mij", b, material.hooke, b)


def scatter_matrix(mesh: Mesh, local: np.ndarray) -> sparse.csr_matrix:
    """Assembles element matrices of shape `(m, 6, 6)` into a sparse global matrix."""
    dofs = element_dofs(mesh.elements)
    rows = np.broadcast_to(dofs[:, :, None], local.shape)
    cols = np.broadcast_to(dofs[:, None, :], local.shape)
    return sparse.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(mesh.n_dofs, mesh.n_dofs)
    ).tocsr()


def assemble_stiffness(mesh: Mesh, material: Material) -> sparse.csr_matrix:
    """Assembles the global P1 stiffness matrix.

    Arguments:
        mesh: The mesh.
        material: The material.

    Returns:
        The symmetric stiffness matrix, singular with the three rigid body modes in its kernel.

    Raises:
        ValueError: If some element has a non-positive area.
    """
    k = scatter_matrix(mesh, element_stiffness(mesh, material))
    return (0.5 * (k + k.T)).tocsr()


def assemble_load(mesh: Mesh, loads: LoadSet, quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE) -> np.ndarray:
    """Assembles the generalized force vector `f_i = L(phi_i)`.

    Arguments:
        mesh: The mesh.
        loads: The load set.
        quadrature_degree: Degree of exactness of the element and edge rules.

    Returns:
        The force vector of length `2 n`.

    Raises:
        ValueError: If `quadrature_degree < 1`, if a traction tag is absent from the mesh boundary or if a prestress
            region is not a region of the mesh.
    """
    if quadrature_degree < 1:
        msg = f"`quadrature_degree` must be at least 1. Found {quadrature_degree}"
        raise ValueError(msg)

    f = np.zeros(mesh.n_dofs)
    dofs = element_dofs(mesh.elements)

    if loads.body_force is not None:
        x, y, weights, lam = map_triangles(mesh.nodes[mesh.elements], quadrature_degree)
        values = evaluate_vector(loads.body_force, x, y)
        np.add.at(f, dofs, np.einsum("mq,qa,cmq->mac", weights, lam, values).reshape(-1, 6))

    unknown = sorted(set(loads.tractions) - set(mesh.neumann_tags))
    if unknown:
        msg = f"Unknown traction tags {unknown}. Mesh Neumann tags are {list(mesh.neumann_tags)}"
        raise ValueError(msg)

    t, w = edge_rule(quadrature_degree)
    phi = np.column_stack([1.0 - t, t])
    for tag, fn in loads.tractions.items():
        selected = np.array([bt == tag for bt in mesh.boundary_tags], dtype=bool)
        edges = mesh.boundary_edges[selected]
        xa, xb = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
        pts = xa[:, None, :] + t[None, :, None] * (xb - xa)[:, None, :]
        length = np.linalg.norm(xb - xa, axis=1)
        g = evaluate_vector(fn, pts[..., 0], pts[..., 1])
        fe = np.einsum("k,q,qa,ckq->kac", length, w, phi, g)
        np.add.at(f, (2 * edges[:, :, None] + np.arange(2)).reshape(-1, 4), fe.reshape(-1, 4))

    if loads.prestress:
        areas, grads = element_gradients(mesh.nodes, mesh.elements)
        b = strain_displacement(grads)
        for label, sigma in loads.prestress.items():
            if label not in mesh.region_tags:
                msg = f"Unknown region `{label}`. Mesh regions are {sorted(mesh.region_tags)}"
                raise ValueError(msg)
            ids = mesh.region_tags[label]
            np.add.at(f, dofs[ids], areas[ids, None] * np.einsum("mkj,k->mj", b[ids], sigma))
    return f


def element_prestress(mesh: Mesh, loads: LoadSet) -> np.ndarray:
    """Element-wise prestress `sigma_0`, shape `(m, 3)` (zero outside the prestressed regions)."""
    out = np.zeros((mesh.n_elements, 3))
    for label, sigma in loads.prestress.items():
        out[mesh.region_tags.get(label, np.zeros(0, dtype=np.int64))] += sigma
    return out


def dirichlet_dofs(mesh: Mesh) -> np.ndarray:
    """Sorted dofs of the nodes on `"dirichlet"` edges."""
    nodes = np.flatnonzero(mesh.dirichlet_nodes)
    return (2 * nodes[:, None] + np.arange(2)).ravel()


def dirichlet_data(mesh: Mesh, loads: LoadSet) -> np.ndarray:
    """Prescribed values on `dirichlet_dofs(mesh)`, in the same order."""
    nodes = np.flatnonzero(mesh.dirichlet_nodes)
    if loads.dirichlet_values is None:
        return np.zeros(2 * nodes.size)
    values = evaluate_vector(loads.dirichlet_values, mesh.nodes[nodes, 0], mesh.nodes[nodes, 1])
    return values.T.ravel()


def solve_dirichlet_direct(
    K: sparse.spmatrix,
    f: np.ndarray,
    dirichlet_dofs: np.ndarray,
    dirichlet_values: Optional[np.ndarray] = None,
) -> DirectSolution:
    """Solves `K u = f + lambda_d` by elimination of the Dirichlet dofs.

    Arguments:
        K: Unconstrained stiffness matrix.
        f: Force vector.
        dirichlet_dofs: Constrained dofs.
        dirichlet_values: Values on the constrained dofs (zero when omitted).

    Returns:
        The displacement and the nodal reactions `lambda_d = K_dr u_r + K_dd u_d - f_d`.

    Raises:
        SingularSystemError: If a connected component of the stiffness graph carries no Dirichlet dof or the
            factorization fails.
    """
    n = K.shape[0]
    d = np.asarray(dirichlet_dofs, dtype=np.int64)
    u_d = np.zeros(d.size) if dirichlet_values is None else np.asarray(dirichlet_values, dtype=float)
    K = sparse.csr_matrix(K)

    n_components, labels = connected_components(K, directed=False)
    supported = np.unique(labels[d]) if d.size else np.zeros(0, dtype=np.int64)
    if supported.size < n_components:
        msg = f"{n_components - supported.size} connected components have no Dirichlet dof."
        raise SingularSystemError(msg)

    free = np.setdiff1d(np.arange(n), d)
    k_rr = K[free][:, free].tocsc()
    rhs = f[free] - K[free][:, d] @ u_d
    try:
        u_r = splu(k_rr).solve(rhs)
    except RuntimeError as exc:
        msg = f"Constrained stiffness is singular: {exc}"
        raise SingularSystemError(msg) from exc

    u = np.zeros(n)
    u[free], u[d] = u_r, u_d
    reactions = K[d] @ u - f[d]
    _LOGGER.debug("Direct solve with %s free and %s Dirichlet dofs", free.size, d.size)
    return DirectSolution(displacement=u, reactions=reactions, dirichlet_dofs=d)


def strains(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Element-wise Voigt strains of a P1 field, shape `(m, 3)`."""
    _, grads = element_gradients(mesh.nodes, mesh.elements)
    return np.einsum("mkj,mj->mk", strain_displacement(grads), np.asarray(u)[element_dofs(mesh.elements)])


def stresses(mesh: Mesh, material: Material, u: np.ndarray) -> ElementStress:
    """Element-wise stresses `H eps(u)`."""
    return ElementStress(strains(mesh, u) @ material.hooke.T)


def energy_norm(
    mesh: Mesh,
    material: Material,
    value: Union[NodalField, ElementStress, np.ndarray],
    elements: Optional[np.ndarray] = None,
) -> float:
    """Energy norm of a displacement field or of a stress field, optionally restricted to some elements.

    For a displacement it is `sqrt(int eps : H : eps)`, for a stress `sqrt(int sigma : H^-1 : sigma)`.

    Arguments:
        mesh: The mesh on which `value` lives.
        material: The material.
        value: A `NodalField`, an interleaved nodal vector or an `ElementStress`.
        elements: Optional subset of elements.
    """
    areas = mesh.areas
    if isinstance(value, ElementStress):
        q = np.einsum("mi,ij,mj->m", value.values, material.compliance, value.values)
    else:
        vector = value.vector if isinstance(value, NodalField) else np.asarray(value)
        eps = strains(mesh, vector)
        q = np.einsum("mi,ij,mj->m", eps, material.hooke, eps)
    sl = slice(None) if elements is None else np.asarray(elements)
    return float(np.sqrt(max(float(np.sum(areas[sl] * q[sl])), 0.0)))


def residual_functional(  # noqa: PLR0913
    mesh: Mesh,
    material: Material,
    loads: LoadSet,
    source: Union[NodalField, ElementStress, np.ndarray],
    test: Union[NodalField, np.ndarray],
    *,
    refinement: Optional[Refinement] = None,
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE,
) -> float:
    """Evaluates the residual `R(w) = L(w) - int sigma(source) : eps(w)`.

    Arguments:
        mesh: The mesh of the source displacement.
        material: The material.
        loads: The load set defining `L`.
        source: A displacement on `mesh` (whose stress is `H eps`), or a stress on the test mesh.
        test: The test field, on `mesh` or on `refinement.fine`.
        refinement: When given, the test field lives on the refined mesh.
        quadrature_degree: Degree of the load quadrature.

    Raises:
        ValueError: If the test field does not vanish on the Dirichlet boundary.
    """
    test_mesh = mesh if refinement is None else refinement.fine
    w = test.vector if isinstance(test, NodalField) else np.asarray(test, dtype=float)

    d = dirichlet_dofs(test_mesh)
    if d.size and np.max(np.abs(w[d])) > 1e-14 * max(float(np.max(np.abs(w))), 1e-300):
        msg = "The test field must vanish on the Dirichlet boundary."
        raise ValueError(msg)

    if isinstance(source, ElementStress):
        sigma = source.values
    else:
        u = source.vector if isinstance(source, NodalField) else np.asarray(source, dtype=float)
        if refinement is not None:
            u = refinement.prolong(u)
        sigma = stresses(test_mesh, material, u).values

    work = float(np.sum(test_mesh.areas * np.einsum("mk,mk->m", sigma, strains(test_mesh, w))))
    return float(w @ assemble_load(test_mesh, loads, quadrature_degree)) - work


def evaluate_exact_benchmark(
    x: np.ndarray,
    y: np.ndarray,
    half_width: float = 1.0,
    material: Optional[Material] = None,
) -> ExactFields:
    """Analytic solution of the square benchmark on `[-3 l, 3 l]^2`.

    With `a = 3 l` and `P = (x^2 - a^2)(y^2 - a^2)` the displacement is `u = P ((y - a)^2, y + a)`, which vanishes on
    the whole boundary; strains, stresses and the body force `f = -div sigma` are the exact derivatives.

    Arguments:
        x: Abscissae.
        y: Ordinates, same shape as `x`.
        half_width: The length `l`.
        material: The material, plane strain `E = 1`, `nu = 0.3` by default.

    Returns:
        `ExactFields` with arrays of shape `(2, ...)`, `(3, ...)`, `(3, ...)` and `(2, ...)`.
    """
    hooke = (material or default_material()).hooke
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    a = 3.0 * half_width

    p = (x**2 - a**2) * (y**2 - a**2)
    px, py = 2.0 * x * (y**2 - a**2), 2.0 * y * (x**2 - a**2)
    pxx, pyy, pxy = 2.0 * (y**2 - a**2), 2.0 * (x**2 - a**2), 4.0 * x * y
    q, dq = (y - a) ** 2, 2.0 * (y - a)
    s = y + a

    ux, uy = p * q, p * s
    ux_x, ux_y = px * q, py * q + p * dq
    uy_x, uy_y = px * s, py * s + p
    ux_xx, ux_xy, ux_yy = pxx * q, pxy * q + px * dq, pyy * q + 2.0 * py * dq + 2.0 * p
    uy_xx, uy_xy, uy_yy = pxx * s, pxy * s + px, pyy * s + 2.0 * py

    strain = np.stack([ux_x, uy_y, ux_y + uy_x])
    strain_x = np.stack([ux_xx, uy_xy, ux_xy + uy_xx])
    strain_y = np.stack([ux_xy, uy_yy, ux_yy + uy_xy])
    stress = np.einsum("ij,j...->i...", hooke, strain)
    stress_x = np.einsum("ij,j...->i...", hooke, strain_x)
    stress_y = np.einsum("ij,j...->i...", hooke, strain_y)
    body_force = -np.stack([stress_x[0] + stress_y[2], stress_x[2] + stress_y[1]])
    return ExactFields(np.stack([ux, uy]), strain, stress, body_force)


def exact_energy_error(  # noqa: PLR0913
    mesh: Mesh,
    material: Material,
    u: np.ndarray,
    exact_strain: Callable[[np.ndarray, np.ndarray], np.ndarray],
    degree: int = 10,
    elements: Optional[np.ndarray] = None,
) -> float:
    """Energy norm of `u_ex - u` computed with a quadrature exact to `degree`.

    Arguments:
        mesh: The mesh of `u`.
        material: The material.
        u: Interleaved nodal displacement.
        exact_strain: Function `(x, y) -> (3, ...)` Voigt strain of the exact solution.
        degree: Quadrature degree.
        elements: Optional subset of elements.
    """
    ids = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    x, y, weights, _ = map_triangles(mesh.nodes[mesh.elements[ids]], degree)
    diff = exact_strain(x, y) - strains(mesh, u)[ids].T[:, :, None]
    q = np.einsum("imq,ij,jmq->mq", diff, material.hooke, diff)
    return float(np.sqrt(max(float(np.sum(weights * q)), 0.0)))
