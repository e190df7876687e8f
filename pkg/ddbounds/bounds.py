from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import get_args

import numpy as np

from ddbounds.ddsolver import IterationFields
from ddbounds.fem import DEFAULT_QUADRATURE_DEGREE
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.fem import assemble_load
from ddbounds.fem import solve_dirichlet_direct
from ddbounds.mesh import Mesh
from ddbounds.mesh import Partition
from ddbounds.quadrature import map_triangles
from ddbounds.recovery import DEFAULT_PATCH_REFINEMENT
from ddbounds.recovery import AdmissibleRecovery
from ddbounds.recovery import recover
from ddbounds.substructure import InterfaceAlgebra
from ddbounds.substructure import SubdomainProblem
from ddbounds.substructure import split_problem
from ddbounds.utils._types import ExtractorKind

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

_extractor_values = get_args(ExtractorKind)

BOUNDS_COLUMNS = ("iter", "theta", "theta_discr", "rho", "rho_discr", "rho_alg", "rho_bis", "alpha")
GOAL_COLUMNS = (
    "mesh",
    "IH",
    "kappa",
    "bpinf",
    "bminf",
    "bpsup4",
    "bmsup4",
    "Iexm",
    "Iexp",
    "width",
    "precision",
)


@dataclass(frozen=True)
class BoundsRecord:
    """Global error bounds of one iteration.

    `theta` and `rho` bound the energy error of the continuous iterate `u_D` from above and below. `theta_discr` and
    `rho_discr` measure the discretization part, `rho_alg` the algebraic part and `rho_bis = rho_discr - alpha` is the
    separated lower bound, trivial while negative.

    Arguments:
        iteration: Iteration index; 0 is the initial iterate, reported but less relevant than iteration 1.
        theta: Upper bound `sqrt(sum E_cr(u_D, sigma_hat)^2)`.
        theta_discr: `sqrt(sum E_cr(u_N, sigma_hat)^2)`.
        rho: Lower bound `|R_D(w)| / |||w|||`.
        rho_discr: `|R_N(w)| / |||w|||`.
        rho_alg: `|a(u_D - u_N, w)| / |||w|||`.
        rho_bis: `rho_discr - alpha`.
        alpha: Energy distance between `u_N` and `u_D`.
        true_error: Exact energy error, when an analytic solution is known.
        degenerate: Whether `w` vanished, in which case every lower bound is reported as 0.

    Raises:
        ValueError: If a bound that must be non negative is negative.
    """

    iteration: int
    theta: float
    theta_discr: float
    rho: float
    rho_discr: float
    rho_alg: float
    rho_bis: float
    alpha: float
    true_error: Optional[float] = None
    degenerate: bool = False

    def __post_init__(self: Self) -> None:
        """Post init used to validate the signs of the bounds."""
        names = ("theta", "theta_discr", "rho", "rho_discr", "rho_alg", "alpha")
        errors = [f"`{n}` must be non negative. Found {getattr(self, n)}" for n in names if getattr(self, n) < 0]
        if errors:
            msg = "\n".join(errors)
            raise ValueError(msg)

    @property
    def upper_bound(self: Self) -> float:
        """Best available upper bound of the energy error of `u_D`."""
        return min(self.theta, self.alpha + self.theta_discr)

    @property
    def is_pre_iteration(self: Self) -> bool:
        """Whether the record belongs to the initial iterate."""
        return self.iteration == 0

    def to_row(self: Self, *, with_true_error: bool = False) -> Tuple[float, ...]:
        """Values in the order of `BOUNDS_COLUMNS`, followed by the true error if requested."""
        row = (
            float(self.iteration),
            self.theta,
            self.theta_discr,
            self.rho,
            self.rho_discr,
            self.rho_alg,
            self.rho_bis,
            self.alpha,
        )
        if with_true_error:
            row = (*row, np.nan if self.true_error is None else self.true_error)
        return row


@dataclass(frozen=True)
class GoalRecord:
    """Bounds on the exact value of a linear quantity of interest.

    The exact value satisfies `I_ex = I_H + correction + beta_plus / 4 - beta_minus / 4` where `beta_plus` and
    `beta_minus` are the squared energy norms of `kappa e +- e_adj / kappa`, enclosed by their `inf` and `sup` bounds.

    Arguments:
        i_h: `I_H`, the quantity evaluated on the forward iterate.
        kappa: Scaling factor of the parallelogram identity.
        beta_plus_inf: Lower bound of `beta_plus`.
        beta_minus_inf: Lower bound of `beta_minus`.
        beta_plus_sup4: Upper bound of `beta_plus`, divided by 4.
        beta_minus_sup4: Upper bound of `beta_minus`, divided by 4.
        correction: Galerkin correction `R_D(u_D_adj)`, zero at convergence.
        ihh2: Optional interval `I_H + I_HH2 -+ radius`.
        mesh: Index of the mesh (adaptive cycle) the record belongs to.

    Raises:
        ValueError: If `kappa <= 0` or a `beta` is negative.
    """

    i_h: float
    kappa: float
    beta_plus_inf: float
    beta_minus_inf: float
    beta_plus_sup4: float
    beta_minus_sup4: float
    correction: float = 0.0
    ihh2: Optional[Tuple[float, float]] = None
    mesh: int = 0

    def __post_init__(self: Self) -> None:
        """Post init used to validate `kappa` and the signs of the `beta` terms."""
        errors = []
        if not self.kappa > 0:
            errors.append(f"`kappa` must be strictly positive. Found {self.kappa}")
        names = ("beta_plus_inf", "beta_minus_inf", "beta_plus_sup4", "beta_minus_sup4")
        errors.extend(f"`{n}` must be non negative. Found {getattr(self, n)}" for n in names if getattr(self, n) < 0)
        if errors:
            msg = "\n".join(errors)
            raise ValueError(msg)

    @property
    def center(self: Self) -> float:
        """`I_H` plus the Galerkin correction."""
        return self.i_h + self.correction

    @property
    def lower(self: Self) -> float:
        """`I_ex^-`."""
        return self.center + 0.25 * self.beta_plus_inf - self.beta_minus_sup4

    @property
    def upper(self: Self) -> float:
        """`I_ex^+`."""
        return self.center + self.beta_plus_sup4 - 0.25 * self.beta_minus_inf

    @property
    def width(self: Self) -> float:
        """`I_ex^+ - I_ex^-`."""
        return self.upper - self.lower

    @property
    def precision(self: Self) -> float:
        """Width relative to `|I_H|`."""
        return _relative(self.width, self.i_h)

    @property
    def coarse_lower(self: Self) -> float:
        """Lower end of the interval obtained with both `beta_inf` set to 0."""
        return self.center - self.beta_minus_sup4

    @property
    def coarse_upper(self: Self) -> float:
        """Upper end of the interval obtained with both `beta_inf` set to 0."""
        return self.center + self.beta_plus_sup4

    @property
    def coarse_width(self: Self) -> float:
        """Width of the interval without `beta_inf`."""
        return self.coarse_upper - self.coarse_lower

    @property
    def coarse_precision(self: Self) -> float:
        """Precision of the interval without `beta_inf`."""
        return _relative(self.coarse_width, self.i_h)

    @property
    def width_reduction(self: Self) -> float:
        """Relative width reduction brought by the `beta_inf` terms."""
        return 1.0 - self.width / self.coarse_width if self.coarse_width > 0 else 0.0

    def contains(self: Self, value: float, *, slack: float = 0.0) -> bool:
        """Whether `value` lies in `[I_ex^-, I_ex^+]` up to an absolute slack."""
        return self.lower - slack <= value <= self.upper + slack

    def to_row(self: Self) -> Tuple[float, ...]:
        """Values in the order of `GOAL_COLUMNS`."""
        return (
            float(self.mesh),
            self.i_h,
            self.kappa,
            self.beta_plus_inf,
            self.beta_minus_inf,
            self.beta_plus_sup4,
            self.beta_minus_sup4,
            self.lower,
            self.upper,
            self.width,
            self.precision,
        )


def _relative(value: float, reference: float) -> float:
    return value / abs(reference) if reference != 0 else float("inf")


@dataclass(frozen=True, eq=False)
class QuantityOfInterest:
    """A linear quantity of interest `I(u) = int_omega sigma_extr : eps(u)`.

    Arguments:
        region: Region label of the mesh.
        kind: Extractor kind.
        area: `|omega|`.
        extractor: The constant Voigt extractor `sigma_extr`.
        loads: Adjoint load set, with homogeneous Dirichlet data.
        weights: Assembled adjoint load vector on the mesh the quantity was built on.
    """

    region: str
    kind: ExtractorKind
    area: float
    extractor: np.ndarray
    loads: LoadSet
    weights: np.ndarray = field(repr=False)

    def __call__(self: Self, u: np.ndarray) -> float:
        """`L_adj(u)` for an interleaved nodal field on the same mesh."""
        return float(self.weights @ np.asarray(u, dtype=float))

    def exact_value(self: Self, mesh: Mesh, exact_strain: np.ndarray, degree: int = 10) -> float:
        """Quantity of an analytic field, integrated by quadrature over the region elements.

        Arguments:
            mesh: A mesh carrying the region.
            exact_strain: Function `(x, y) -> (3, ...)` Voigt strain.
            degree: Quadrature degree.
        """
        ids = mesh.region_tags[self.region]
        x, y, weights, _ = map_triangles(mesh.nodes[mesh.elements[ids]], degree)
        strain = exact_strain(x, y)
        return float(np.sum(weights * np.einsum("i,imq->mq", self.extractor, strain)))


def extractor_qoi(
    mesh: Mesh,
    region: str,
    kind: ExtractorKind = "mean_sxx",
    *,
    material: Material,
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE,
) -> QuantityOfInterest:
    """Builds the adjoint loads and the evaluator of an extractor over a region.

    The mean of `sigma_xx` over `omega` is `(1 / |omega|) int_omega (H eps(u))_xx`, so the extractor is the first row of
    the Hooke matrix divided by the region area. It enters the adjoint problem as a prestress, with no body force and
    no traction; it is self-equilibrated.

    Raises:
        ValueError: If the region is unknown or empty, or the kind is unsupported.
    """
    if kind not in _extractor_values:
        msg = f"`kind` must be one of {_extractor_values}. Found {kind}"
        raise ValueError(msg)
    if region not in mesh.region_tags:
        msg = f"Unknown region `{region}`. Mesh regions are {sorted(mesh.region_tags)}"
        raise ValueError(msg)
    ids = mesh.region_tags[region]
    if ids.size == 0:
        msg = f"Region `{region}` has no element."
        raise ValueError(msg)

    area = float(mesh.areas[ids].sum())
    extractor = material.hooke[0] / area
    loads = LoadSet(prestress={region: extractor})
    return QuantityOfInterest(
        region=region,
        kind=kind,
        area=area,
        extractor=extractor,
        loads=loads,
        weights=assemble_load(mesh, loads, quadrature_degree),
    )


class UpperBounds(NamedTuple):
    """`theta` and `theta_discr`."""

    theta: float
    theta_discr: float


class LowerBounds(NamedTuple):
    """Lower bounds with the signed residual `R_D(w)`."""

    rho: float
    rho_discr: float
    rho_alg: float
    rho_bis: float
    degenerate: bool
    signed_residual: float


def _check_stamp(fields: IterationFields, recovery: AdmissibleRecovery) -> None:
    if fields.iteration != recovery.iteration or fields.load_case != recovery.load_case:
        msg = (
            f"Fields of iteration {fields.iteration} (case {fields.load_case}) do not match the recovery of iteration "
            f"{recovery.iteration} (case {recovery.load_case})."
        )
        raise ValueError(msg)


def _dirichlet_ecrs(fields: IterationFields, recovery: AdmissibleRecovery) -> np.ndarray:
    return np.array([s.ecr(u) for s, u in zip(recovery.subdomains, fields.u_dirichlet)])


def upper_bounds(fields: IterationFields, recovery: AdmissibleRecovery) -> UpperBounds:
    """Upper bounds `theta` (for `u_D`) and `theta_discr` (for `u_N`) from the recovered admissible stress.

    Raises:
        ValueError: If the recovery was not built from the same iteration and load case.
    """
    _check_stamp(fields, recovery)
    theta = float(np.sqrt(np.sum(_dirichlet_ecrs(fields, recovery) ** 2)))
    theta_discr = float(np.sqrt(np.sum(recovery.ecr_neumann**2)))
    return UpperBounds(theta, theta_discr)


def lower_bounds(fields: IterationFields, recovery: AdmissibleRecovery) -> LowerBounds:
    """Lower bounds from the continuous estimate `w`, which vanishes on the interface.

    Raises:
        ValueError: If the recovery was not built from the same iteration and load case.
    """
    _check_stamp(fields, recovery)
    if recovery.degenerate:
        _LOGGER.warning("Continuous estimate vanishes at iteration %s; lower bounds set to 0", fields.iteration)
        return LowerBounds(0.0, 0.0, 0.0, -fields.alpha, degenerate=True, signed_residual=0.0)

    r_d = sum(s.residual(u, s.w) for s, u in zip(recovery.subdomains, fields.u_dirichlet))
    r_n = sum(s.residual(u, s.w) for s, u in zip(recovery.subdomains, fields.u_neumann))
    norm = float(np.sqrt(recovery.w_energy))
    rho_discr = abs(r_n) / norm
    return LowerBounds(
        rho=abs(r_d) / norm,
        rho_discr=rho_discr,
        rho_alg=abs(r_n - r_d) / norm,
        rho_bis=rho_discr - fields.alpha,
        degenerate=False,
        signed_residual=float(r_d),
    )


def estimate(
    fields: IterationFields, recovery: AdmissibleRecovery, *, true_error: Optional[float] = None
) -> BoundsRecord:
    """Every global bound of one iteration."""
    upper = upper_bounds(fields, recovery)
    lower = lower_bounds(fields, recovery)
    record = BoundsRecord(
        iteration=fields.iteration,
        theta=upper.theta,
        theta_discr=upper.theta_discr,
        rho=lower.rho,
        rho_discr=lower.rho_discr,
        rho_alg=lower.rho_alg,
        rho_bis=lower.rho_bis,
        alpha=fields.alpha,
        true_error=true_error,
        degenerate=lower.degenerate,
    )
    _LOGGER.info(
        "Iteration %s, case %s: theta %.6e, rho %.6e, alpha %.3e",
        record.iteration,
        fields.load_case,
        record.theta,
        record.rho,
        record.alpha,
    )
    return record


def kappa(forward_ecrs: Sequence[float], adjoint_ecrs: Sequence[float]) -> float:
    """Optimal scaling `kappa = (sum E_adj^2 / sum E^2)^(1/4)` of the parallelogram identity.

    Raises:
        ValueError: If either sum vanishes; a zero forward error means the quantity is already exact.

    Examples:
        ```python
        from ddbounds.bounds import kappa

        kappa([1.0, 1.0], [1.0, 1.0])  # 1.0
        kappa([1.0], [4.0])  # 2.0
        ```
    """
    forward = float(np.sum(np.square(forward_ecrs)))
    adjoint = float(np.sum(np.square(adjoint_ecrs)))
    if not forward > 0:
        msg = "The forward error in constitutive relation vanishes: the quantity of interest is already exact."
        raise ValueError(msg)
    if not adjoint > 0:
        msg = "The adjoint error in constitutive relation vanishes."
        raise ValueError(msg)
    return float((adjoint / forward) ** 0.25)


def _check_pair(forward: AdmissibleRecovery, adjoint: AdmissibleRecovery) -> None:
    if len(forward.subdomains) != len(adjoint.subdomains):
        msg = "Forward and adjoint recoveries must share the substructuring."
        raise ValueError(msg)
    if any(f.r != a.r for f, a in zip(forward.subdomains, adjoint.subdomains)):
        msg = "Forward and adjoint recoveries must use the same patch refinement."
        raise ValueError(msg)


def _cross_ecr(
    forward: IterationFields,
    forward_recovery: AdmissibleRecovery,
    adjoint: IterationFields,
    adjoint_recovery: AdmissibleRecovery,
) -> float:
    total = 0.0
    subdomains = zip(forward_recovery.subdomains, adjoint_recovery.subdomains)
    for (f, a), u, v in zip(subdomains, forward.u_dirichlet, adjoint.u_dirichlet):
        gap, gap_adj = f.stress_gap(u), a.stress_gap(v)
        q = np.einsum("mi,ij,mj->m", gap, f.problem.material.compliance, gap_adj)
        total += float(np.sum(f.fine_mesh.areas * q))
    return total


def _quantity(adjoint_recovery: AdmissibleRecovery, forward: IterationFields) -> float:
    """`L_adj(u_D)` summed over the subdomain loads."""
    case = adjoint_recovery.load_case
    return float(sum(s.problem.force[:, case] @ u for s, u in zip(adjoint_recovery.subdomains, forward.u_dirichlet)))


def _galerkin_correction(
    forward_recovery: AdmissibleRecovery, forward: IterationFields, adjoint: IterationFields
) -> float:
    """`R_D(u_D_adj) = L(u_D_adj) - a(u_D, u_D_adj)` for a homogeneous adjoint iterate."""
    case = forward_recovery.load_case
    total = 0.0
    for s, u, v in zip(forward_recovery.subdomains, forward.u_dirichlet, adjoint.u_dirichlet):
        total += float(s.problem.force[:, case] @ v - v @ (s.problem.stiffness @ u))
    return total


def goal_interval(  # noqa: PLR0913
    i_h: float,
    kappa_value: float,
    beta_plus_inf: float,
    beta_minus_inf: float,
    beta_plus_sup: float,
    beta_minus_sup: float,
    *,
    correction: float = 0.0,
    mesh: int = 0,
) -> GoalRecord:
    """Assembles a `GoalRecord` from the four `beta` bounds (the `sup` ones undivided)."""
    return GoalRecord(
        i_h=i_h,
        kappa=kappa_value,
        beta_plus_inf=beta_plus_inf,
        beta_minus_inf=beta_minus_inf,
        beta_plus_sup4=0.25 * beta_plus_sup,
        beta_minus_sup4=0.25 * beta_minus_sup,
        correction=correction,
        mesh=mesh,
    )


def goal_bounds(  # noqa: PLR0913
    forward: IterationFields,
    forward_recovery: AdmissibleRecovery,
    adjoint: IterationFields,
    adjoint_recovery: AdmissibleRecovery,
    *,
    kappa_value: Optional[float] = None,
    with_ihh2: bool = True,
    mesh: int = 0,
) -> GoalRecord:
    """Guaranteed interval on the exact quantity of interest.

    The `sup` terms come from the error in constitutive relation of the combined admissible pairs
    `kappa (u_D, sigma_hat) +- (u_D_adj, sigma_hat_adj) / kappa`. The `inf` terms are residual quotients of
    `z = kappa w +- w_adj / kappa`, which vanish on the interface and are therefore globally admissible tests.

    Arguments:
        forward: Forward fields.
        forward_recovery: Recovery of the forward fields.
        adjoint: Adjoint fields, with homogeneous Dirichlet data.
        adjoint_recovery: Recovery of the adjoint fields.
        kappa_value: Scaling factor; the optimal one by default.
        with_ihh2: Whether to attach the `I_HH2` interval.
        mesh: Mesh index stored in the record.

    Raises:
        ValueError: On mismatched recoveries or an invalid `kappa`.
    """
    _check_stamp(forward, forward_recovery)
    _check_stamp(adjoint, adjoint_recovery)
    _check_pair(forward_recovery, adjoint_recovery)

    ecr = _dirichlet_ecrs(forward, forward_recovery)
    ecr_adj = _dirichlet_ecrs(adjoint, adjoint_recovery)
    k = kappa(ecr, ecr_adj) if kappa_value is None else float(kappa_value)
    if not k > 0:
        msg = f"`kappa_value` must be strictly positive. Found {k}"
        raise ValueError(msg)

    theta2, theta2_adj = float(np.sum(ecr**2)), float(np.sum(ecr_adj**2))
    cross = _cross_ecr(forward, forward_recovery, adjoint, adjoint_recovery)
    base = k**2 * theta2 + theta2_adj / k**2
    beta_plus_sup, beta_minus_sup = max(base + 2.0 * cross, 0.0), max(base - 2.0 * cross, 0.0)

    pairs = list(
        zip(forward_recovery.subdomains, adjoint_recovery.subdomains, forward.u_dirichlet, adjoint.u_dirichlet)
    )
    r_w = sum(f.residual(u, f.w) for f, _, u, _ in pairs)
    r_wa = sum(f.residual(u, a.w) for f, a, u, _ in pairs)
    ra_w = sum(a.residual(v, f.w) for f, a, _, v in pairs)
    ra_wa = sum(a.residual(v, a.w) for _, a, _, v in pairs)
    ww = forward_recovery.w_energy
    wa = sum(f.energy_product(f.w, a.w) for f, a, _, _ in pairs)
    aa = adjoint_recovery.w_energy

    betas_inf = []
    for sign in (1.0, -1.0):
        numerator = k * (k * r_w + sign * r_wa / k) + sign * (k * ra_w + sign * ra_wa / k) / k
        norm2 = k**2 * ww + 2.0 * sign * wa + aa / k**2
        betas_inf.append(numerator**2 / norm2 if norm2 > 0 else 0.0)

    i_h = _quantity(adjoint_recovery, forward)
    record = goal_interval(
        i_h,
        k,
        betas_inf[0],
        betas_inf[1],
        beta_plus_sup,
        beta_minus_sup,
        correction=_galerkin_correction(forward_recovery, forward, adjoint),
        mesh=mesh,
    )
    if with_ihh2:
        ihh2, radius = ihh2_bound(forward, forward_recovery, adjoint, adjoint_recovery)
        record = replace(record, ihh2=(i_h + ihh2 - radius, i_h + ihh2 + radius))
    _LOGGER.info(
        "Goal bounds: I_H %.6e, kappa %.4f, interval [%.6e, %.6e], precision %.4f",
        record.i_h,
        record.kappa,
        record.lower,
        record.upper,
        record.precision,
    )
    return record


def ihh2_bound(
    forward: IterationFields,
    forward_recovery: AdmissibleRecovery,
    adjoint: IterationFields,
    adjoint_recovery: AdmissibleRecovery,
) -> Tuple[float, float]:
    """Correction `I_HH2` and radius with `|I_ex - I_H - I_HH2| <= theta theta_adj / 2`.

    `I_HH2 = int (sigma_hat - H eps(u_D)) : H^-1 : (sigma_hat_adj + H eps(u_D_adj)) / 2`, evaluated on the refined
    recovery meshes.
    """
    _check_stamp(forward, forward_recovery)
    _check_stamp(adjoint, adjoint_recovery)
    _check_pair(forward_recovery, adjoint_recovery)
    total = 0.0
    subdomains = zip(forward_recovery.subdomains, adjoint_recovery.subdomains)
    for (f, a), u, v in zip(subdomains, forward.u_dirichlet, adjoint.u_dirichlet):
        gap = f.stress_gap(u)
        mean = a.sa_stress.values - 0.5 * a.stress_gap(v)
        q = np.einsum("mi,ij,mj->m", gap, f.problem.material.compliance, mean)
        total += float(np.sum(f.fine_mesh.areas * q))
    theta = float(np.sqrt(np.sum(_dirichlet_ecrs(forward, forward_recovery) ** 2)))
    theta_adj = float(np.sqrt(np.sum(_dirichlet_ecrs(adjoint, adjoint_recovery) ** 2)))
    return total, 0.5 * theta * theta_adj


def sequential_fields(
    mesh: Mesh,
    material: Material,
    loads: Sequence[LoadSet],
    *,
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE,
) -> Tuple[Tuple[IterationFields, ...], List[SubdomainProblem], InterfaceAlgebra]:
    """Direct solutions of every load set on a single subdomain, wrapped as converged fields.

    Returns:
        One `IterationFields` per load set, the single-subdomain problem and its empty interface, ready for `recover`.
    """
    partition = Partition.from_assignment(mesh, np.zeros(mesh.n_elements, dtype=np.int64))
    problems, algebra = split_problem(mesh, partition, material, loads, quadrature_degree=quadrature_degree)
    problem = problems[0]
    out = []
    for case in range(problem.n_cases):
        solution = solve_dirichlet_direct(
            problem.stiffness, problem.force[:, case], problem.dofs_d, problem.dirichlet_values[:, case]
        )
        out.append(
            IterationFields(
                iteration=0,
                load_case=case,
                u_dirichlet=(solution.displacement,),
                u_neumann=(solution.displacement,),
                reactions=(np.zeros(0),),
                alpha=0.0,
                residual_norm=0.0,
            )
        )
    return tuple(out), problems, algebra


def sequential_estimate(
    mesh: Mesh,
    material: Material,
    loads: LoadSet,
    *,
    r: int = DEFAULT_PATCH_REFINEMENT,
    true_error: Optional[float] = None,
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE,
) -> BoundsRecord:
    """Bounds of the direct solution estimated on the whole mesh as one subdomain."""
    (fields,), problems, algebra = sequential_fields(mesh, material, [loads], quadrature_degree=quadrature_degree)
    return estimate(fields, recover(problems, algebra, fields, r=r), true_error=true_error)
