from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
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
from typing import get_args

import numpy as np

from ddbounds.bounds import BOUNDS_COLUMNS
from ddbounds.bounds import GOAL_COLUMNS
from ddbounds.bounds import BoundsRecord
from ddbounds.bounds import GoalRecord
from ddbounds.bounds import QuantityOfInterest
from ddbounds.bounds import estimate
from ddbounds.bounds import extractor_qoi
from ddbounds.bounds import goal_bounds
from ddbounds.bounds import sequential_estimate
from ddbounds.ddsolver import InterfaceSolver
from ddbounds.ddsolver import IterationFields
from ddbounds.ddsolver import IterationStep
from ddbounds.ddsolver import SolverConfig
from ddbounds.ddsolver import SolveResult
from ddbounds.ddsolver import global_displacement
from ddbounds.ddsolver import project_directions
from ddbounds.fem import DEFAULT_QUADRATURE_DEGREE
from ddbounds.fem import ExactFields
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.fem import default_material
from ddbounds.fem import evaluate_exact_benchmark
from ddbounds.fem import exact_energy_error
from ddbounds.mesh import Mesh
from ddbounds.mesh import Partition
from ddbounds.mesh import build_cracked_plate
from ddbounds.mesh import build_structured_square
from ddbounds.mesh import partition_regular
from ddbounds.mesh import refine_by_splitting
from ddbounds.recovery import DEFAULT_PATCH_REFINEMENT
from ddbounds.recovery import AdmissibleRecovery
from ddbounds.recovery import recover
from ddbounds.substructure import InterfaceAlgebra
from ddbounds.substructure import SubdomainProblem
from ddbounds.substructure import split_problem
from ddbounds.utils._errors import NonNestedMeshError
from ddbounds.utils._errors import ReportError
from ddbounds.utils._funcs import first_zero_crossing
from ddbounds.utils._funcs import is_strictly_decreasing
from ddbounds.utils._funcs import loglog_slope
from ddbounds.utils._types import Approach
from ddbounds.utils._types import ExtractorKind
from ddbounds.utils._types import RefinementRule
from ddbounds.utils._types import RunStatus
from ddbounds.utils._types import StopKind

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

_stop_values = get_args(StopKind)
_rule_values = get_args(RefinementRule)

HSWEEP_COLUMNS = ("mesh", "h", "n_dofs", "true_error", "theta", "rho", "theta_seq", "rho_seq", "iterations")
SUMMARY_FILE = "summary.json"

StartFunction = Callable[[int], np.ndarray]


@dataclass(frozen=True, eq=False)
class BenchmarkProblem:
    """A mesh with its material, loads and optional analytic solution.

    Arguments:
        name: Label used in reports.
        mesh: The mesh.
        material: The material.
        loads: Forward loads.
        qoi_region: Region label of the quantity of interest, if any.
        qoi_kind: Extractor kind.
        exact: Optional analytic solution `(x, y) -> ExactFields`.
        quadrature_degree: Degree of the load quadrature.
    """

    name: str
    mesh: Mesh
    material: Material
    loads: LoadSet
    qoi_region: Optional[str] = None
    qoi_kind: ExtractorKind = "mean_sxx"
    exact: Optional[Callable[[np.ndarray, np.ndarray], ExactFields]] = None
    quadrature_degree: int = DEFAULT_QUADRATURE_DEGREE

    def exact_strain(self: Self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Strain of the analytic solution.

        Raises:
            ValueError: If the problem has no analytic solution.
        """
        if self.exact is None:
            msg = f"Problem `{self.name}` has no analytic solution."
            raise ValueError(msg)
        return self.exact(x, y).strain

    def with_mesh(self: Self, mesh: Mesh) -> BenchmarkProblem:
        """Same problem on another mesh."""
        return replace(self, mesh=mesh)

    def with_options(self: Self, **changes: Any) -> BenchmarkProblem:
        """Copy with some fields replaced."""
        return replace(self, **changes)


def square_benchmark(
    subdivisions: int, half_width: float = 1.0, material: Optional[Material] = None
) -> BenchmarkProblem:
    """Clamped square `[-3 l, 3 l]^2` loaded by the body force of a known polynomial solution.

    The region `"omega"` holds the elements whose centroid lies in `[-2 l, 0] x [-2 l, -l]`.
    """
    material = material or default_material()
    ell = half_width

    def _omega(cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
        return (cx >= -2.0 * ell) & (cx <= 0.0) & (cy >= -2.0 * ell) & (cy <= -ell)

    def _exact(x: np.ndarray, y: np.ndarray) -> ExactFields:
        return evaluate_exact_benchmark(x, y, half_width=ell, material=material)

    def _body_force(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return _exact(x, y).body_force

    mesh = build_structured_square(subdivisions, half_width, regions={"omega": _omega})
    return BenchmarkProblem(
        name=f"square-{subdivisions}",
        mesh=mesh,
        material=material,
        loads=LoadSet(body_force=_body_force),
        qoi_region="omega",
        exact=_exact,
    )


def cracked_benchmark(cells_per_unit: int = 4) -> BenchmarkProblem:
    """Plane stress plate with two holes and a slit, clamped on the left and pulled on the right."""

    def _pull(x: np.ndarray, y: np.ndarray) -> np.ndarray:  # noqa: ARG001
        return np.stack([np.ones_like(x), np.zeros_like(x)])

    return BenchmarkProblem(
        name=f"cracked-{cells_per_unit}",
        mesh=build_cracked_plate(cells_per_unit),
        material=Material(young_modulus=1.0, poisson_ratio=0.3, hypothesis="plane_stress"),
        loads=LoadSet(tractions={"neumann:pull": _pull}),
        qoi_region="omega",
    )


@dataclass(frozen=True)
class StopPolicy:
    """Stopping rule of the interface solver.

    `"tolerance"` relies on the relative residual only. `"envelope"` stops at the first iteration whose `alpha` falls
    below the `rho_discr` of the latest estimation pass, for every column. `"discr_tenth"` asks for a tenth of it.

    Arguments:
        kind: The rule.
        tolerance: Relative residual tolerance, always active.
        max_iterations: Iteration budget.

    Raises:
        ValueError: If the kind is unknown or a bound is out of range.
    """

    kind: StopKind = "tolerance"
    tolerance: float = 1e-8
    max_iterations: int = 500

    def __post_init__(self: Self) -> None:
        """Post init used to validate the `StopPolicy` attributes."""
        errors = []
        if self.kind not in _stop_values:
            errors.append(f"`kind` must be one of {_stop_values}. Found {self.kind}")
        if not self.tolerance > 0:
            errors.append(f"`tolerance` must be strictly positive. Found {self.tolerance}")
        if self.max_iterations < 1:
            errors.append(f"`max_iterations` must be at least 1. Found {self.max_iterations}")
        if errors:
            msg = "\n".join(errors)
            raise ValueError(msg)

    def threshold(self: Self, rho_discr: float) -> float:
        """Value `alpha` must fall below; 0 for the tolerance rule."""
        if self.kind == "envelope":
            return rho_discr
        if self.kind == "discr_tenth":
            return 0.1 * rho_discr
        return 0.0

    def is_met(self: Self, alphas: Sequence[float], rho_discr: Sequence[Optional[float]]) -> bool:
        """Whether every column satisfies the rule; never before the first estimation pass."""
        if self.kind == "tolerance" or any(r is None for r in rho_discr):
            return False
        return all(a < self.threshold(r) for a, r in zip(alphas, rho_discr))  # type: ignore[arg-type]


@dataclass(frozen=True)
class AdaptivePlan:
    """Outer loop settings of the adaptive strategy.

    Arguments:
        target_precision: Relative width of the QoI interval to reach, e.g. `0.05`.
        max_cycles: Number of meshes at most.
        recycle: Whether to augment each new solve with the projected search directions of the previous one.
        refinement: Refinement rule between cycles.
        patch_refinement: Subdivision factor of the star patches.
        estimate_every: Estimate at every iteration instead of only at iteration 1 and at the stop.

    Raises:
        ValueError: If a field is out of range.
    """

    target_precision: float = 0.05
    max_cycles: int = 3
    recycle: bool = True
    refinement: RefinementRule = "global_split"
    patch_refinement: int = DEFAULT_PATCH_REFINEMENT
    estimate_every: bool = False

    def __post_init__(self: Self) -> None:
        """Post init used to validate the `AdaptivePlan` attributes."""
        errors = []
        if not self.target_precision > 0:
            errors.append(f"`target_precision` must be strictly positive. Found {self.target_precision}")
        if self.max_cycles < 1:
            errors.append(f"`max_cycles` must be at least 1. Found {self.max_cycles}")
        if self.refinement not in _rule_values:
            errors.append(f"`refinement` must be one of {_rule_values}. Found {self.refinement}")
        if self.patch_refinement < 1:
            errors.append(f"`patch_refinement` must be at least 1. Found {self.patch_refinement}")
        if errors:
            msg = "\n".join(errors)
            raise ValueError(msg)


@dataclass(frozen=True)
class CycleReport:
    """Outcome of one solve-and-estimate cycle on one mesh."""

    cycle: int
    n_elements: int
    n_dofs: int
    h: float
    n_subdomains: int
    iterations: int
    cumulative_iterations: int
    augmentation_size: int
    first_residual: float
    last_residual: float
    stop_reason: str
    forward: Tuple[BoundsRecord, ...] = ()
    adjoint: Tuple[BoundsRecord, ...] = ()
    goal: Optional[GoalRecord] = None
    eta: Tuple[float, ...] = ()
    eta_adjoint: Tuple[float, ...] = ()
    exact_quantity: Optional[float] = None
    wall_time: float = 0.0

    @property
    def zero_crossing(self: Self) -> Optional[int]:
        """First estimated iteration with a positive separated lower bound."""
        return first_zero_crossing([r.iteration for r in self.forward], [r.rho_bis for r in self.forward])


@dataclass(frozen=True)
class HSweepRow:
    """Final bounds of one mesh of an h-sweep, with the sequential reference.

    `true_error` is NaN when the problem has no exact solution.
    """

    mesh: int
    h: float
    n_dofs: int
    true_error: float
    theta: float
    rho: float
    theta_seq: float
    rho_seq: float
    iterations: int

    def to_row(self: Self) -> Tuple[float, ...]:
        """Values in the order of `HSWEEP_COLUMNS`."""
        return tuple(float(getattr(self, c)) for c in HSWEEP_COLUMNS)


def _clean(value: Any) -> Any:
    """NaN and infinities become `None`, tuples become lists."""
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    return value


def _bounds_from_dict(payload: Mapping[str, Any]) -> BoundsRecord:
    return BoundsRecord(**payload)


def _goal_from_dict(payload: Optional[Mapping[str, Any]]) -> Optional[GoalRecord]:
    if payload is None:
        return None
    ihh2 = payload.get("ihh2")
    return GoalRecord(**{**payload, "ihh2": None if ihh2 is None else tuple(ihh2)})


@dataclass(frozen=True)
class RunReport:
    """Everything a run produced, serializable to JSON.

    Arguments:
        kind: `"hsweep"`, `"adaptive"` or `"estimate"`.
        problem: Problem label.
        approach: Solver approach.
        status: `"met"`, `"budget_exhausted"` or `"completed"`.
        cycles: One report per mesh.
        hsweep: h-sweep rows, empty for other kinds.
        config_hash: Hash of the inputs that produced the run.
        notes: Free text remarks, such as deviations from the requested setup.
    """

    kind: str
    problem: str
    approach: Approach
    status: RunStatus = "completed"
    cycles: Tuple[CycleReport, ...] = ()
    hsweep: Tuple[HSweepRow, ...] = ()
    config_hash: str = ""
    notes: Tuple[str, ...] = ()

    @property
    def slopes(self: Self) -> Dict[str, float]:
        """Log-log slopes of the true error and of the bounds against `h`, when at least two meshes are swept."""
        if len(self.hsweep) < 2:  # noqa: PLR2004
            return {}
        h = [row.h for row in self.hsweep]
        out = {}
        for name in ("true_error", "theta", "rho"):
            values = [getattr(row, name) for row in self.hsweep]
            if np.all(np.isfinite(values)) and min(values) > 0:
                out[name] = loglog_slope(h, values)
        return out

    def to_dict(self: Self) -> Dict[str, Any]:
        """JSON-ready dictionary."""
        payload = {
            "kind": self.kind,
            "problem": self.problem,
            "approach": self.approach,
            "status": self.status,
            "config_hash": self.config_hash,
            "notes": list(self.notes),
            "cycles": [asdict(c) for c in self.cycles],
            "hsweep": [asdict(r) for r in self.hsweep],
            "slopes": self.slopes,
        }
        return _clean(payload)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> RunReport:
        """Rebuilds a report written by `to_dict`."""
        cycles = []
        for c in payload.get("cycles", []):
            cycles.append(
                CycleReport(
                    **{
                        **c,
                        "forward": tuple(_bounds_from_dict(r) for r in c.get("forward", [])),
                        "adjoint": tuple(_bounds_from_dict(r) for r in c.get("adjoint", [])),
                        "goal": _goal_from_dict(c.get("goal")),
                        "eta": tuple(c.get("eta", [])),
                        "eta_adjoint": tuple(c.get("eta_adjoint", [])),
                    }
                )
            )
        return cls(
            kind=payload["kind"],
            problem=payload["problem"],
            approach=payload["approach"],
            status=payload.get("status", "completed"),
            cycles=tuple(cycles),
            hsweep=tuple(
                HSweepRow(**{k: np.nan if v is None else v for k, v in r.items()}) for r in payload.get("hsweep", [])
            ),
            config_hash=payload.get("config_hash", ""),
            notes=tuple(payload.get("notes", [])),
        )


def random_start(scale: float, seed: Optional[int] = None) -> StartFunction:
    """Initial interface guess drawn from a seeded standard normal, scaled."""

    def _start(size: int) -> np.ndarray:
        return scale * np.random.default_rng(seed).standard_normal(size)

    return _start


def smooth_start(scale: float) -> StartFunction:
    """Deterministic oscillating initial interface guess."""

    def _start(size: int) -> np.ndarray:
        return scale * np.sin(0.5 * np.arange(size) + 0.3)

    return _start


@dataclass
class SolveTrace:
    """A solve with its estimation passes.

    Arguments:
        result: The solver outcome.
        records: Per load case, the bounds of every estimated iteration.
        final: Per load case, the last estimated fields and their recovery.
        stop_reason: `"tolerance"`, `"envelope"`, `"discr_tenth"` or `"budget"`.
    """

    result: SolveResult
    records: Dict[int, List[BoundsRecord]] = field(default_factory=dict)
    final: Dict[int, Tuple[IterationFields, AdmissibleRecovery]] = field(default_factory=dict)
    stop_reason: str = "tolerance"


def solve_and_estimate(  # noqa: PLR0913
    problems: Sequence[SubdomainProblem],
    algebra: InterfaceAlgebra,
    policy: StopPolicy,
    *,
    approach: Approach = "primal_bdd",
    cases: Sequence[int] = (0,),
    r: int = DEFAULT_PATCH_REFINEMENT,
    estimate_every: bool = False,
    augmentation: Optional[np.ndarray] = None,
    start: Optional[StartFunction] = None,
    true_error: Optional[Callable[[IterationFields], float]] = None,
) -> SolveTrace:
    """Runs the interface solver, estimating at iteration 1, at the stop, and optionally at every iteration.

    Arguments:
        problems: Subdomain problems.
        algebra: Interface algebra.
        policy: Stopping rule; the envelope rules use the `rho_discr` of the latest estimation pass.
        approach: Solver approach.
        cases: Load cases, solved together.
        r: Star patch subdivision factor.
        estimate_every: Estimate at every iteration.
        augmentation: Optional recycled directions.
        start: Optional initial guess builder, called with the interface size.
        true_error: Optional exact error of the forward `u_D`.
    """
    solver = InterfaceSolver(problems=problems, algebra=algebra, approach=approach, cases=cases)
    config = SolverConfig(
        approach=approach,
        rel_tolerance=policy.tolerance,
        max_iterations=policy.max_iterations,
        augmentation_vectors=augmentation,
        rhs_count=len(cases),
        stop_policy=policy.kind,
    )
    trace_records: Dict[int, List[BoundsRecord]] = {c: [] for c in cases}
    final: Dict[int, Tuple[IterationFields, AdmissibleRecovery]] = {}
    rho_discr: Dict[int, Optional[float]] = {c: None for c in cases}
    estimated: List[int] = []

    def _estimate(step: IterationStep) -> None:
        for fields in step.fields:
            recovery = recover(problems, algebra, fields, r=r)
            error = true_error(fields) if true_error is not None and fields.load_case == cases[0] else None
            record = estimate(fields, recovery, true_error=error)
            trace_records[fields.load_case].append(record)
            final[fields.load_case] = (fields, recovery)
            rho_discr[fields.load_case] = record.rho_discr
        estimated.append(step.iteration)

    def _callback(step: IterationStep) -> bool:
        if estimate_every or step.iteration == 1:
            _estimate(step)
        return step.iteration >= 1 and policy.is_met(step.alphas, [rho_discr[c] for c in cases])

    result = solver.solve(config, _callback, initial_guess=None if start is None else start(solver.size))
    if not estimated or estimated[-1] != result.final.iteration:
        _estimate(result.final)

    return SolveTrace(result=result, records=trace_records, final=final, stop_reason=result.stop_reason)


def _true_error_function(
    problem: BenchmarkProblem, problems: Sequence[SubdomainProblem]
) -> Optional[Callable[[IterationFields], float]]:
    if problem.exact is None:
        return None
    mesh = problem.mesh

    def _error(fields: IterationFields) -> float:
        u = global_displacement(problems, fields.u_dirichlet, mesh.n_dofs)
        return exact_energy_error(mesh, problem.material, u, problem.exact_strain)

    return _error


def _qoi(problem: BenchmarkProblem, mesh: Mesh) -> QuantityOfInterest:
    if problem.qoi_region is None:
        msg = f"Problem `{problem.name}` has no quantity of interest region."
        raise ValueError(msg)
    return extractor_qoi(
        mesh,
        problem.qoi_region,
        problem.qoi_kind,
        material=problem.material,
        quadrature_degree=problem.quadrature_degree,
    )


def _split(
    problem: BenchmarkProblem, mesh: Mesh, partition: Partition, load_sets: Sequence[LoadSet]
) -> Tuple[List[SubdomainProblem], InterfaceAlgebra]:
    return split_problem(mesh, partition, problem.material, load_sets, quadrature_degree=problem.quadrature_degree)


def _eta(recovery: AdmissibleRecovery) -> Tuple[float, ...]:
    ecr = recovery.ecr_neumann
    total = float(np.sqrt(np.sum(ecr**2)))
    return tuple(float(v) for v in (ecr / total if total > 0 else np.zeros_like(ecr)))


def run_global_benchmark(  # noqa: PLR0913
    sizes: Sequence[int],
    grid: Tuple[int, int] = (3, 3),
    approach: Approach = "primal_bdd",
    *,
    half_width: float = 1.0,
    policy: Optional[StopPolicy] = None,
    r: int = DEFAULT_PATCH_REFINEMENT,
    estimate_every: bool = False,
    start: Optional[StartFunction] = None,
) -> RunReport:
    """h-convergence study on the square benchmark.

    For every mesh size, the direct solution is estimated on the whole mesh as a reference and the substructured
    problem is solved and estimated; the true error is integrated against the analytic solution.

    Arguments:
        sizes: Subdivisions per side of each mesh.
        grid: Partition grid.
        approach: Solver approach.
        half_width: The length `l` of the square.
        policy: Stopping rule, tolerance `1e-8` by default.
        r: Star patch subdivision factor.
        estimate_every: Estimate at every iteration.
        start: Optional initial guess builder.
    """
    policy = policy or StopPolicy()
    cycles: List[CycleReport] = []
    rows: List[HSweepRow] = []
    cumulative = 0
    for index, n in enumerate(sizes):
        tic = time.perf_counter()
        problem = square_benchmark(n, half_width)
        mesh = problem.mesh
        problems, algebra = _split(problem, mesh, partition_regular(mesh, grid), [problem.loads])
        trace = solve_and_estimate(
            problems,
            algebra,
            policy,
            approach=approach,
            r=r,
            estimate_every=estimate_every,
            start=start,
            true_error=_true_error_function(problem, problems),
        )
        last = trace.records[0][-1]
        reference = sequential_estimate(
            mesh, problem.material, problem.loads, r=r, quadrature_degree=problem.quadrature_degree
        )
        rows.append(
            HSweepRow(
                mesh=index,
                h=mesh.h,
                n_dofs=mesh.n_dofs,
                true_error=np.nan if last.true_error is None else float(last.true_error),
                theta=last.theta,
                rho=last.rho,
                theta_seq=reference.theta,
                rho_seq=reference.rho,
                iterations=trace.result.iterations,
            )
        )
        cumulative += trace.result.iterations
        cycles.append(_cycle_report(index, mesh, problems, trace, cumulative, 0, None, None, time.perf_counter() - tic))
        _LOGGER.info(
            "Mesh %s (h=%.4g): true %.6e, theta %.6e, rho %.6e",
            index,
            mesh.h,
            rows[-1].true_error,
            last.theta,
            last.rho,
        )
    return RunReport(kind="hsweep", problem="square", approach=approach, cycles=tuple(cycles), hsweep=tuple(rows))


def _cycle_report(  # noqa: PLR0913
    cycle: int,
    mesh: Mesh,
    problems: Sequence[SubdomainProblem],
    trace: SolveTrace,
    cumulative: int,
    augmentation_size: int,
    goal: Optional[GoalRecord],
    exact_quantity: Optional[float],
    wall_time: float,
) -> CycleReport:
    cases = sorted(trace.records)
    forward = tuple(trace.records[cases[0]])
    adjoint = tuple(trace.records[cases[1]]) if len(cases) > 1 else ()
    return CycleReport(
        cycle=cycle,
        n_elements=mesh.n_elements,
        n_dofs=mesh.n_dofs,
        h=mesh.h,
        n_subdomains=len(problems),
        iterations=trace.result.iterations,
        cumulative_iterations=cumulative,
        augmentation_size=augmentation_size,
        first_residual=trace.result.first_residual,
        last_residual=trace.result.last_residual,
        stop_reason=trace.stop_reason,
        forward=forward,
        adjoint=adjoint,
        goal=goal,
        eta=_eta(trace.final[cases[0]][1]),
        eta_adjoint=_eta(trace.final[cases[1]][1]) if len(cases) > 1 else (),
        exact_quantity=exact_quantity,
        wall_time=wall_time,
    )


def run_adaptive(  # noqa: PLR0913, C901
    problem: BenchmarkProblem,
    plan: AdaptivePlan,
    *,
    grid: Tuple[int, int] = (3, 3),
    partition: Optional[Partition] = None,
    approach: Approach = "primal_bdd",
    policy: Optional[StopPolicy] = None,
    start: Optional[StartFunction] = None,
) -> RunReport:
    """Goal-oriented adaptive loop steering the iterative solver.

    Each cycle solves the forward and adjoint problems by block conjugate gradient, estimates at iteration 1, stops
    by the policy, estimates again and bounds the quantity of interest. While the precision misses the target, the
    mesh is split globally, the search directions are projected on the refined interface and the next solve is
    augmented with them.

    Arguments:
        problem: The problem, with a quantity of interest region.
        plan: Outer loop settings.
        grid: Partition grid, used when `partition` is not given.
        partition: Optional partition of the first mesh.
        approach: Solver approach.
        policy: Stopping rule, envelope by default.
        start: Optional initial guess builder for the first cycle.

    Raises:
        ValueError: If the problem has no quantity of interest region.
    """
    policy = policy or StopPolicy(kind="envelope")
    mesh = problem.mesh
    partition = partition or partition_regular(mesh, grid)

    cycles: List[CycleReport] = []
    notes: List[str] = []
    directions: Optional[np.ndarray] = None
    cumulative = 0
    status: RunStatus = "budget_exhausted"

    qoi = _qoi(problem, mesh)
    problems, algebra = _split(problem, mesh, partition, [problem.loads, qoi.loads])
    for cycle in range(plan.max_cycles):
        tic = time.perf_counter()
        current = problem.with_mesh(mesh)
        trace = solve_and_estimate(
            problems,
            algebra,
            policy,
            approach=approach,
            cases=(0, 1),
            r=plan.patch_refinement,
            estimate_every=plan.estimate_every,
            augmentation=directions,
            start=start if cycle == 0 else None,
            true_error=_true_error_function(current, problems),
        )
        (fields, recovery), (fields_adj, recovery_adj) = trace.final[0], trace.final[1]
        goal = goal_bounds(fields, recovery, fields_adj, recovery_adj, mesh=cycle)
        exact_quantity = qoi.exact_value(mesh, current.exact_strain) if current.exact is not None else None
        cumulative += trace.result.iterations
        augmentation_size = 0 if directions is None else int(directions.shape[1])
        cycles.append(
            _cycle_report(
                cycle,
                mesh,
                problems,
                trace,
                cumulative,
                augmentation_size,
                goal,
                exact_quantity,
                time.perf_counter() - tic,
            )
        )
        _LOGGER.info(
            "Cycle %s: %s dofs, %s iterations, precision %.4f (target %.4f)",
            cycle,
            mesh.n_dofs,
            trace.result.iterations,
            goal.precision,
            plan.target_precision,
        )
        if not is_strictly_decreasing([c.goal.precision for c in cycles[-2:] if c.goal is not None]):
            _LOGGER.warning("Precision stopped decreasing at cycle %s: %.4f", cycle, goal.precision)
            notes.append(f"cycle {cycle}: precision {goal.precision:.4g} did not decrease")
        if goal.precision <= plan.target_precision:
            status = "met"
            break
        if cycle == plan.max_cycles - 1:
            break

        refinement = refine_by_splitting(mesh)
        partition = partition.refine(refinement)
        mesh = refinement.fine
        qoi = _qoi(problem, mesh)
        fine_problems, fine_algebra = _split(problem, mesh, partition, [problem.loads, qoi.loads])
        directions = None
        if plan.recycle:
            try:
                directions = project_directions(
                    trace.result.directions, refinement, algebra, fine_algebra, approach=approach
                )
            except NonNestedMeshError as exc:
                _LOGGER.warning("Recycling disabled for cycle %s: %s", cycle + 1, exc)
                notes.append(f"cycle {cycle + 1}: recycling disabled ({exc})")
        problems, algebra = fine_problems, fine_algebra

    if problem.name.startswith("cracked"):
        notes.append("lookalike geometry: two holes and a slit, refined globally between cycles")
    return RunReport(
        kind="adaptive",
        problem=problem.name,
        approach=approach,
        status=status,
        cycles=tuple(cycles),
        notes=tuple(notes),
    )


def run_estimate(  # noqa: PLR0913
    problem: BenchmarkProblem,
    partition: Partition,
    *,
    approach: Approach = "primal_bdd",
    policy: Optional[StopPolicy] = None,
    r: int = DEFAULT_PATCH_REFINEMENT,
    estimate_every: bool = False,
    start: Optional[StartFunction] = None,
) -> RunReport:
    """Single solve with its error bounds, and the QoI interval when the problem defines a region."""
    tic = time.perf_counter()
    policy = policy or StopPolicy()
    mesh = problem.mesh
    load_sets = [problem.loads]
    qoi = None
    if problem.qoi_region is not None:
        qoi = _qoi(problem, mesh)
        load_sets.append(qoi.loads)
    problems, algebra = _split(problem, mesh, partition, load_sets)
    trace = solve_and_estimate(
        problems,
        algebra,
        policy,
        approach=approach,
        cases=tuple(range(len(load_sets))),
        r=r,
        estimate_every=estimate_every,
        start=start,
        true_error=_true_error_function(problem, problems),
    )
    goal, exact_quantity = None, None
    if qoi is not None:
        (fields, recovery), (fields_adj, recovery_adj) = trace.final[0], trace.final[1]
        goal = goal_bounds(fields, recovery, fields_adj, recovery_adj)
        exact_quantity = qoi.exact_value(mesh, problem.exact_strain) if problem.exact is not None else None
    cycle = _cycle_report(
        0, mesh, problems, trace, trace.result.iterations, 0, goal, exact_quantity, time.perf_counter() - tic
    )
    return RunReport(kind="estimate", problem=problem.name, approach=approach, cycles=(cycle,))


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence[float]]) -> Path:
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(columns))
    try:
        np.savetxt(path, data, delimiter=",", header=",".join(columns), comments="", fmt="%.12g")
    except OSError as exc:
        msg = f"Cannot write report file {path}: {exc}"
        raise ReportError(msg, path=str(path)) from exc
    return path


def emit_reports(report: RunReport, out_dir: Union[str, Path]) -> List[Path]:
    """Writes the CSV tables and the JSON summary of a run.

    Files:
        - `iterations_c{cycle}_{forward|adjoint}.csv`: one row per estimated iteration.
        - `goal.csv`: one row per cycle with a quantity of interest interval.
        - `hsweep.csv`: one row per mesh of an h-sweep.
        - `eta_c{cycle}.csv`: per subdomain share of the discretization error.
        - `summary.json`: the whole report.

    Raises:
        ReportError: If a file cannot be written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        msg = f"Cannot create report directory {out}: {exc}"
        raise ReportError(msg, path=str(out)) from exc

    written: List[Path] = []
    for cycle in report.cycles:
        for label, records in (("forward", cycle.forward), ("adjoint", cycle.adjoint)):
            if label == "adjoint" and not records:
                continue
            with_true = any(r.true_error is not None for r in records)
            columns = (*BOUNDS_COLUMNS, "true_error") if with_true else BOUNDS_COLUMNS
            rows = [r.to_row(with_true_error=with_true) for r in records]
            written.append(_write_csv(out / f"iterations_c{cycle.cycle}_{label}.csv", columns, rows))
        eta_rows = [
            (float(s), e, cycle.eta_adjoint[s] if cycle.eta_adjoint else np.nan) for s, e in enumerate(cycle.eta)
        ]
        written.append(_write_csv(out / f"eta_c{cycle.cycle}.csv", ("subdomain", "eta", "eta_adjoint"), eta_rows))

    goals = [c.goal.to_row() for c in report.cycles if c.goal is not None]
    written.append(_write_csv(out / "goal.csv", GOAL_COLUMNS, goals))
    written.append(_write_csv(out / "hsweep.csv", HSWEEP_COLUMNS, [r.to_row() for r in report.hsweep]))

    summary = out / SUMMARY_FILE
    try:
        summary.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    except OSError as exc:
        msg = f"Cannot write report file {summary}: {exc}"
        raise ReportError(msg, path=str(summary)) from exc
    written.append(summary)
    _LOGGER.info("Wrote %s report files to %s", len(written), out)
    return written


def load_report(path: Union[str, Path]) -> RunReport:
    """Reads a `RunReport` back from a report directory or its `summary.json`.

    Raises:
        ReportError: If the file is missing or not a valid report.
    """
    source = Path(path)
    if source.is_dir():
        source = source / SUMMARY_FILE
    try:
        payload = json.loads(source.read_text())
        return RunReport.from_dict(payload)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        msg = f"Cannot read report {source}: {exc}"
        raise ReportError(msg, path=str(source)) from exc
