from __future__ import annotations

import logging
import sys
from dataclasses import dataclass
from dataclasses import field
from functools import cached_property
from typing import Callable
from typing import Dict
from typing import Generator
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import get_args

import numpy as np
from scipy import linalg
from scipy import sparse

from ddbounds.mesh import Refinement
from ddbounds.substructure import InterfaceAlgebra
from ddbounds.substructure import SubdomainProblem
from ddbounds.utils._errors import NonNestedMeshError
from ddbounds.utils._errors import SingularSystemError
from ddbounds.utils._errors import SolverBreakdownError
from ddbounds.utils._types import Approach
from ddbounds.utils._types import BlockOperator
from ddbounds.utils._types import StopKind

if sys.version_info >= (3, 11):  # pragma: no cover
    from typing import Self
else:  # pragma: no cover
    from typing_extensions import Self

_LOGGER = logging.getLogger(__name__)

_approach_values = get_args(Approach)
_stop_values = get_args(StopKind)

DEFLATION_THRESHOLD = 1e-14
RANK_THRESHOLD = 1e-12
NEGATIVE_CURVATURE_THRESHOLD = 1e-8
PROJECTION_RANK_THRESHOLD = 1e-10


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Settings of an interface solve.

    Arguments:
        approach: `"primal_bdd"` or `"dual_feti"`.
        rel_tolerance: Stop when every column satisfies `|r| <= rel_tolerance * |b|`.
        max_iterations: Iteration budget; the solve returns unconverged when it is reached.
        augmentation_vectors: Optional interface vectors, shape `(n, k)`, added as constraints to the Krylov space.
        rhs_count: 1 for a single solve, 2 for a forward/adjoint block solve.
        stop_policy: Label of the rule a truthy callback return enforces; it becomes the `stop_reason` of a solve the
            callback ends. With `"tolerance"` such a stop is reported as `"callback"`.

    Raises:
        ValueError: If any field is out of range.
    """

    approach: Approach = "primal_bdd"
    rel_tolerance: float = 1e-8
    max_iterations: int = 500
    augmentation_vectors: Optional[np.ndarray] = None
    rhs_count: int = 1
    stop_policy: StopKind = "tolerance"

    def __post_init__(self: Self) -> None:
        """Post init used to validate the `SolverConfig` attributes."""
        errors = []
        if self.approach not in _approach_values:
            errors.append(f"`approach` must be one of {_approach_values}. Found {self.approach}")
        if not self.rel_tolerance > 0:
            errors.append(f"`rel_tolerance` must be strictly positive. Found {self.rel_tolerance}")
        if self.max_iterations < 0:
            errors.append(f"`max_iterations` must be non-negative. Found {self.max_iterations}")
        if self.rhs_count not in (1, 2):
            errors.append(f"`rhs_count` must be 1 or 2. Found {self.rhs_count}")
        if self.stop_policy not in _stop_values:
            errors.append(f"`stop_policy` must be one of {_stop_values}. Found {self.stop_policy}")
        if errors:
            msg = "\n".join(errors)
            raise ValueError(msg)
        if self.augmentation_vectors is not None:
            vectors = np.asarray(self.augmentation_vectors, dtype=float)
            object.__setattr__(self, "augmentation_vectors", vectors.reshape(vectors.shape[0], -1))


@dataclass(frozen=True, eq=False)
class IterationFields:
    """Admissible fields extracted at one iteration for one load case.

    All displacements cover every local dof of their subdomain.

    Arguments:
        iteration: Iteration index.
        load_case: Load case the fields belong to.
        u_dirichlet: Per subdomain `u_D`, globally continuous and equal to the data on Dirichlet dofs.
        u_neumann: Per subdomain `u_N`, locally equilibrated with the reactions.
        reactions: Per subdomain interface reactions `lambda_N` on the trace dofs, balanced across the interface.
        alpha: Preconditioner norm of the interface residual, equal to the energy distance between `u_N` and `u_D`.
        residual_norm: Euclidean norm of the interface residual.
    """

    iteration: int
    load_case: int
    u_dirichlet: Tuple[np.ndarray, ...]
    u_neumann: Tuple[np.ndarray, ...]
    reactions: Tuple[np.ndarray, ...]
    alpha: float
    residual_norm: float


class _EngineState(NamedTuple):
    iteration: int
    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    relative: np.ndarray
    active: np.ndarray
    converged: bool


def _a_orthonormalize(vectors: np.ndarray, a_vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """A-orthonormal basis of the span of `vectors`, dropping numerically dependent directions."""
    if vectors.shape[1] == 0:
        return vectors, a_vectors, 0
    gram = vectors.T @ a_vectors
    values, vecs = linalg.eigh(0.5 * (gram + gram.T))
    top = float(values.max()) if values.size else 0.0
    keep = values > RANK_THRESHOLD * top if top > 0 else np.zeros(values.size, dtype=bool)
    scale = vecs[:, keep] / np.sqrt(values[keep])
    return vectors @ scale, a_vectors @ scale, int((~keep).sum())


def _block_pcg(  # noqa: PLR0913
    apply_a: BlockOperator,
    apply_m: BlockOperator,
    rhs: np.ndarray,
    x0: np.ndarray,
    deflation: np.ndarray,
    *,
    rel_tolerance: float,
    max_iterations: int,
) -> Generator[_EngineState, None, Tuple[np.ndarray, int]]:
    """Deflated block preconditioned conjugate gradient with full reorthogonalization.

    The deflation vectors enter as constraints: the initial iterate is corrected so that the residual is orthogonal
    to them and every search direction is made A-orthogonal to them (twice, along with all previous directions).
    The generator yields the state before each step and returns the stacked search directions and the number of
    deflation vectors dropped for linear dependence.
    """
    c, ac, dropped = _a_orthonormalize(deflation, apply_a(deflation) if deflation.shape[1] else deflation)
    x = x0.copy()
    r = rhs - apply_a(x)
    if c.shape[1]:
        gamma = c.T @ r
        x = x + c @ gamma
        r = r - ac @ gamma

    reference = np.linalg.norm(rhs, axis=0)
    reference[reference == 0] = 1.0
    initial = np.linalg.norm(r, axis=0)
    n = rhs.shape[0]
    directions, a_directions = np.zeros((n, 0)), np.zeros((n, 0))

    iteration = 0
    while True:
        z = apply_m(r)
        norms = np.linalg.norm(r, axis=0)
        active = norms > DEFLATION_THRESHOLD * initial
        converged = bool(np.all(norms <= rel_tolerance * reference))
        yield _EngineState(iteration, x, r, z, norms / reference, active, converged)
        if converged or iteration >= max_iterations or not active.any():
            return directions, dropped

        w = z[:, active]
        for _ in range(2):
            if c.shape[1]:
                w = w - c @ (ac.T @ w)
            if directions.shape[1]:
                w = w - directions @ (a_directions.T @ w)
        aw = apply_a(w)
        gram = w.T @ aw
        values, vecs = linalg.eigh(0.5 * (gram + gram.T))
        top = float(values.max())
        if top < 0 or (top > 0 and values.min() < -NEGATIVE_CURVATURE_THRESHOLD * top):
            msg = f"Non-positive curvature {values.min():.3e} at iteration {iteration}."
            raise SolverBreakdownError(msg, iteration=iteration, curvature=float(values.min()))
        keep = values > RANK_THRESHOLD * top
        if top == 0 or not keep.any():
            _LOGGER.warning("Search space exhausted at iteration %s", iteration)
            return directions, dropped

        scale = vecs[:, keep] / np.sqrt(values[keep])
        p, ap = w @ scale, aw @ scale
        gamma = p.T @ r
        x = x + p @ gamma
        r = r - ap @ gamma
        directions = np.hstack([directions, p])
        a_directions = np.hstack([a_directions, ap])
        iteration += 1


class _Operators:
    """Interface operators of one approach; subclasses fill in the algebra."""

    def __init__(self: Self, problems: Sequence[SubdomainProblem], algebra: InterfaceAlgebra, cases: Tuple[int, ...]):
        self.problems = list(problems)
        self.algebra = algebra
        self.cases = cases

    @property
    def size(self: Self) -> int:  # pragma: no cover
        raise NotImplementedError

    def apply(self: Self, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def precondition(self: Self, r: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def rhs(self: Self) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def coarse_space(self: Self) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def admissible(self: Self, vectors: np.ndarray) -> np.ndarray:
        return vectors

    def start(self: Self, guess: Optional[np.ndarray]) -> np.ndarray:
        if guess is None:
            return np.zeros((self.size, len(self.cases)))
        g = np.asarray(guess, dtype=float).reshape(self.size, -1)
        return self.admissible(np.broadcast_to(g, (self.size, len(self.cases))).copy())

    def fields(self: Self, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray], np.ndarray]:
        raise NotImplementedError  # pragma: no cover

    def _pad(self: Self, problem: SubdomainProblem, trace: np.ndarray) -> np.ndarray:
        out = np.zeros((problem.n_r, trace.shape[1]))
        out[: problem.n_b] = trace
        return out


class _PrimalOperators(_Operators):
    """Balancing domain decomposition on the interface displacement."""

    @property
    def size(self: Self) -> int:
        return self.algebra.n_interface

    def apply(self: Self, x: np.ndarray) -> np.ndarray:
        traces = self.algebra.restrict_primal(x)
        return self.algebra.assemble_primal([p.schur(t) for p, t in zip(self.problems, traces)])

    def _scaled(self: Self, r: np.ndarray) -> List[np.ndarray]:
        weights = 1.0 / self.algebra.multiplicity
        return [v * weights[idx][:, None] for v, idx in zip(self.algebra.restrict_primal(r), self.algebra.primal_index)]

    def precondition(self: Self, r: np.ndarray) -> np.ndarray:
        local = []
        for p, v, idx in zip(self.problems, self._scaled(r), self.algebra.primal_index):
            c = p.pseudo_inverse(self._pad(p, v))[: p.n_b]
            local.append(c / self.algebra.multiplicity[idx][:, None])
        return self.algebra.assemble_primal(local)

    def rhs(self: Self) -> np.ndarray:
        reactions = []
        for p in self.problems:
            load = p.load_r[:, list(self.cases)]
            u = p.interior_solve(np.zeros((p.n_b, load.shape[1])), load)
            reactions.append(p.trace_reaction(u, load))
        return -self.algebra.assemble_primal(reactions)

    def coarse_space(self: Self) -> np.ndarray:
        blocks = []
        for p, idx in zip(self.problems, self.algebra.primal_index):
            if p.is_floating:
                local = p.rigid_modes[: p.n_b] / self.algebra.multiplicity[idx][:, None]
                blocks.append(self._lift(p, local))
        return np.hstack(blocks) if blocks else np.zeros((self.size, 0))

    def _lift(self: Self, problem: SubdomainProblem, local: np.ndarray) -> np.ndarray:
        out = np.zeros((self.size, local.shape[1]))
        np.add.at(out, self.algebra.primal_index[problem.index], local)
        return out

    def fields(self: Self, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray], np.ndarray]:
        cases = list(self.cases)
        u_d, reactions = [], []
        for p, trace in zip(self.problems, self.algebra.restrict_primal(x)):
            load = p.load_r[:, cases]
            u = p.interior_solve(trace, load)
            u_d.append(u)
            reactions.append(p.trace_reaction(u, load))
        residual = -self.algebra.assemble_primal(reactions)

        u_n, lam_n = [], []
        alpha2 = np.zeros(len(cases))
        for p, u, lam, v in zip(self.problems, u_d, reactions, self._scaled(residual)):
            c = p.pseudo_inverse(self._pad(p, v))
            u_n.append(u + c)
            lam_n.append(lam + v)
            alpha2 += np.einsum("ij,ij->j", v, c[: p.n_b])
        return u_d, u_n, lam_n, alpha2


class _DualOperators(_Operators):
    """FETI on the interface connection multipliers, with the rigid-mode coarse projector."""

    def __init__(self: Self, problems: Sequence[SubdomainProblem], algebra: InterfaceAlgebra, cases: Tuple[int, ...]):
        super().__init__(problems, algebra, cases)
        blocks = [b @ p.rigid_modes[: p.n_b] for p, b in zip(problems, algebra.dual)]
        self.offsets = np.concatenate([[0], np.cumsum([blk.shape[1] for blk in blocks])]).astype(np.int64)
        self.coupling = np.hstack(blocks) if blocks else np.zeros((algebra.n_connections, 0))
        self.gram_factor: Optional[Tuple[np.ndarray, bool]] = None
        if self.coupling.shape[1]:
            try:
                self.gram_factor = linalg.cho_factor(self.coupling.T @ self.coupling)
            except linalg.LinAlgError as exc:
                msg = "The rigid-mode coupling of the floating subdomains is rank deficient."
                raise SingularSystemError(msg) from exc

    @property
    def size(self: Self) -> int:
        return self.algebra.n_connections

    def _gram_solve(self: Self, v: np.ndarray) -> np.ndarray:
        if self.gram_factor is None:
            return np.zeros((0, v.shape[1]))
        return linalg.cho_solve(self.gram_factor, v)

    def project(self: Self, lam: np.ndarray) -> np.ndarray:
        """Orthogonal projector `P = I - G (G^T G)^-1 G^T`."""
        if self.gram_factor is None:
            return lam
        return lam - self.coupling @ self._gram_solve(self.coupling.T @ lam)

    def admissible(self: Self, vectors: np.ndarray) -> np.ndarray:
        return self.project(vectors)

    def _flexibility(self: Self, lam: np.ndarray) -> np.ndarray:
        local = []
        for p, t in zip(self.problems, self.algebra.restrict_dual(lam)):
            local.append(p.pseudo_inverse(self._pad(p, t))[: p.n_b])
        return self.algebra.assemble_dual(local)

    def apply(self: Self, x: np.ndarray) -> np.ndarray:
        return self.project(self._flexibility(self.project(x)))

    def precondition(self: Self, r: np.ndarray) -> np.ndarray:
        traces = self.algebra.scaled_dual(self.project(r))
        out = self.algebra.assemble_dual([p.schur(t) for p, t in zip(self.problems, traces)])
        return self.project(self.algebra.solve_connection_gram(out))

    @cached_property
    def particular(self: Self) -> np.ndarray:
        """`lambda_0 = G (G^T G)^-1 e`, satisfying the rigid compatibility constraints."""
        cases = list(self.cases)
        e = np.vstack([p.rigid_modes.T @ p.load_r[:, cases] for p in self.problems])
        return self.coupling @ self._gram_solve(e)

    def _displacement_gap(self: Self) -> np.ndarray:
        cases = list(self.cases)
        local = [p.pseudo_inverse(p.load_r[:, cases])[: p.n_b] for p in self.problems]
        return self.algebra.assemble_dual(local)

    def rhs(self: Self) -> np.ndarray:
        return self.project(self._displacement_gap() - self._flexibility(self.particular))

    def coarse_space(self: Self) -> np.ndarray:
        return np.zeros((self.size, 0))

    def fields(self: Self, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray], np.ndarray]:
        cases = list(self.cases)
        lam = self.particular + x
        tractions = self.algebra.restrict_dual(lam)

        free = [p.pseudo_inverse(p.load_r[:, cases] - self._pad(p, t)) for p, t in zip(self.problems, tractions)]
        jump = self.algebra.assemble_dual([u[: p.n_b] for p, u in zip(self.problems, free)])
        coef = -self._gram_solve(self.coupling.T @ jump)
        gap = jump + self.coupling @ coef

        corrections = self.algebra.scaled_dual(gap)
        u_d, u_n, lam_n = [], [], []
        alpha2 = np.zeros(len(cases))
        for s, (p, u, t, delta) in enumerate(zip(self.problems, free, tractions, corrections)):
            u_neumann = u + p.rigid_modes @ coef[self.offsets[s] : self.offsets[s + 1]]
            c = p.interior_solve(delta, np.zeros((p.n_r, len(cases))))
            u_n.append(u_neumann)
            u_d.append(u_neumann - c)
            lam_n.append(-t)
            alpha2 += np.einsum("ij,ij->j", delta, (p.k_rr @ c)[: p.n_b])
        return u_d, u_n, lam_n, alpha2


@dataclass(frozen=True, eq=False)
class IterationStep:
    """Lightweight record of one iteration; the admissible fields are extracted on demand.

    Arguments:
        iteration: Iteration index (0 is the initial iterate).
        relative_residuals: Per column `|r| / |b|`.
        residual_norms: Per column `|r|`.
        alphas: Per column `sqrt(r^T z)`.
        active: Per column, whether it still contributes search directions.
        converged: Whether every column met the tolerance.
    """

    iteration: int
    relative_residuals: np.ndarray
    residual_norms: np.ndarray
    alphas: np.ndarray
    active: np.ndarray
    converged: bool
    solver: InterfaceSolver = field(repr=False)
    iterate: np.ndarray = field(repr=False)

    @cached_property
    def fields(self: Self) -> Tuple[IterationFields, ...]:
        """One `IterationFields` per load case."""
        return self.solver.fields(self.iterate, iteration=self.iteration)


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Outcome of an interface solve.

    Arguments:
        approach: The approach used.
        cases: Load cases solved, one column each.
        history: Every iteration step, starting at 0.
        converged: Whether the tolerance was met.
        stopped_early: Whether the callback stopped the solve.
        directions: A-orthonormal search directions, reusable as augmentation vectors.
        dropped_augmentation: Number of augmentation vectors discarded as linearly dependent.
        deflation_iterations: Per column, the iteration at which it was deflated (`None` if never).
        stop_reason: `"tolerance"`, `"budget"`, or what ended the solve through the callback.
    """

    approach: Approach
    cases: Tuple[int, ...]
    history: Tuple[IterationStep, ...]
    converged: bool
    stopped_early: bool
    directions: np.ndarray
    dropped_augmentation: int
    deflation_iterations: Tuple[Optional[int], ...]
    stop_reason: str = "tolerance"

    @property
    def iterations(self: Self) -> int:
        """Index of the last iteration."""
        return self.history[-1].iteration

    @property
    def final(self: Self) -> IterationStep:
        """Last iteration step."""
        return self.history[-1]

    @property
    def fields(self: Self) -> Tuple[IterationFields, ...]:
        """Admissible fields at the last iteration."""
        return self.final.fields

    @property
    def first_residual(self: Self) -> float:
        """Largest relative residual at iteration 0."""
        return float(self.history[0].relative_residuals.max(initial=0.0))

    @property
    def last_residual(self: Self) -> float:
        """Largest relative residual at the last iteration."""
        return float(self.final.relative_residuals.max(initial=0.0))


StepCallback = Callable[[IterationStep], Optional[bool]]


class InterfaceSolver:
    """Projected preconditioned conjugate gradient on the substructured interface problem.

    The primal approach (BDD) iterates on the interface displacement with the Neumann-Neumann preconditioner scaled by
    multiplicity, the rigid modes of floating subdomains acting as a deflated coarse space. The dual approach (FETI)
    iterates on the connection multipliers with the scaled Dirichlet preconditioner and the natural coarse projector.
    Several load cases sharing the mesh and the substructuring are solved together by block conjugate gradient.

    Arguments:
        problems: Subdomain problems.
        algebra: Interface algebra of the same split.
        approach: `"primal_bdd"` or `"dual_feti"`.
        cases: Load cases to solve, one block column each.

    Raises:
        ValueError: If `approach` is unknown or `cases` is empty or out of range.

    Examples:
        ```python
        from ddbounds.ddsolver import InterfaceSolver

        solver = InterfaceSolver(problems=problems, algebra=algebra, approach="dual_feti")
        for step in solver.iterate(rel_tolerance=1e-8, max_iterations=100):
            print(step.iteration, step.alphas)
        ```
    """

    def __init__(
        self: Self,
        *,
        problems: Sequence[SubdomainProblem],
        algebra: InterfaceAlgebra,
        approach: Approach = "primal_bdd",
        cases: Sequence[int] = (0,),
    ) -> None:
        self._validate_arguments(problems=problems, approach=approach, cases=cases)
        self.problems_ = list(problems)
        self.algebra_ = algebra
        self.approach_ = approach
        self.cases_ = tuple(int(c) for c in cases)
        operators = _PrimalOperators if approach == "primal_bdd" else _DualOperators
        self.operators_ = operators(self.problems_, algebra, self.cases_)

    @staticmethod
    def _validate_arguments(
        *, problems: Sequence[SubdomainProblem], approach: Approach, cases: Sequence[int]
    ) -> None:
        if approach not in _approach_values:
            msg = f"`approach` must be one of {_approach_values}. Found {approach}"
            raise ValueError(msg)
        if not problems:
            msg = "At least one subdomain problem is required."
            raise ValueError(msg)
        n_cases = problems[0].n_cases
        if not cases or any(not 0 <= c < n_cases for c in cases):
            msg = f"`cases` must be a non-empty subset of range({n_cases}). Found {tuple(cases)}"
            raise ValueError(msg)

    @property
    def size(self: Self) -> int:
        """Dimension of the interface unknown."""
        return self.operators_.size

    def fields(self: Self, iterate: np.ndarray, *, iteration: int = 0) -> Tuple[IterationFields, ...]:
        """Extracts `u_D`, `u_N`, `lambda_N` and `alpha` from an interface iterate (one per load case)."""
        u_d, u_n, lam_n, alpha2 = self.operators_.fields(iterate)
        residual = self.operators_.rhs() - self.operators_.apply(iterate)
        norms = np.linalg.norm(residual, axis=0)
        out = []
        for j, case in enumerate(self.cases_):
            out.append(
                IterationFields(
                    iteration=iteration,
                    load_case=case,
                    u_dirichlet=tuple(p.to_local(u[:, [j]], [case])[:, 0] for p, u in zip(self.problems_, u_d)),
                    u_neumann=tuple(p.to_local(u[:, [j]], [case])[:, 0] for p, u in zip(self.problems_, u_n)),
                    reactions=tuple(lam[:, j].copy() for lam in lam_n),
                    alpha=float(np.sqrt(max(alpha2[j], 0.0))),
                    residual_norm=float(norms[j]),
                )
            )
        return tuple(out)

    def iterate(
        self: Self,
        *,
        rel_tolerance: float = 1e-8,
        max_iterations: int = 500,
        augmentation: Optional[np.ndarray] = None,
        initial_guess: Optional[np.ndarray] = None,
    ) -> Generator[IterationStep, None, Tuple[np.ndarray, int]]:
        """Runs the solver lazily, yielding one `IterationStep` per iteration.

        Arguments:
            rel_tolerance: Relative residual tolerance.
            max_iterations: Iteration budget.
            augmentation: Optional interface vectors constraining the Krylov space.
            initial_guess: Optional initial interface iterate, shared by all columns if one-dimensional.

        Returns:
            Through `StopIteration.value`, the search directions and the number of dropped augmentation vectors.
        """
        ops = self.operators_
        deflation = ops.coarse_space()
        if augmentation is not None and augmentation.size:
            if augmentation.shape[0] != ops.size:
                msg = f"Augmentation vectors must have {ops.size} rows. Found {augmentation.shape[0]}"
                raise ValueError(msg)
            deflation = np.hstack([deflation, ops.admissible(augmentation)])

        engine = _block_pcg(
            ops.apply,
            ops.precondition,
            ops.rhs(),
            ops.start(initial_guess),
            deflation,
            rel_tolerance=rel_tolerance,
            max_iterations=max_iterations,
        )
        return (yield from self._steps(engine))

    def _steps(
        self: Self, engine: Generator[_EngineState, None, Tuple[np.ndarray, int]]
    ) -> Generator[IterationStep, None, Tuple[np.ndarray, int]]:
        while True:
            try:
                state = next(engine)
            except StopIteration as stop:
                return stop.value
            alphas = np.sqrt(np.maximum(np.einsum("ij,ij->j", state.r, state.z), 0.0))
            _LOGGER.debug("Iteration %s: residuals %s, alpha %s", state.iteration, state.relative, alphas)
            yield IterationStep(
                iteration=state.iteration,
                relative_residuals=state.relative,
                residual_norms=np.linalg.norm(state.r, axis=0),
                alphas=alphas,
                active=state.active,
                converged=state.converged,
                solver=self,
                iterate=state.x,
            )

    def solve(
        self: Self,
        config: SolverConfig,
        callback: Optional[StepCallback] = None,
        *,
        initial_guess: Optional[np.ndarray] = None,
    ) -> SolveResult:
        """Iterates until convergence, the budget, or a truthy return of `callback`."""
        _LOGGER.info(
            "Starting %s solve: %s interface unknowns, %s columns", self.approach_, self.size, len(self.cases_)
        )
        history: List[IterationStep] = []
        deflated: List[Optional[int]] = [None] * len(self.cases_)
        stopped = False
        generator = self.iterate(
            rel_tolerance=config.rel_tolerance,
            max_iterations=config.max_iterations,
            augmentation=config.augmentation_vectors,
            initial_guess=initial_guess,
        )
        directions, dropped = np.zeros((self.size, 0)), 0
        while True:
            try:
                step = next(generator)
            except StopIteration as stop:
                directions, dropped = stop.value
                break
            history.append(step)
            for j, flag in enumerate(step.active):
                if not flag and deflated[j] is None and not step.converged:
                    deflated[j] = step.iteration
                    _LOGGER.warning("Column %s deflated at iteration %s", j, step.iteration)
            if callback is not None and callback(step):
                stopped = True
                break

        if dropped:
            _LOGGER.warning("Dropped %s linearly dependent augmentation vectors", dropped)
        final = history[-1]
        if not final.converged and not stopped:
            _LOGGER.warning(
                "Solve stopped unconverged after %s iterations (residual %.3e)",
                final.iteration,
                final.relative_residuals.max(initial=0.0),
            )
        if stopped:
            reason = "callback" if config.stop_policy == "tolerance" else config.stop_policy
        else:
            reason = "tolerance" if final.converged else "budget"
        _LOGGER.info("Finished %s solve after %s iterations (%s)", self.approach_, final.iteration, reason)
        return SolveResult(
            approach=self.approach_,
            cases=self.cases_,
            history=tuple(history),
            converged=final.converged,
            stopped_early=stopped,
            directions=directions,
            dropped_augmentation=dropped,
            deflation_iterations=tuple(deflated),
            stop_reason=reason,
        )


def solve_interface(
    problems: Sequence[SubdomainProblem],
    algebra: InterfaceAlgebra,
    config: SolverConfig,
    callback: Optional[StepCallback] = None,
    *,
    initial_guess: Optional[np.ndarray] = None,
    load_case: int = 0,
) -> SolveResult:
    """Solves one load case of the substructured problem.

    Arguments:
        problems: Subdomain problems.
        algebra: Interface algebra.
        config: Solver settings; `augmentation_vectors` are honoured.
        callback: Called with every `IterationStep`; a truthy return stops the solve.
        initial_guess: Optional initial interface iterate.
        load_case: The load case to solve.

    Returns:
        The `SolveResult`, flagged unconverged when the budget is reached.

    Raises:
        SolverBreakdownError: On a direction of significantly negative curvature.
    """
    solver = InterfaceSolver(problems=problems, algebra=algebra, approach=config.approach, cases=(load_case,))
    return solver.solve(config, callback, initial_guess=initial_guess)


def solve_block(
    problems: Sequence[SubdomainProblem],
    algebra: InterfaceAlgebra,
    config: SolverConfig,
    callback: Optional[StepCallback] = None,
    *,
    initial_guess: Optional[np.ndarray] = None,
    cases: Sequence[int] = (0, 1),
) -> SolveResult:
    """Solves the forward and adjoint load cases together by block conjugate gradient.

    A column whose residual falls below `1e-14` of its initial value is deflated and the block continues with the
    remaining ones.
    """
    solver = InterfaceSolver(problems=problems, algebra=algebra, approach=config.approach, cases=cases)
    return solver.solve(config, callback, initial_guess=initial_guess)


def solve_augmented(
    problems: Sequence[SubdomainProblem],
    algebra: InterfaceAlgebra,
    config: SolverConfig,
    callback: Optional[StepCallback] = None,
    *,
    initial_guess: Optional[np.ndarray] = None,
) -> SolveResult:
    """Solves with `config.augmentation_vectors` as constraints; the residual stays orthogonal to them."""
    cases = tuple(range(config.rhs_count))
    solver = InterfaceSolver(problems=problems, algebra=algebra, approach=config.approach, cases=cases)
    return solver.solve(config, callback, initial_guess=initial_guess)


def _interface_transfer(
    refinement: Refinement, coarse: InterfaceAlgebra, fine: InterfaceAlgebra, coarse_dirichlet: np.ndarray
) -> sparse.csr_matrix:
    """Interface-restricted dof prolongation, shape `(fine.n_interface, coarse.n_interface)`."""
    rows = refinement.dof_prolongation[fine.interface_dofs].tocoo()
    position = np.full(refinement.coarse.n_dofs, -1, dtype=np.int64)
    position[coarse.interface_dofs] = np.arange(coarse.n_interface)
    target = position[rows.col]
    outside = (target < 0) & ~coarse_dirichlet[rows.col] & (rows.data != 0)
    if outside.any():
        msg = "The refined interface is not nested in the coarse one."
        raise NonNestedMeshError(msg)
    keep = target >= 0
    return sparse.csr_matrix(
        (rows.data[keep], (rows.row[keep], target[keep])), shape=(fine.n_interface, coarse.n_interface)
    )


def _chains(algebra: InterfaceAlgebra) -> Dict[int, Tuple[List[int], List[int]]]:
    """For every interface dof with connections, its ordered subdomains and the connection rows between them."""
    chains: Dict[int, Tuple[List[int], List[int]]] = {}
    for row, (g, (lo, hi)) in enumerate(zip(algebra.connection_dof.tolist(), algebra.connection_pair.tolist())):
        subdomains, rows = chains.setdefault(g, ([lo], []))
        subdomains.append(hi)
        rows.append(row)
    return chains


def _dual_transfer(transfer: sparse.csr_matrix, coarse: InterfaceAlgebra, fine: InterfaceAlgebra) -> sparse.csr_matrix:
    """Transfers connection multipliers through pairwise jump potentials.

    The potential jump between subdomains `a < b` at a coarse dof is the sum of the chain rows joining them; fine
    connection rows receive the interpolated jumps of their own pair.
    """
    chains = _chains(coarse)
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for row, (g, (a, b)) in enumerate(zip(fine.connection_dof.tolist(), fine.connection_pair.tolist())):
        start, stop = transfer.indptr[g], transfer.indptr[g + 1]
        for cg, weight in zip(transfer.indices[start:stop].tolist(), transfer.data[start:stop].tolist()):
            subdomains, chain_rows = chains.get(cg, ([], []))
            if a not in subdomains or b not in subdomains:
                msg = f"Coarse interface dof {cg} is not shared by subdomains {a} and {b}."
                raise NonNestedMeshError(msg)
            i, j = subdomains.index(a), subdomains.index(b)
            for coarse_row in chain_rows[i:j]:
                rows.append(row)
                cols.append(coarse_row)
                vals.append(weight)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(fine.n_connections, coarse.n_connections))


def project_directions(  # noqa: PLR0913
    directions: np.ndarray,
    refinement: Refinement,
    coarse: InterfaceAlgebra,
    fine: InterfaceAlgebra,
    *,
    approach: Approach = "primal_bdd",
) -> np.ndarray:
    """Carries interface directions from a mesh to its refinement and re-orthonormalizes them.

    Primal directions are interface displacements, prolonged by the interface-restricted linear interpolation. Dual
    directions are connection multipliers, prolonged through the pairwise jumps they describe.

    Arguments:
        directions: Coarse interface vectors, shape `(n_coarse, k)`.
        refinement: The refinement linking both meshes; subdomains must be inherited by the children.
        coarse: Interface algebra of the coarse split.
        fine: Interface algebra of the fine split.
        approach: The space the directions live in.

    Returns:
        An orthonormal basis of the prolonged span. Directions whose singular value falls below `1e-10` of the largest
        are dropped with a warning.

    Raises:
        NonNestedMeshError: If a fine interface dof interpolates from coarse dofs that are not on the interface.
    """
    if approach not in _approach_values:
        msg = f"`approach` must be one of {_approach_values}. Found {approach}"
        raise ValueError(msg)
    directions = np.asarray(directions, dtype=float)
    coarse_dirichlet = np.repeat(refinement.coarse.dirichlet_nodes, 2)
    transfer = _interface_transfer(refinement, coarse, fine, coarse_dirichlet)
    if approach == "dual_feti":
        transfer = _dual_transfer(transfer, coarse, fine)

    prolonged = transfer @ directions.reshape(transfer.shape[1], -1)
    if prolonged.shape[1] == 0 or prolonged.shape[0] == 0:
        return np.zeros((transfer.shape[0], 0))
    u, s, _ = linalg.svd(prolonged, full_matrices=False)
    keep = s > PROJECTION_RANK_THRESHOLD * s.max() if s.max() > 0 else np.zeros(s.size, dtype=bool)
    if (~keep).any():
        _LOGGER.warning("Dropped %s directions that became dependent on the refined interface", int((~keep).sum()))
    return u[:, keep]


def global_displacement(problems: Sequence[SubdomainProblem], local: Sequence[np.ndarray], n_dofs: int) -> np.ndarray:
    """Gathers continuous local displacements into a global vector (the last writer wins on shared dofs)."""
    out = np.zeros(n_dofs)
    for p, u in zip(problems, local):
        out[p.global_dofs] = u
    return out
