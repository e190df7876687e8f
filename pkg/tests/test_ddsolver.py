from __future__ import annotations

from contextlib import nullcontext as does_not_raise
from typing import List
from typing import Tuple

import numpy as np
import pytest

from ddbounds.ddsolver import InterfaceSolver
from ddbounds.ddsolver import IterationFields
from ddbounds.ddsolver import SolverConfig
from ddbounds.ddsolver import global_displacement
from ddbounds.ddsolver import project_directions
from ddbounds.ddsolver import solve_augmented
from ddbounds.ddsolver import solve_block
from ddbounds.ddsolver import solve_interface
from ddbounds.driver import BenchmarkProblem
from ddbounds.fem import LoadSet
from ddbounds.fem import assemble_load
from ddbounds.fem import assemble_stiffness
from ddbounds.fem import dirichlet_dofs
from ddbounds.fem import solve_dirichlet_direct
from ddbounds.mesh import partition_regular
from ddbounds.mesh import refine_by_splitting
from ddbounds.substructure import InterfaceAlgebra
from ddbounds.substructure import SubdomainProblem
from ddbounds.substructure import split_problem
from ddbounds.utils._errors import NonNestedMeshError

Split = Tuple[List[SubdomainProblem], InterfaceAlgebra]

APPROACHES = ["primal_bdd", "dual_feti"]


@pytest.fixture()
def adjoint_loads() -> LoadSet:
    """Unit `sigma_xx` prestress on the region of interest."""
    return LoadSet(prestress={"omega": np.array([1.0, 0.0, 0.0])})


@pytest.fixture()
def split(square_problem: BenchmarkProblem, adjoint_loads: LoadSet) -> Split:
    """Forward and adjoint load cases of the square benchmark on a 3x3 grid of subdomains."""
    partition = partition_regular(square_problem.mesh, (3, 3))
    return split_problem(
        square_problem.mesh, partition, square_problem.material, [square_problem.loads, adjoint_loads]
    )


def _direct(problem: BenchmarkProblem, loads: LoadSet) -> np.ndarray:
    mesh = problem.mesh
    K = assemble_stiffness(mesh, problem.material)
    return solve_dirichlet_direct(K, assemble_load(mesh, loads), dirichlet_dofs(mesh)).displacement


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _energy_gap(problems: List[SubdomainProblem], fields: IterationFields) -> float:
    total = 0.0
    for p, u_d, u_n in zip(problems, fields.u_dirichlet, fields.u_neumann):
        d = u_n - u_d
        total += float(d @ p.stiffness @ d)
    return total


@pytest.mark.parametrize(
    "kwargs, context",
    [
        ({}, does_not_raise()),
        ({"approach": "dual_feti", "rhs_count": 2}, does_not_raise()),
        ({"approach": "schwarz"}, pytest.raises(ValueError, match="`approach` must be one of")),
        ({"rel_tolerance": 0.0}, pytest.raises(ValueError, match="`rel_tolerance` must be strictly positive")),
        ({"max_iterations": -1}, pytest.raises(ValueError, match="`max_iterations` must be non-negative")),
        ({"rhs_count": 3}, pytest.raises(ValueError, match="`rhs_count` must be 1 or 2")),
        ({"stop_policy": "never"}, pytest.raises(ValueError, match="`stop_policy` must be one of")),
    ],
)
def test_solver_config(kwargs, context):
    """Tests the validation of the solver settings."""
    with context:
        SolverConfig(**kwargs)


def test_solver_config_reshapes_augmentation():
    """A single augmentation vector becomes a one column block."""
    config = SolverConfig(augmentation_vectors=np.ones(5))
    assert config.augmentation_vectors.shape == (5, 1)


@pytest.mark.parametrize(
    "approach, cases, match",
    [
        ("schwarz", (0,), "`approach` must be one of"),
        ("primal_bdd", (), "`cases` must be a non-empty subset"),
        ("primal_bdd", (2,), "`cases` must be a non-empty subset"),
    ],
)
def test_interface_solver_validation(split: Split, approach, cases, match):
    """Tests the validation of the solver arguments."""
    problems, algebra = split
    with pytest.raises(ValueError, match=match):
        InterfaceSolver(problems=problems, algebra=algebra, approach=approach, cases=cases)


@pytest.mark.parametrize("approach", APPROACHES)
def test_solve_matches_direct(square_problem: BenchmarkProblem, split: Split, approach: str):
    """Both approaches converge to the direct solution of the assembled problem."""
    problems, algebra = split
    result = solve_interface(problems, algebra, SolverConfig(approach=approach, rel_tolerance=1e-10))

    assert result.converged
    assert not result.stopped_early
    assert 0 < result.iterations <= algebra.n_interface
    assert result.last_residual <= 1e-10
    assert result.first_residual > result.last_residual

    fields = result.fields[0]
    reference = _direct(square_problem, square_problem.loads)
    n_dofs = square_problem.mesh.n_dofs
    assert _relative(global_displacement(problems, fields.u_dirichlet, n_dofs), reference) < 1e-7
    assert _relative(global_displacement(problems, fields.u_neumann, n_dofs), reference) < 1e-7
    K = assemble_stiffness(square_problem.mesh, square_problem.material)
    assert fields.alpha < 1e-6 * np.sqrt(reference @ K @ reference)


@pytest.mark.parametrize("approach", APPROACHES)
def test_iteration_fields_are_admissible(split: Split, approach: str):
    """At every iteration `u_D` is continuous, `u_N` is locally balanced and `alpha` is their energy distance."""
    problems, algebra = split
    result = solve_interface(problems, algebra, SolverConfig(approach=approach, max_iterations=3))

    for step in result.history:
        fields = step.fields[0]
        assert fields.iteration == step.iteration
        assert fields.alpha == pytest.approx(step.alphas[0], rel=1e-6, abs=1e-12)
        assert fields.alpha**2 == pytest.approx(_energy_gap(problems, fields), rel=1e-6)

        traces = [u[p.dofs_b] for p, u in zip(problems, fields.u_dirichlet)]
        jumps = algebra.assemble_dual(traces)
        np.testing.assert_allclose(jumps, 0.0, atol=1e-8 * max(np.abs(np.hstack(traces)).max(), 1.0))

        reactions = algebra.assemble_primal(list(fields.reactions))
        scale = max(max(np.abs(r).max(initial=0.0) for r in fields.reactions), 1.0)
        np.testing.assert_allclose(reactions, 0.0, atol=1e-8 * scale)

        for p, u_n, lam in zip(problems, fields.u_neumann, fields.reactions):
            rhs = p.load_r[:, 0].copy()
            rhs[: p.n_b] += lam
            np.testing.assert_allclose(p.k_rr @ u_n[p.dofs_r], rhs, atol=1e-8 * max(np.linalg.norm(rhs), 1.0))


@pytest.mark.parametrize("approach", APPROACHES)
def test_solve_from_initial_guess(split: Split, approach: str):
    """A random initial iterate converges to the same solution."""
    problems, algebra = split
    config = SolverConfig(approach=approach, rel_tolerance=1e-10)
    reference = solve_interface(problems, algebra, config)
    solver = InterfaceSolver(problems=problems, algebra=algebra, approach=approach)
    guess = np.random.default_rng(6).normal(size=solver.size)
    result = solve_interface(problems, algebra, config, initial_guess=guess)

    assert result.converged
    n_dofs = max(int(p.global_dofs.max()) for p in problems) + 1
    a = global_displacement(problems, result.fields[0].u_dirichlet, n_dofs)
    b = global_displacement(problems, reference.fields[0].u_dirichlet, n_dofs)
    assert _relative(a, b) < 1e-7


@pytest.mark.parametrize("approach", APPROACHES)
def test_block_solve_matches_single_solves(split: Split, approach: str):
    """Forward and adjoint columns solved together agree with separate solves."""
    problems, algebra = split
    config = SolverConfig(approach=approach, rel_tolerance=1e-10, rhs_count=2)
    block = solve_block(problems, algebra, config)
    assert block.converged
    assert block.cases == (0, 1)
    assert len(block.fields) == 2

    for case in (0, 1):
        single = solve_interface(problems, algebra, config, load_case=case)
        n_dofs = max(int(p.global_dofs.max()) for p in problems) + 1
        a = global_displacement(problems, block.fields[case].u_dirichlet, n_dofs)
        b = global_displacement(problems, single.fields[0].u_dirichlet, n_dofs)
        assert block.fields[case].load_case == case
        assert _relative(a, b) < 1e-7


@pytest.mark.parametrize("approach", APPROACHES)
def test_augmented_solve_reuses_directions(split: Split, approach: str):
    """Recycling the search directions of a solve makes a second solve of the same problem immediate."""
    problems, algebra = split
    first = solve_interface(problems, algebra, SolverConfig(approach=approach, rel_tolerance=1e-10))
    size = algebra.n_interface if approach == "primal_bdd" else algebra.n_connections
    assert first.directions.shape[0] == size

    config = SolverConfig(approach=approach, rel_tolerance=1e-8, augmentation_vectors=first.directions)
    second = solve_augmented(problems, algebra, config)
    assert second.converged
    assert second.iterations <= 1


def test_callback_stops_the_solve(split: Split):
    """A truthy callback return ends the solve early."""
    problems, algebra = split
    seen = []

    def _callback(step) -> bool:
        seen.append(step.iteration)
        return step.iteration == 2

    result = solve_interface(problems, algebra, SolverConfig(rel_tolerance=1e-12), _callback)
    assert result.stopped_early
    assert not result.converged
    assert result.iterations == 2
    assert seen == [0, 1, 2]


@pytest.mark.parametrize(
    "stop_policy, stop_at, max_iterations, expected",
    [
        ("tolerance", None, 500, "tolerance"),
        ("tolerance", None, 1, "budget"),
        ("tolerance", 2, 500, "callback"),
        ("envelope", 2, 500, "envelope"),
        ("discr_tenth", 1, 500, "discr_tenth"),
    ],
)
def test_stop_reason_follows_stop_policy(split: Split, stop_policy, stop_at, max_iterations, expected):
    """The configured rule names a callback stop; convergence and the budget keep their own labels."""
    problems, algebra = split
    config = SolverConfig(rel_tolerance=1e-10, max_iterations=max_iterations, stop_policy=stop_policy)
    result = solve_interface(problems, algebra, config, lambda step: step.iteration == stop_at)
    assert result.stop_reason == expected
    assert result.stopped_early == (stop_at is not None)


def test_zero_budget_returns_initial_iterate(split: Split):
    """With no iteration allowed the history holds the initial iterate only."""
    problems, algebra = split
    result = solve_interface(problems, algebra, SolverConfig(max_iterations=0))
    assert len(result.history) == 1
    assert not result.converged
    assert result.directions.shape[1] == 0


def test_augmentation_size_mismatch(split: Split):
    """Tests that augmentation vectors must live on the interface."""
    problems, algebra = split
    config = SolverConfig(augmentation_vectors=np.ones((3, 1)))
    with pytest.raises(ValueError, match="Augmentation vectors must have"):
        solve_augmented(problems, algebra, config)


@pytest.mark.parametrize("approach", APPROACHES)
def test_project_directions(square_problem: BenchmarkProblem, approach: str):
    """Directions carried to the refined interface form an orthonormal block."""
    mesh = square_problem.mesh
    partition = partition_regular(mesh, (3, 3))
    problems, algebra = split_problem(mesh, partition, square_problem.material, square_problem.loads)
    result = solve_interface(problems, algebra, SolverConfig(approach=approach, rel_tolerance=1e-10))

    refinement = refine_by_splitting(mesh)
    _, fine_algebra = split_problem(
        refinement.fine, partition.refine(refinement), square_problem.material, square_problem.loads
    )
    projected = project_directions(result.directions, refinement, algebra, fine_algebra, approach=approach)

    n_fine = fine_algebra.n_interface if approach == "primal_bdd" else fine_algebra.n_connections
    assert projected.shape[0] == n_fine
    assert 0 < projected.shape[1] <= result.directions.shape[1]
    np.testing.assert_allclose(projected.T @ projected, np.eye(projected.shape[1]), atol=1e-10)


@pytest.mark.parametrize("approach", APPROACHES)
def test_recycled_directions_save_iterations_after_refinement(square_problem: BenchmarkProblem, approach: str):
    """Augmenting the solve on the split mesh with the projected directions never costs iterations."""
    mesh, material = square_problem.mesh, square_problem.material
    partition = partition_regular(mesh, (3, 3))
    problems, algebra = split_problem(mesh, partition, material, square_problem.loads)
    coarse = solve_interface(problems, algebra, SolverConfig(approach=approach, rel_tolerance=1e-8))

    refinement = refine_by_splitting(mesh)
    fine_problems, fine_algebra = split_problem(
        refinement.fine, partition.refine(refinement), material, square_problem.loads
    )
    projected = project_directions(coarse.directions, refinement, algebra, fine_algebra, approach=approach)

    plain = solve_interface(fine_problems, fine_algebra, SolverConfig(approach=approach, rel_tolerance=1e-8))
    config = SolverConfig(approach=approach, rel_tolerance=1e-8, augmentation_vectors=projected)
    augmented = solve_augmented(fine_problems, fine_algebra, config)
    assert plain.converged
    assert augmented.converged
    assert augmented.iterations <= plain.iterations


def test_project_directions_rejects_non_nested_interface(square_problem: BenchmarkProblem):
    """A refined mesh cut along new lines has no coarse interface to interpolate from."""
    mesh = square_problem.mesh
    _, algebra = split_problem(
        mesh, partition_regular(mesh, (3, 3)), square_problem.material, square_problem.loads
    )
    refinement = refine_by_splitting(mesh)
    _, fine_algebra = split_problem(
        refinement.fine, partition_regular(refinement.fine, (2, 2)), square_problem.material, square_problem.loads
    )
    with pytest.raises(NonNestedMeshError, match="not nested"):
        project_directions(np.ones((algebra.n_interface, 1)), refinement, algebra, fine_algebra)


def test_project_directions_invalid_approach(square_problem: BenchmarkProblem):
    """Tests the approach validation."""
    mesh = square_problem.mesh
    _, algebra = split_problem(
        mesh, partition_regular(mesh, (2, 2)), square_problem.material, square_problem.loads
    )
    refinement = refine_by_splitting(mesh)
    with pytest.raises(ValueError, match="`approach` must be one of"):
        project_directions(np.ones((algebra.n_interface, 1)), refinement, algebra, algebra, approach="schwarz")
