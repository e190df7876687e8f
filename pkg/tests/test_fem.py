from __future__ import annotations

from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from ddbounds.driver import BenchmarkProblem
from ddbounds.fem import ElementStress
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.fem import NodalField
from ddbounds.fem import assemble_load
from ddbounds.fem import assemble_stiffness
from ddbounds.fem import dirichlet_data
from ddbounds.fem import dirichlet_dofs
from ddbounds.fem import element_prestress
from ddbounds.fem import energy_norm
from ddbounds.fem import evaluate_exact_benchmark
from ddbounds.fem import exact_energy_error
from ddbounds.fem import residual_functional
from ddbounds.fem import solve_dirichlet_direct
from ddbounds.fem import strains
from ddbounds.fem import stresses
from ddbounds.mesh import Mesh
from ddbounds.mesh import build_structured_rectangle
from ddbounds.mesh import refine_by_splitting
from ddbounds.utils._errors import SingularSystemError


def _rigid_modes(mesh: Mesh) -> np.ndarray:
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    ones, zeros = np.ones_like(x), np.zeros_like(x)
    return np.stack(
        [
            np.column_stack([ones, zeros]).ravel(),
            np.column_stack([zeros, ones]).ravel(),
            np.column_stack([-y, x]).ravel(),
        ],
        axis=1,
    )


def _solve(problem: BenchmarkProblem) -> np.ndarray:
    mesh = problem.mesh
    K = assemble_stiffness(mesh, problem.material)
    f = assemble_load(mesh, problem.loads, problem.quadrature_degree)
    return solve_dirichlet_direct(K, f, dirichlet_dofs(mesh), dirichlet_data(mesh, problem.loads)).displacement


@pytest.mark.parametrize(
    "young_modulus, poisson_ratio, hypothesis, context",
    [
        (1.0, 0.3, "plane_strain", does_not_raise()),
        (210.0, 0.0, "plane_stress", does_not_raise()),
        (0.0, 0.3, "plane_strain", pytest.raises(ValueError, match="`young_modulus` must be strictly positive")),
        (1.0, 0.5, "plane_strain", pytest.raises(ValueError, match="`poisson_ratio` must lie in")),
        (1.0, 0.3, "axisymmetric", pytest.raises(ValueError, match="`hypothesis` must be one of")),
    ],
)
def test_material(young_modulus, poisson_ratio, hypothesis, context):
    """Tests the validation and the Hooke matrix of the material."""
    with context:
        material = Material(young_modulus=young_modulus, poisson_ratio=poisson_ratio, hypothesis=hypothesis)
        np.testing.assert_allclose(material.hooke, material.hooke.T)
        np.testing.assert_allclose(material.hooke @ material.compliance, np.eye(3), atol=1e-12)
        assert np.all(np.linalg.eigvalsh(material.hooke) > 0)


def test_material_plane_stress_values():
    """Tests the plane stress Hooke matrix against its closed form."""
    material = Material(young_modulus=2.0, poisson_ratio=0.25, hypothesis="plane_stress")
    c = 2.0 / (1.0 - 0.25**2)
    np.testing.assert_allclose(material.hooke, c * np.array([[1.0, 0.25, 0.0], [0.25, 1.0, 0.0], [0.0, 0.0, 0.375]]))


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"tractions": {"pull": lambda x, y: np.zeros((2, *np.shape(x)))}}, "must start with 'neumann:'"),
        ({"prestress": {"omega": [1.0, 0.0]}}, "Voigt vectors of length 3"),
    ],
)
def test_loadset_validation(kwargs, match):
    """Tests the validation of the load set."""
    with pytest.raises(ValueError, match=match):
        LoadSet(**kwargs)


def test_nodal_field_and_stress_validation(unit_square: Mesh):
    """Tests length and finiteness checks of the field containers."""
    assert NodalField(unit_square, np.zeros(8)).values.shape == (4, 2)
    with pytest.raises(ValueError, match="needs 8 values"):
        NodalField(unit_square, np.zeros(6))
    with pytest.raises(ValueError, match="must be finite"):
        ElementStress(np.array([[np.nan, 0.0, 0.0]]))


def test_stiffness_kernel(small_square: Mesh, material: Material):
    """The unconstrained stiffness is symmetric and annihilates the rigid body modes."""
    K = assemble_stiffness(small_square, material)
    assert abs(K - K.T).max() < 1e-14
    np.testing.assert_allclose(K @ _rigid_modes(small_square), 0.0, atol=1e-12)

    u = np.random.default_rng(0).normal(size=small_square.n_dofs)
    assert u @ K @ u == pytest.approx(energy_norm(small_square, material, u) ** 2)


def test_load_resultants(cantilever: Mesh, pull_loads: LoadSet):
    """A constant body force and a constant traction are distributed with the right resultant."""

    def _gravity(x: np.ndarray, y: np.ndarray) -> np.ndarray:  # noqa: ARG001
        return np.stack([np.zeros_like(x), -np.ones_like(x)])

    f = assemble_load(cantilever, LoadSet(body_force=_gravity))
    assert f[0::2].sum() == pytest.approx(0.0)
    assert f[1::2].sum() == pytest.approx(-2.0)

    g = assemble_load(cantilever, pull_loads)
    assert g[0::2].sum() == pytest.approx(1.0)
    assert g[1::2].sum() == pytest.approx(0.0)
    assert np.all(g[0::2][cantilever.nodes[:, 0] < 2.0 - 1e-9] == 0.0)


def test_load_prestress(small_square: Mesh, material: Material):
    """A prestress load is the work of a constant stress over its region."""
    loads = LoadSet(prestress={"omega": np.array([1.0, 0.0, 0.0])})
    f = assemble_load(small_square, loads)
    u = np.column_stack([small_square.nodes[:, 0], np.zeros(small_square.n_nodes)]).ravel()
    assert f @ u == pytest.approx(2.0)

    prestress = element_prestress(small_square, loads)
    assert np.count_nonzero(prestress[:, 0]) == 4


@pytest.mark.parametrize(
    "loads, match",
    [
        (LoadSet(tractions={"neumann:top": lambda x, y: np.zeros((2, *np.shape(x)))}), "Unknown traction tags"),
        (LoadSet(prestress={"gamma": np.ones(3)}), "Unknown region"),
    ],
)
def test_load_unknown_labels(small_square: Mesh, loads: LoadSet, match: str):
    """Tests that loads on absent tags or regions are rejected."""
    with pytest.raises(ValueError, match=match):
        assemble_load(small_square, loads)


def test_load_quadrature_degree(small_square: Mesh):
    """Tests the quadrature degree validation."""
    with pytest.raises(ValueError, match="`quadrature_degree` must be at least 1"):
        assemble_load(small_square, LoadSet(), quadrature_degree=0)


def test_patch_test(material: Material):
    """Linear Dirichlet data without body force is reproduced exactly."""
    mesh = build_structured_rectangle(4, 3, (0.0, 2.0, 0.0, 1.0))

    def _linear(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.stack([x + 2.0 * y, 3.0 * x - y])

    u = _solve(
        BenchmarkProblem(name="patch", mesh=mesh, material=material, loads=LoadSet(dirichlet_values=_linear))
    )
    expected = _linear(mesh.nodes[:, 0], mesh.nodes[:, 1]).T.ravel()
    np.testing.assert_allclose(u, expected, atol=1e-12)
    np.testing.assert_allclose(strains(mesh, u), np.tile([1.0, -1.0, 5.0], (mesh.n_elements, 1)), atol=1e-12)


def test_reactions_balance_loads(cantilever: Mesh, material: Material, pull_loads: LoadSet):
    """Nodal reactions on the clamped edge balance the applied traction."""
    K = assemble_stiffness(cantilever, material)
    f = assemble_load(cantilever, pull_loads)
    solution = solve_dirichlet_direct(K, f, dirichlet_dofs(cantilever))
    reactions_x = solution.reactions[0::2]
    assert reactions_x.sum() == pytest.approx(-1.0)
    assert solution.displacement[0::2].max() > 0


def test_direct_solve_without_dirichlet(cantilever: Mesh, material: Material, pull_loads: LoadSet):
    """A floating structure cannot be solved directly."""
    K = assemble_stiffness(cantilever, material)
    f = assemble_load(cantilever, pull_loads)
    with pytest.raises(SingularSystemError, match="no Dirichlet dof"):
        solve_dirichlet_direct(K, f, np.zeros(0, dtype=np.int64))


def test_exact_benchmark_vanishes_on_boundary():
    """The analytic displacement is zero on the whole boundary of `[-3, 3]^2`."""
    s = np.linspace(-3.0, 3.0, 11)
    for x, y in [(s, np.full_like(s, -3.0)), (s, np.full_like(s, 3.0)), (np.full_like(s, 3.0), s)]:
        np.testing.assert_allclose(evaluate_exact_benchmark(x, y).displacement, 0.0, atol=1e-12)


def test_exact_benchmark_body_force_balance(square_problem: BenchmarkProblem):
    """The body force equals minus the divergence of the analytic stress (central differences)."""
    x, y, step = np.array([0.3, -1.2]), np.array([0.7, 2.1]), 1e-5
    exact = evaluate_exact_benchmark(x, y)
    sx = (evaluate_exact_benchmark(x + step, y).stress - evaluate_exact_benchmark(x - step, y).stress) / (2 * step)
    sy = (evaluate_exact_benchmark(x, y + step).stress - evaluate_exact_benchmark(x, y - step).stress) / (2 * step)
    np.testing.assert_allclose(exact.body_force, -np.stack([sx[0] + sy[2], sx[2] + sy[1]]), rtol=1e-6, atol=1e-6)
    assert square_problem.exact_strain(x, y).shape == (3, 2)


def test_exact_error_decreases_with_refinement(square_problem: BenchmarkProblem):
    """The energy error of the direct solution decreases under uniform refinement."""
    coarse = _solve(square_problem)
    fine_problem = square_problem.with_mesh(refine_by_splitting(square_problem.mesh).fine)
    fine = _solve(fine_problem)

    e_coarse = exact_energy_error(square_problem.mesh, square_problem.material, coarse, square_problem.exact_strain)
    e_fine = exact_energy_error(fine_problem.mesh, fine_problem.material, fine, fine_problem.exact_strain)
    assert 0 < e_fine < e_coarse


def test_energy_norm_of_stress_matches_displacement(small_square: Mesh, material: Material):
    """The complementary energy of `H eps(u)` equals the energy of `u`."""
    u = np.random.default_rng(1).normal(size=small_square.n_dofs)
    sigma = stresses(small_square, material, u)
    assert energy_norm(small_square, material, sigma) == pytest.approx(energy_norm(small_square, material, u))

    subset = small_square.region_tags["omega"]
    assert energy_norm(small_square, material, u, subset) < energy_norm(small_square, material, u)


def test_residual_vanishes_on_galerkin_solution(square_problem: BenchmarkProblem):
    """Galerkin orthogonality: the residual of the discrete solution vanishes on the discrete space."""
    mesh, material, loads = square_problem.mesh, square_problem.material, square_problem.loads
    u = _solve(square_problem)
    w = np.random.default_rng(2).normal(size=mesh.n_dofs)
    w[dirichlet_dofs(mesh)] = 0.0

    scale = abs(float(w @ assemble_load(mesh, loads)))
    assert abs(residual_functional(mesh, material, loads, u, w)) < 1e-9 * scale

    refinement = refine_by_splitting(mesh)
    fine_w = refinement.prolong(w)
    assert abs(residual_functional(mesh, material, loads, u, fine_w, refinement=refinement)) < 1e-8 * scale


def test_residual_requires_homogeneous_test(square_problem: BenchmarkProblem):
    """Tests that the test field must vanish on the Dirichlet boundary."""
    mesh = square_problem.mesh
    with pytest.raises(ValueError, match="must vanish on the Dirichlet boundary"):
        residual_functional(
            mesh, square_problem.material, square_problem.loads, np.zeros(mesh.n_dofs), np.ones(mesh.n_dofs)
        )
