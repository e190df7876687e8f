from __future__ import annotations

import json
import logging
from contextlib import nullcontext as does_not_raise
from dataclasses import replace

import numpy as np
import pytest

from ddbounds import driver
from ddbounds.bounds import GOAL_COLUMNS
from ddbounds.bounds import BoundsRecord
from ddbounds.driver import HSWEEP_COLUMNS
from ddbounds.driver import SUMMARY_FILE
from ddbounds.driver import AdaptivePlan
from ddbounds.driver import CycleReport
from ddbounds.driver import HSweepRow
from ddbounds.driver import RunReport
from ddbounds.driver import StopPolicy
from ddbounds.driver import cracked_benchmark
from ddbounds.driver import emit_reports
from ddbounds.driver import load_report
from ddbounds.driver import random_start
from ddbounds.driver import run_adaptive
from ddbounds.driver import run_estimate
from ddbounds.driver import run_global_benchmark
from ddbounds.driver import smooth_start
from ddbounds.driver import square_benchmark
from ddbounds.mesh import partition_regular
from ddbounds.utils._errors import ReportError
from ddbounds.utils._funcs import is_strictly_decreasing


@pytest.mark.parametrize(
    "kwargs, context",
    [
        ({}, does_not_raise()),
        ({"kind": "envelope", "tolerance": 1e-6, "max_iterations": 10}, does_not_raise()),
        ({"kind": "never"}, pytest.raises(ValueError, match="`kind` must be one of")),
        ({"tolerance": 0.0}, pytest.raises(ValueError, match="`tolerance` must be strictly positive")),
        ({"max_iterations": 0}, pytest.raises(ValueError, match="`max_iterations` must be at least 1")),
    ],
)
def test_stop_policy_validation(kwargs, context):
    """Tests the validation of the stopping rule."""
    with context:
        StopPolicy(**kwargs)


@pytest.mark.parametrize(
    "kind, alphas, rho_discr, expected",
    [
        ("tolerance", [0.0], [1.0], False),
        ("envelope", [0.5], [1.0], True),
        ("envelope", [1.5], [1.0], False),
        ("envelope", [0.5, 0.5], [1.0, None], False),
        ("envelope", [0.5, 0.9], [1.0, 0.8], False),
        ("discr_tenth", [0.05], [1.0], True),
        ("discr_tenth", [0.5], [1.0], False),
    ],
)
def test_stop_policy_is_met(kind, alphas, rho_discr, expected):
    """Every column must have its `alpha` below the threshold of its own `rho_discr`."""
    assert StopPolicy(kind=kind).is_met(alphas, rho_discr) is expected


def test_stop_policy_threshold():
    """Tests the thresholds of each rule."""
    assert StopPolicy().threshold(2.0) == 0.0
    assert StopPolicy(kind="envelope").threshold(2.0) == 2.0
    assert StopPolicy(kind="discr_tenth").threshold(2.0) == pytest.approx(0.2)


@pytest.mark.parametrize(
    "kwargs, context",
    [
        ({}, does_not_raise()),
        ({"target_precision": 0.0}, pytest.raises(ValueError, match="`target_precision` must be strictly positive")),
        ({"max_cycles": 0}, pytest.raises(ValueError, match="`max_cycles` must be at least 1")),
        ({"refinement": "bisection"}, pytest.raises(ValueError, match="`refinement` must be one of")),
        ({"patch_refinement": 0}, pytest.raises(ValueError, match="`patch_refinement` must be at least 1")),
    ],
)
def test_adaptive_plan_validation(kwargs, context):
    """Tests the validation of the adaptive plan."""
    with context:
        AdaptivePlan(**kwargs)


def test_benchmarks():
    """Tests the built-in problems."""
    square = square_benchmark(6)
    assert square.name == "square-6"
    assert square.qoi_region == "omega"
    assert square.exact is not None
    assert square.with_options(quadrature_degree=4).quadrature_degree == 4

    cracked = cracked_benchmark(4)
    assert cracked.material.hypothesis == "plane_stress"
    with pytest.raises(ValueError, match="has no analytic solution"):
        cracked.exact_strain(np.zeros(1), np.zeros(1))


def test_start_functions():
    """Seeded and smooth starts are reproducible."""
    np.testing.assert_allclose(random_start(2.0, seed=1)(5), random_start(2.0, seed=1)(5))
    assert random_start(1.0, seed=1)(4).shape == (4,)
    np.testing.assert_allclose(smooth_start(1.0)(3), np.sin(0.5 * np.arange(3) + 0.3))


def test_cycle_zero_crossing():
    """The separated lower bound crossing is read from the forward records."""

    def _record(iteration: int, rho_bis: float) -> BoundsRecord:
        return BoundsRecord(iteration, 1.0, 1.0, 0.5, 0.5, 0.0, rho_bis, 0.5)

    cycle = CycleReport(
        cycle=0,
        n_elements=8,
        n_dofs=18,
        h=1.0,
        n_subdomains=1,
        iterations=3,
        cumulative_iterations=3,
        augmentation_size=0,
        first_residual=1.0,
        last_residual=1e-9,
        stop_reason="tolerance",
        forward=(_record(1, -0.2), _record(3, 0.1)),
    )
    assert cycle.zero_crossing == 3


def test_global_benchmark_and_reports(tmp_path):
    """A one mesh h-sweep writes its tables and reads back from the summary."""
    report = run_global_benchmark([6], (3, 3), r=2)
    assert report.kind == "hsweep"
    assert report.status == "completed"
    assert report.slopes == {}

    (row,) = report.hsweep
    assert row.n_dofs == square_benchmark(6).mesh.n_dofs
    assert row.rho <= row.true_error * (1 + 1e-8)
    assert row.true_error <= row.theta * (1 + 1e-8)
    assert row.rho_seq <= row.theta_seq
    assert row.iterations == report.cycles[0].iterations

    (cycle,) = report.cycles
    assert cycle.n_subdomains == 9
    assert cycle.stop_reason == "tolerance"
    assert [r.iteration for r in cycle.forward] == [1, cycle.iterations]
    assert sum(e**2 for e in cycle.eta) == pytest.approx(1.0)

    written = emit_reports(report, tmp_path)
    names = {p.name for p in written}
    assert {"iterations_c0_forward.csv", "eta_c0.csv", "goal.csv", "hsweep.csv", SUMMARY_FILE} == names

    header = (tmp_path / "iterations_c0_forward.csv").read_text().splitlines()[0]
    assert header.split(",")[-1] == "true_error"
    table = np.loadtxt(tmp_path / "hsweep.csv", delimiter=",", skiprows=1, ndmin=2)
    assert table.shape == (1, len(HSWEEP_COLUMNS))

    loaded = load_report(tmp_path)
    assert loaded.hsweep == report.hsweep
    assert loaded.cycles[0].forward == report.cycles[0].forward
    assert loaded.cycles[0].eta == report.cycles[0].eta


def test_empty_report_writes_headers(tmp_path):
    """Tables without rows keep their header."""
    written = emit_reports(RunReport(kind="estimate", problem="empty", approach="primal_bdd"), tmp_path / "out")
    assert len(written) == 3
    assert (tmp_path / "out" / "goal.csv").read_text().strip() == ",".join(GOAL_COLUMNS)
    assert (tmp_path / "out" / "hsweep.csv").read_text().strip() == ",".join(HSWEEP_COLUMNS)
    payload = json.loads((tmp_path / "out" / SUMMARY_FILE).read_text())
    assert payload["cycles"] == []
    assert payload["status"] == "completed"


def test_report_slopes():
    """Slopes are fitted once two meshes are swept."""
    rows = tuple(
        HSweepRow(
            mesh=i, h=h, n_dofs=0, true_error=h, theta=2 * h, rho=0.5 * h**2, theta_seq=0.0, rho_seq=0.0, iterations=1
        )
        for i, h in enumerate([1.0, 0.5, 0.25])
    )
    slopes = RunReport(kind="hsweep", problem="square", approach="dual_feti", hsweep=rows).slopes
    assert slopes["true_error"] == pytest.approx(1.0)
    assert slopes["theta"] == pytest.approx(1.0)
    assert slopes["rho"] == pytest.approx(2.0)


def test_load_report_missing(tmp_path):
    """Tests that a missing summary raises a report error."""
    with pytest.raises(ReportError, match="Cannot read report"):
        load_report(tmp_path)


def test_adaptive_budget_exhausted():
    """An unreachable precision uses every cycle, recycling directions on the refined meshes."""
    problem = square_benchmark(6)
    plan = AdaptivePlan(target_precision=1e-9, max_cycles=2, patch_refinement=2)
    report = run_adaptive(problem, plan)

    assert report.status == "budget_exhausted"
    assert len(report.cycles) == 2
    first, second = report.cycles
    assert second.n_elements == 4 * first.n_elements
    assert first.augmentation_size == 0
    assert second.augmentation_size > 0
    assert second.cumulative_iterations == first.iterations + second.iterations

    for cycle in report.cycles:
        assert cycle.goal is not None
        assert cycle.goal.mesh == cycle.cycle
        assert len(cycle.adjoint) >= 1
        assert cycle.goal.contains(cycle.exact_quantity, slack=1e-8 * abs(cycle.exact_quantity))


def test_adaptive_target_met():
    """A loose target is met on the first mesh."""
    plan = AdaptivePlan(target_precision=1e6, max_cycles=3, patch_refinement=2)
    report = run_adaptive(square_benchmark(6), plan)
    assert report.status == "met"
    assert len(report.cycles) == 1


def test_hsweep_without_exact_solution_writes_nan(tmp_path, monkeypatch):
    """A mesh without a known solution reports a NaN true error, not zero."""
    monkeypatch.setattr(driver, "_true_error_function", lambda problem, problems: None)
    report = run_global_benchmark([6], (2, 2), r=2)
    (row,) = report.hsweep
    assert np.isnan(row.true_error)
    assert row.theta > 0

    emit_reports(report, tmp_path)
    table = np.genfromtxt(tmp_path / "hsweep.csv", delimiter=",", names=True)
    assert np.isnan(table["true_error"])
    assert table["theta"] == pytest.approx(row.theta)
    assert np.isnan(load_report(tmp_path).hsweep[0].true_error)


def test_global_benchmark_on_a_grid_that_cuts_cells():
    """Eight cells per side do not fit a 3x3 grid; the sweep still converges and encloses the error."""
    report = run_global_benchmark([8], (3, 3), r=2)
    (row,) = report.hsweep
    (cycle,) = report.cycles
    assert cycle.n_subdomains == 9
    assert cycle.stop_reason == "tolerance"
    assert row.rho <= row.true_error * (1 + 1e-8)
    assert row.true_error <= row.theta * (1 + 1e-8)


def test_global_benchmark_convergence_rates():
    """The true error and both bounds decrease like `h` over three meshes."""
    report = run_global_benchmark([6, 12, 24], (2, 2), r=2)
    slopes = report.slopes
    assert set(slopes) == {"true_error", "theta", "rho"}
    for name, slope in slopes.items():
        assert 0.85 <= slope <= 1.15, name


def test_separated_lower_bound_crosses_zero():
    """From a rough start the separated lower bound is negative, turns positive, and matches `rho` at convergence."""
    problem = square_benchmark(6)
    report = run_estimate(
        problem,
        partition_regular(problem.mesh, (3, 3)),
        policy=StopPolicy(tolerance=1e-10),
        r=2,
        estimate_every=True,
        start=random_start(100.0, seed=0),
    )
    (cycle,) = report.cycles
    records = {r.iteration: r for r in cycle.forward}
    assert records[1].rho_bis < 0
    assert cycle.zero_crossing is not None
    assert cycle.zero_crossing < cycle.iterations

    last = records[cycle.iterations]
    assert abs(last.rho_bis - last.rho) <= 1e-6 * last.rho


def test_adaptive_meets_the_target_after_refining():
    """A target just below the first precision is met later, every cycle stopping on the envelope rule."""
    problem = square_benchmark(6)
    first = run_adaptive(problem, AdaptivePlan(target_precision=1e6, max_cycles=1, patch_refinement=2))
    target = 0.9 * first.cycles[0].goal.precision

    report = run_adaptive(problem, AdaptivePlan(target_precision=target, max_cycles=3, patch_refinement=2))
    assert report.status == "met"
    assert len(report.cycles) >= 2
    precisions = [c.goal.precision for c in report.cycles]
    assert is_strictly_decreasing(precisions)
    assert precisions[-1] <= target
    assert all(c.stop_reason == "envelope" for c in report.cycles)
    assert not any("did not decrease" in note for note in report.notes)


def test_adaptive_flags_precision_that_stops_decreasing(monkeypatch, caplog):
    """A wider interval on the refined mesh is reported in the log and in the notes."""
    goal_bounds = driver.goal_bounds

    def _widening(*args, **kwargs):
        record = goal_bounds(*args, **kwargs)
        return replace(record, beta_plus_sup4=record.beta_plus_sup4 * 100.0**record.mesh)

    monkeypatch.setattr(driver, "goal_bounds", _widening)
    plan = AdaptivePlan(target_precision=1e-9, max_cycles=2, patch_refinement=2)
    with caplog.at_level(logging.WARNING, logger="ddbounds.driver"):
        report = run_adaptive(square_benchmark(6), plan)

    assert report.status == "budget_exhausted"
    assert "Precision stopped decreasing at cycle 1" in caplog.text
    assert any(note.startswith("cycle 1: precision") for note in report.notes)
