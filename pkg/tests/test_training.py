from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from larom.errors import InvalidArgumentError
from larom.euler1d import NozzleProblem, freestream_field
from larom.hyperreduction import EqWeights, extract_reduced_mesh
from larom.mesh1d import StateField, build_uniform_mesh
from larom.mor import ReducedBasis, RomArtifact, TestSpace, build_gram_matrices
from larom.training import (
    Geometry,
    IterationReport,
    MetricRecord,
    ParameterBox,
    PhaseTimer,
    RunReport,
    Snapshot,
    TrainingConfig,
    adaptive_loop,
    best_fit_error,
    error_indicator,
    evaluate_one,
    initial_condition_dataset,
    relative_error,
    solve_hf,
    strong_greedy,
    total_enthalpy_error,
    weak_greedy,
)

UNIFORM = NozzleProblem(A0=3.0, p0=0.8)


def _record(e_hf: float, eta: float, e_inf: float = 0.01) -> MetricRecord:
    return MetricRecord(np.array([1.0, 0.75]), e_hf, eta, e_inf, 0.1, eta_defined=not math.isnan(eta))


def test_parameter_grid_varies_p0_fastest():
    grid = ParameterBox().grid((2, 3))
    assert grid.shape == (6, 2)
    assert np.allclose(grid[:3, 0], 0.5)
    assert np.allclose(grid[:3, 1], [0.7, 0.775, 0.85])
    assert np.allclose(grid[3:, 0], 1.5)


def test_single_point_grid_is_the_centre():
    box = ParameterBox()
    assert np.allclose(box.grid((1, 1)), [[1.0, 0.775]])
    assert np.allclose(box.center, [1.0, 0.775])


def test_parameter_box_validation_and_sampling():
    with pytest.raises(InvalidArgumentError):
        ParameterBox(a0_range=(1.5, 0.5))
    box = ParameterBox()
    draws = box.sample(50, np.random.default_rng(4))
    assert all(box.contains(mu) for mu in draws)
    assert np.array_equal(draws, box.sample(50, np.random.default_rng(4)))
    assert not box.contains([2.0, 0.75])


@pytest.mark.parametrize("n0, expected", [(9, 9), (10, 9), (1, 1), (16, 16)])
def test_initial_grid_size(n0, expected):
    assert TrainingConfig(n0=n0).initial_grid().shape == (expected, 2)


def test_training_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainingConfig(tol=0.0)
    with pytest.raises(InvalidArgumentError):
        TrainingConfig(iterations=0)
    cfg = TrainingConfig(accelerated=True)
    assert cfg.bootstrap
    assert cfg.warm_ptc.cfl0 == 100.0
    assert cfg.ptc.cfl0 == 1.0


def test_rom_bootstrap_switch():
    assert not TrainingConfig().bootstrap
    assert TrainingConfig(rom_bootstrap=True).bootstrap
    assert TrainingConfig(accelerated=True, rom_bootstrap=False).bootstrap


def test_phase_timer_accumulates():
    timer = PhaseTimer()
    with timer.phase("a"):
        pass
    with timer.phase("a"):
        pass
    with pytest.raises(RuntimeError):
        with timer.phase("b"):
            raise RuntimeError("boom")
    assert set(timer.seconds) == {"a", "b"}
    assert timer.seconds["a"] >= 0.0


def test_strong_greedy_picks_by_gram_schmidt_distance():
    coords = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    result = strong_greedy(coords, 3)
    assert result.indices == [1, 0]
    assert result.gains == pytest.approx([2.0, 1.0])


def test_relative_and_best_fit_errors():
    mesh = build_uniform_mesh(10.0, 8, 2)
    q = freestream_field(mesh, NozzleProblem())
    assert relative_error(q, q) == 0.0
    assert relative_error(q.with_coeffs(1.1 * q.coeffs), q) == pytest.approx(0.1)
    assert best_fit_error(q, q.coeffs[:, None]) == pytest.approx(0.0, abs=1e-12)


def test_total_enthalpy_error_of_constant_offset():
    mesh = build_uniform_mesh(10.0, 8, 2)
    problem = NozzleProblem()
    assert total_enthalpy_error(freestream_field(mesh, problem), problem) == pytest.approx(0.0, abs=1e-12)

    offset, gamma = 0.02, problem.gamma
    p = (gamma - 1.0) / gamma * (problem.total_enthalpy + offset - 0.125)
    w = np.array([1.0, 0.5, p / (gamma - 1.0) + 0.125])
    q = StateField.from_function(mesh, lambda x: problem.area(x)[None, :] * w[:, None])
    assert total_enthalpy_error(q, problem) == pytest.approx(offset / problem.total_enthalpy, rel=1e-9)


def test_error_indicator_vanishes_at_the_discrete_solution():
    mesh = build_uniform_mesh(10.0, 10, 2)
    _, h1 = build_gram_matrices(mesh)
    assert error_indicator(freestream_field(mesh, UNIFORM), UNIFORM, h1) < 1e-10


def _exact_rom(n_elements: int = 4):
    mesh = build_uniform_mesh(10.0, n_elements, 1)
    exact = freestream_field(mesh, UNIFORM)
    Z = exact.coeffs[:, None] / np.linalg.norm(exact.coeffs)
    weights = EqWeights.full(mesh)
    rom = RomArtifact(
        trial=ReducedBasis(Z, np.ones(1), mesh),
        test=TestSpace(np.eye(exact.coeffs.size)),
        weights=weights,
        reduced_mesh=extract_reduced_mesh(weights, mesh),
        mesh=mesh,
        problem=UNIFORM,
        training_params=np.array([UNIFORM.mu]),
        training_coords=np.array([[np.linalg.norm(exact.coeffs)]]),
    )
    return rom, exact


def test_evaluate_one_with_exact_trial_space_leaves_eta_undefined():
    rom, exact = _exact_rom()
    cfg = TrainingConfig(problem=UNIFORM)
    record = evaluate_one(UNIFORM.mu, rom, cfg, hf_solver=lambda mu: exact)
    assert record.e_hf < 1e-10
    assert not record.eta_defined
    assert math.isnan(record.eta)
    assert record.e_inf < 1e-10
    assert record.gnm_converged


def test_iteration_report_summaries_skip_undefined_values():
    it = IterationReport(1, 60, metrics=[_record(1e-3, 2.0), _record(3e-3, math.nan), _record(2e-3, 5.0)])
    assert it.median_e_hf == pytest.approx(2e-3)
    assert it.max_eta == 5.0
    assert math.isnan(IterationReport(1, 60).median_e_hf)

    it.costs = {"snapshots": 2.0, "greedy_hf": 3.0, "evaluation": 100.0}
    assert it.offline_seconds == 5.0
    report = RunReport(False, 0, np.zeros((0, 2)), [it, it])
    assert report.offline_seconds == 10.0


def test_iteration_report_mode_counts():
    it = IterationReport(1, 60)
    it.pod_registered = np.array([0.999999, 1e-6, 0.0])
    it.pod_unregistered = np.array([0.9, 0.09, 0.01])
    assert it.modes_for(1e-3) == (1, 3)


def test_initial_condition_dataset_fits_previous_fields():
    rom, exact = _exact_rom(6)
    snap = Snapshot(np.array(UNIFORM.mu), exact.with_coeffs(2.0 * exact.coeffs), rom.mesh)
    coords = initial_condition_dataset(rom, [snap, snap], 40, np.random.default_rng(2))
    assert coords.shape == (2, 1)
    assert np.allclose(coords, 2.0 * np.linalg.norm(exact.coeffs), rtol=1e-10)


DUCT = TrainingConfig(
    problem=UNIFORM,
    box=ParameterBox((3.0, 3.0), (0.75, 0.85)),
    n_elements=6,
    degree=1,
    greedy_shape=(1, 3),
)


def test_solve_hf_warm_start_and_cold_fallback():
    geometry = Geometry(build_uniform_mesh(10.0, 6, 1))
    mu = np.array([3.0, 0.8])
    exact = freestream_field(geometry.mesh, UNIFORM)

    warm = solve_hf(mu, geometry, DUCT, exact)
    assert warm.warm
    assert warm.ptc_iterations <= 1

    cold = solve_hf(mu, geometry, DUCT, exact.with_coeffs(-exact.coeffs))
    assert not cold.warm
    assert cold.ptc_iterations <= 1


def test_weak_greedy_exits_after_the_initial_set_on_loose_tolerance():
    cfg = dataclasses.replace(DUCT, tol=1e9)
    geometry = Geometry(build_uniform_mesh(10.0, cfg.n_elements, cfg.degree))
    result = weak_greedy(cfg.box.grid(cfg.greedy_shape), geometry, cfg, [[3.0, 0.8]])
    assert result.converged
    assert len(result.history) == 1
    assert len(result.snapshots) == 1


def test_weak_greedy_never_reselects_a_parameter():
    cfg = dataclasses.replace(DUCT, tol=1e-14, n_max=3)
    grid = cfg.box.grid(cfg.greedy_shape)
    geometry = Geometry(build_uniform_mesh(10.0, cfg.n_elements, cfg.degree))
    result = weak_greedy(grid, geometry, cfg, [[3.0, 0.8]])
    picked = [tuple(step.mu) for step in result.history]
    assert len(picked) == len(set(picked)) == 2
    assert not any(np.allclose(mu, [3.0, 0.8]) for mu in picked)
    assert len({tuple(s.mu) for s in result.snapshots}) == len(result.snapshots)


@pytest.mark.slow
@pytest.mark.parametrize("accelerated", [False, True])
def test_two_iteration_adaptive_loop(accelerated):
    cfg = TrainingConfig(
        n_elements=30,
        degree=1,
        map_degree=6,
        train_shape=(2, 2),
        greedy_shape=(2, 2),
        n0=1,
        n_max=3,
        tol=1e-2,
        iterations=2,
        n_test=2,
        accelerated=accelerated,
        init_dataset_points=50,
    )
    seen = []
    result = adaptive_loop(cfg, on_iteration=lambda artifacts, it: seen.append(it.iteration))
    assert seen == [1, 2]
    report = result.report
    assert [it.n_elements for it in report.iterations] == [30, 45]
    for it in report.iterations:
        assert it.rob_size >= 1
        assert len(it.metrics) == 2
        assert len(it.shocks) == 4
        assert it.eq_support[0] >= 1
        assert {"snapshots", "registration", "evaluation"} <= set(it.costs)
    assert "mesh_adaptation" in report.iterations[1].costs
    assert result.artifacts[1].geometry.mesh.n_elements == 45

    if accelerated:
        assert any(it.ptc_warm for it in report.iterations)
        assert result.rom.training_coords.shape == (4, result.rom.n)
    else:
        assert not any(it.ptc_warm for it in report.iterations)
        assert report.iterations[0].hf_fallbacks == 0
