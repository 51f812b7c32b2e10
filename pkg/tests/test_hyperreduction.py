from __future__ import annotations

import numpy as np
import pytest

from larom.errors import DegenerateEqError, InvalidArgumentError
from larom.euler1d import NozzleProblem, freestream_field, hf_residual
from larom.hyperreduction import (
    EqWeights,
    _interpolation_step,
    assemble_eq_system,
    constant_function_errors,
    extract_reduced_mesh,
    lawson_hanson,
    nnls,
    solve_eq_system,
)
from larom.mesh1d import build_uniform_mesh
from larom.mor import build_gram_matrices, build_test_space, pod


@pytest.fixture(scope="module")
def nozzle_system():
    mesh = build_uniform_mesh(10.0, 12, 1)
    problem = NozzleProblem()
    l2, h1 = build_gram_matrices(mesh)
    q = freestream_field(mesh, problem)
    trial = pod(q.coeffs[:, None], 0.1, gram=l2.matrix, mesh=mesh)
    jacobian = hf_residual(q, problem, jacobian=True).jacobian
    test = build_test_space(trial, [jacobian], h1, factor=1)
    coords = [trial.coords[:, 0]]
    system = assemble_eq_system(trial, test, mesh, problem, [problem.mu], coords)
    return mesh, problem, trial, test, system


def test_all_ones_weights_solve_the_system_exactly(nozzle_system):
    _, _, _, _, system = nozzle_system
    assert np.linalg.norm(system.G @ np.ones(system.G.shape[1]) - system.b) == 0.0


def test_eq_system_row_count(nozzle_system):
    mesh, _, _, test, system = nozzle_system
    assert system.G.shape == (2 + test.size, mesh.n_elements + mesh.n_facets)
    assert system.n_accuracy_rows == test.size


def test_accuracy_row_matches_the_tested_residual(nozzle_system):
    mesh, problem, trial, test, system = nozzle_system
    q = trial.field(trial.coords[:, 0])
    full = hf_residual(q, problem).vector
    assert system.b[2:] == pytest.approx(test.Psi.T @ full, rel=1e-10, abs=1e-14)


def test_eq_system_rejects_mismatched_coordinates(nozzle_system):
    mesh, problem, trial, test, _ = nozzle_system
    with pytest.raises(InvalidArgumentError):
        assemble_eq_system(trial, test, mesh, problem, [problem.mu, problem.mu], [np.ones(1)])


def test_nnls_on_identity():
    x, converged, residual, _ = lawson_hanson(np.eye(2), np.array([1.0, -1.0]))
    assert np.allclose(x, [1.0, 0.0])
    assert residual == pytest.approx(1.0)
    assert not converged


def test_nnls_recovers_a_nonnegative_solution():
    rng = np.random.default_rng(0)
    G = rng.uniform(0.0, 1.0, (6, 10))
    b = G @ np.ones(10)
    weights = nnls(G, b, tol_eq=1e-10, n_elements=4)
    x = weights.vector
    assert np.all(x >= 0.0)
    assert np.linalg.norm(G @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert weights.converged
    assert weights.rho_e.size == 4
    assert weights.rho_f.size == 6


def test_nnls_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        lawson_hanson(np.eye(2), np.ones(3))
    with pytest.raises(InvalidArgumentError):
        lawson_hanson(np.eye(2), np.ones(2), tol=0.0)


def test_nnls_iteration_cap_returns_best_iterate():
    rng = np.random.default_rng(1)
    G = rng.uniform(0.0, 1.0, (5, 8))
    b = G @ np.ones(8)
    x, converged, residual, _ = lawson_hanson(G, b, tol=1e-14, max_iters=1)
    assert not converged
    assert np.all(x >= 0.0)
    assert residual <= np.linalg.norm(b)


def test_nozzle_weights_satisfy_constant_function_constraints(nozzle_system):
    mesh, _, _, _, system = nozzle_system
    weights = solve_eq_system(system)
    assert np.all(weights.rho_e >= 0.0) and np.all(weights.rho_f >= 0.0)
    assert weights.converged
    volume, facets = constant_function_errors(weights, mesh)
    assert volume <= 1.01 * system.delta
    assert facets <= 1.01 * system.delta


def test_full_weights_reduced_mesh_is_whole_mesh():
    mesh = build_uniform_mesh(1.0, 5, 1)
    rmesh = extract_reduced_mesh(EqWeights.full(mesh), mesh)
    assert rmesh.sampled.tolist() == list(range(5))
    assert rmesh.nodes.tolist() == list(range(6))
    assert constant_function_errors(EqWeights.full(mesh), mesh) == pytest.approx((0.0, 0.0), abs=1e-14)


def test_reduced_mesh_of_single_element():
    mesh = build_uniform_mesh(1.0, 5, 1)
    weights = EqWeights(np.array([0.0, 0.0, 2.0, 0.0, 0.0]), np.zeros(6))
    rmesh = extract_reduced_mesh(weights, mesh)
    assert rmesh.sampled.tolist() == [2]
    assert rmesh.nodes.tolist() == [2, 3]


def test_sampled_facet_pulls_in_both_neighbours():
    mesh = build_uniform_mesh(1.0, 5, 1)
    rho_f = np.zeros(6)
    rho_f[3] = 1.0
    rho_f[0] = 1.0
    rmesh = extract_reduced_mesh(EqWeights(np.zeros(5), rho_f), mesh)
    assert rmesh.facets.tolist() == [0, 3]
    assert rmesh.sampled.tolist() == [0, 2, 3]


def test_empty_support_is_degenerate():
    mesh = build_uniform_mesh(1.0, 3, 1)
    with pytest.raises(DegenerateEqError):
        extract_reduced_mesh(EqWeights(np.zeros(3), np.zeros(4)), mesh)


def test_interpolation_step_stops_at_the_first_blocking_column():
    x = np.array([0.5, 0.2, 0.0])
    s = np.array([-0.5, 0.4, 0.0])
    passive = np.array([True, True, True])
    with np.errstate(all="raise"):
        assert _interpolation_step(x, s, passive) == pytest.approx(0.5)


def test_interpolation_step_ignores_unweighted_columns():
    with np.errstate(all="raise"):
        assert _interpolation_step(np.zeros(2), np.zeros(2), np.array([True, True])) == 0.0
        assert _interpolation_step(np.array([0.0, 1.0]), np.array([-2.0, 0.0]), np.array([True, True])) == 0.0


def test_loosening_the_tolerance_truncates_the_support_trace():
    rng = np.random.default_rng(7)
    G = rng.uniform(0.0, 1.0, (20, 60))
    b = G @ np.ones(60)
    tight = lawson_hanson(G, b, tol=1e-10)
    loose = lawson_hanson(G, b, tol=1e-2)
    assert tight[1] and loose[1]
    assert len(loose[3]) <= len(tight[3])
    assert loose[3] == tight[3][: len(loose[3])]
    assert np.count_nonzero(loose[0]) <= np.count_nonzero(tight[0])


@pytest.mark.parametrize("tol_eq", [1e-4, 1e-8])
def test_constant_function_rows_hold_to_the_tolerance(nozzle_system, tol_eq):
    mesh, _, _, _, system = nozzle_system
    weights = nnls(system.G, system.b, tol_eq, system.n_elements)
    assert weights.converged
    bound = tol_eq * np.linalg.norm(system.b)
    volume, facets = constant_function_errors(weights, mesh)
    assert volume <= bound
    assert facets <= bound
