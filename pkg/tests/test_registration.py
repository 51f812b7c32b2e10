from __future__ import annotations

import functools

import numpy as np
import pytest
from numpy.polynomial import legendre

from larom import registration
from larom.errors import (
    InvalidArgumentError,
    NonBijectiveMapError,
    RegistrationFailedError,
    UndefinedLocatorError,
)
from larom.mesh1d import StateField, build_uniform_mesh
from larom.metric2d import structured_mesh
from larom.registration import (
    MSH_SENTINEL,
    MapCoefficients,
    RegistrationConfig,
    RegistrationResult,
    TemplateSpace,
    build_map_basis,
    f_jac,
    f_msh,
    greedy_template_registration,
    map_regress,
    nearest_unprocessed_order,
    register_parametric,
    register_single,
    regularized_objective,
    shock_locator,
    shock_targets,
    target_shock,
    target_template,
)


@pytest.fixture(scope="module")
def basis():
    return build_map_basis(10, 10.0)


def _folding_map(basis):
    x = np.linspace(0.0, basis.L, 401)
    d = basis.evaluate(x, 1)[:, 0]
    k = int(np.argmax(np.abs(d)))
    a = np.zeros(basis.m)
    a[0] = -2.0 * np.sign(d[k]) / abs(d[k])
    return MapCoefficients(a, basis)


def _tanh_sensor(mesh, centre):
    return StateField.from_function(mesh, lambda x: np.tanh(3.0 * (x - centre))[None], n_vars=1)


def test_map_basis_dimension(basis):
    assert basis.m_hf == 9
    assert basis.m == 9


def test_map_basis_is_h2_orthonormal(basis):
    t, w = legendre.leggauss(14)
    x, w = 5.0 * (t + 1.0), 5.0 * w
    V = basis.evaluate(x)
    D2 = basis.evaluate(x, 2)
    gram = V.T @ (w[:, None] * V) + D2.T @ (w[:, None] * D2)
    assert np.allclose(gram, np.eye(9), atol=1e-10)


def test_map_basis_vanishes_at_endpoints(basis):
    assert np.allclose(basis.evaluate([0.0, 10.0]), 0.0, atol=1e-10)


def test_map_basis_rejects_low_degree():
    with pytest.raises(InvalidArgumentError):
        build_map_basis(1)


def test_maps_fix_the_endpoints(basis):
    phi = MapCoefficients(np.random.default_rng(0).normal(scale=0.1, size=9), basis)
    assert phi(0.0) == 0.0
    assert phi(10.0) == 10.0


def test_map_inverse(basis):
    a = np.zeros(9)
    a[0] = 0.3
    phi = MapCoefficients(a, basis)
    assert phi.is_bijective()
    x = np.linspace(0.0, 10.0, 33)
    assert np.allclose(phi.inverse(phi(x)), x, atol=1e-10)


def test_f_jac_of_identity_is_negligible(basis):
    assert f_jac(MapCoefficients.identity(basis), RegistrationConfig()) < 1e-150


def test_f_jac_penalizes_folding_maps_with_clamped_exponent(basis):
    phi = _folding_map(basis)
    assert not phi.is_bijective()
    value = f_jac(phi, RegistrationConfig())
    assert 1.0 < value <= np.exp(50.0)


def test_f_msh_in_1d_is_constant():
    ref = np.linspace(0.0, 10.0, 11)
    deformed = ref + 0.3 * np.sin(np.pi * ref / 10.0)
    quality = f_msh(ref, deformed)
    assert quality.value == pytest.approx(np.exp(-9.0), rel=1e-12)
    assert np.allclose(quality.ratios, 1.0)


def test_f_msh_of_identity_and_similarities_in_2d():
    mesh = structured_mesh(4, 3)
    identity = f_msh(mesh.vertices, mesh.vertices, mesh.triangles)
    assert identity.value == pytest.approx(0.5 * np.exp(-9.0), rel=1e-12)
    assert not identity.inverted

    scaled = f_msh(mesh.vertices, 2.0 * mesh.vertices, mesh.triangles)
    assert scaled.value == pytest.approx(identity.value, rel=1e-12)

    c, s = np.cos(0.4), np.sin(0.4)
    rotated = f_msh(mesh.vertices, mesh.vertices @ np.array([[c, s], [-s, c]]), mesh.triangles)
    assert rotated.value == pytest.approx(identity.value, rel=1e-12)


def test_f_msh_flags_inverted_elements():
    mesh = structured_mesh(2, 2)
    flipped = mesh.vertices * np.array([-1.0, 1.0])
    quality = f_msh(mesh.vertices, flipped, mesh.triangles)
    assert quality.inverted
    assert quality.value == MSH_SENTINEL


def test_shock_locator_on_ramp():
    mesh = build_uniform_mesh(10.0, 20, 1)
    mach = StateField.from_function(mesh, lambda x: np.clip(10.0 * (x - 4.5), 0.0, 10.0)[None], n_vars=1)
    assert shock_locator(mach, 0.5) == pytest.approx(5.0, abs=1e-12)


def test_shock_locator_of_symmetric_double_ramp():
    mesh = build_uniform_mesh(10.0, 20, 1)
    mach = StateField.from_function(mesh, lambda x: np.maximum(0.0, 1.0 - np.abs(x - 5.0))[None], n_vars=1)
    assert shock_locator(mach) == pytest.approx(5.0, abs=1e-12)


def test_shock_locator_rejects_constant_sensor():
    mesh = build_uniform_mesh(10.0, 5, 2)
    mach = StateField.from_function(mesh, lambda x: np.full((1, x.size), 0.7), n_vars=1)
    with pytest.raises(UndefinedLocatorError):
        shock_locator(mach)


def test_target_shock(basis):
    identity = MapCoefficients.identity(basis)
    assert target_shock(identity, 6.2, 6.2) == 0.0
    assert target_shock(identity, 6.2, 6.3) == pytest.approx(0.01)


def test_target_template_is_zero_for_template_members():
    mesh = build_uniform_mesh(10.0, 40, 2)
    basis = build_map_basis(6, 10.0)
    sensor = _tanh_sensor(mesh, 5.0)
    space = TemplateSpace.from_sensors(mesh, [sensor])
    identity = MapCoefficients.identity(basis)
    assert target_template(identity, sensor, space) == pytest.approx(0.0, abs=1e-12)
    other = _tanh_sensor(mesh, 6.0)
    assert target_template(identity, other, space) > 1e-3


def test_template_space_rejects_empty_input():
    mesh = build_uniform_mesh(10.0, 4, 1)
    with pytest.raises(InvalidArgumentError):
        TemplateSpace.from_values(mesh, [])
    with pytest.raises(InvalidArgumentError):
        target_template(MapCoefficients.identity(build_map_basis(4)), _tanh_sensor(mesh, 5.0), None)


def test_register_single_with_zero_target_stays_at_identity(basis):
    result = register_single(lambda phi: 0.0, basis)
    assert np.allclose(result.coeffs.a, 0.0, atol=1e-6)


def test_register_single_tracks_a_shock(basis):
    still = register_single(lambda phi: target_shock(phi, 6.2, 6.2), basis)
    assert np.allclose(still.coeffs.a, 0.0, atol=1e-6)
    assert still.target_value == pytest.approx(0.0, abs=1e-10)

    moved = register_single(lambda phi: target_shock(phi, 6.2, 6.8), basis)
    assert moved.coeffs.is_bijective()
    assert abs(moved.coeffs(6.2) - 6.8) < 0.05


def test_nearest_unprocessed_order():
    params = np.array([[0.0, 0.0], [3.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    order, donors = nearest_unprocessed_order(params, [0.0, 0.0])
    assert order.tolist() == [0, 2, 3, 1]
    assert donors.tolist() == [-1, 0, 2, 3]


def test_register_parametric_single_parameter(basis):
    params = np.array([[1.0, 0.775]])
    reg = register_parametric(params, shock_targets([6.5], 6.0), basis)
    assert reg.accepted.all()
    assert np.allclose(reg.regressor(params[0]), reg.coefficients[0])
    assert reg.map_for(params[0])(6.0) == pytest.approx(6.5, abs=0.05)


def test_register_parametric_identical_data_gives_rank_one_maps(basis):
    params = np.array([[0.8, 0.75], [1.2, 0.8]])
    reg = register_parametric(params, shock_targets([6.5, 6.5], 6.0), basis)
    assert reg.m == 1
    assert np.allclose(reg.raw_coefficients[0], reg.raw_coefficients[1], atol=1e-5)


def test_map_regress_constant_and_linear_data():
    grid = np.array([[a, p] for a in (0.5, 1.0, 1.5) for p in (0.7, 0.775, 0.85)])
    constant = map_regress(grid, np.full((9, 2), 0.25))
    assert np.allclose(constant([0.9, 0.8]), 0.25, atol=1e-12)

    values = np.stack([2.0 + grid[:, 0] - 3.0 * grid[:, 1], -grid[:, 1]], axis=1)
    linear = map_regress(grid, values)
    mu = np.array([1.13, 0.72])
    assert linear.method == "polynomial"
    assert np.allclose(linear(mu), [2.0 + mu[0] - 3.0 * mu[1], -mu[1]], atol=1e-10)


def test_map_regress_falls_back_to_nearest_neighbour():
    params = np.array([[0.5, 0.7], [1.5, 0.85]])
    reg = map_regress(params, np.array([[1.0], [2.0]]))
    assert reg.method == "nearest"
    assert reg([0.6, 0.72])[0] == 1.0


def test_greedy_template_registration_exits_on_loose_tolerance():
    mesh = build_uniform_mesh(10.0, 30, 1)
    basis = build_map_basis(4, 10.0)
    params = np.array([[1.0, 0.7], [1.0, 0.8]])
    sensors = [_tanh_sensor(mesh, 5.0), _tanh_sensor(mesh, 5.5)]
    cfg = RegistrationConfig(tol_greedy=1e6, max_iters=50)
    result = greedy_template_registration(params, sensors, 0, basis, mesh, cfg)
    assert result.converged
    assert result.space.n == 1
    assert result.selected == [0]


@pytest.mark.parametrize("level", [0.7, 250.0])
def test_shock_locator_rejects_roundoff_gradients(level):
    mesh = build_uniform_mesh(10.0, 60, 2)
    mach = StateField.from_function(mesh, lambda x: np.full((1, x.size), level), n_vars=1)
    with pytest.raises(UndefinedLocatorError):
        shock_locator(mach)


def test_seminorm_matrix_matches_quadrature(basis):
    a = np.random.default_rng(3).normal(scale=0.05, size=basis.m)
    t, w = legendre.leggauss(20)
    x, w = 5.0 * (t + 1.0), 5.0 * w
    direct = np.sum(w * (basis.evaluate(x, 2) @ a) ** 2)
    assert a @ basis.seminorm_matrix @ a == pytest.approx(direct, rel=1e-10)


def test_regularized_objective_gradient_matches_closed_form(basis):
    cfg = RegistrationConfig()
    objective, gradient = regularized_objective(lambda phi: target_shock(phi, 6.2, 6.8), basis, cfg)
    a = np.random.default_rng(4).normal(scale=0.02, size=basis.m)
    phi = MapCoefficients(a, basis)
    exact = 2.0 * cfg.xi * (basis.seminorm_matrix @ a) + 2.0 * (phi(6.2) - 6.8) * basis.evaluate(6.2)[0]
    assert np.allclose(gradient(a), exact, rtol=1e-6, atol=1e-10)
    assert objective(a) == pytest.approx(
        target_shock(phi, 6.2, 6.8) + cfg.xi * (a @ basis.seminorm_matrix @ a + f_jac(phi, cfg)), rel=1e-12
    )


def test_regularized_objective_gradient_matches_central_differences(basis):
    mesh = build_uniform_mesh(10.0, 40, 2)
    space = TemplateSpace.from_sensors(mesh, [_tanh_sensor(mesh, 5.0)])
    target = functools.partial(target_template, sensor=_tanh_sensor(mesh, 5.4), space=space)
    objective, gradient = regularized_objective(target, basis)
    a = np.random.default_rng(5).normal(scale=0.005, size=basis.m)
    h = 1e-5
    fd = np.array([(objective(a + h * e) - objective(a - h * e)) / (2.0 * h) for e in np.eye(basis.m)])
    assert np.allclose(gradient(a), fd, rtol=1e-4, atol=1e-8)


def _fake_register_single(folded):
    def fake(target, basis, cfg=None, a0=None, check_points=None, label=""):
        if target is folded:
            raise NonBijectiveMapError("min Phi' = -1")
        return RegistrationResult(MapCoefficients.identity(basis), 0.0, 0.0, 0)

    return fake


def test_register_parametric_aborts_when_too_many_maps_fold(basis, monkeypatch):
    params = np.array([[0.5, 0.7], [1.0, 0.75], [1.5, 0.8], [1.2, 0.85]])
    targets = shock_targets([6.0] * 4, 6.0)
    monkeypatch.setattr(registration, "register_single", _fake_register_single(targets[2]))
    with pytest.raises(RegistrationFailedError) as info:
        register_parametric(params, targets, basis)
    assert info.value.failures == [2]


def test_register_parametric_tolerates_a_fifth_of_folded_maps(basis, monkeypatch):
    params = np.array([[0.5, 0.7], [1.0, 0.75], [1.5, 0.8], [1.2, 0.85], [0.7, 0.72]])
    targets = shock_targets([6.0] * 5, 6.0)
    monkeypatch.setattr(registration, "register_single", _fake_register_single(targets[3]))
    reg = register_parametric(params, targets, basis)
    assert reg.failures == [3]
    assert reg.accepted.tolist() == [True, True, True, False, True]
    assert np.isnan(reg.targets[3])


def test_greedy_template_registration_aligns_translated_profiles():
    mesh = build_uniform_mesh(10.0, 40, 2)
    basis = build_map_basis(8, 10.0)
    params = np.array([[1.0, 0.7], [1.0, 0.75], [1.0, 0.8]])
    sensors = [_tanh_sensor(mesh, c) for c in (4.7, 5.0, 5.3)]
    space = TemplateSpace.from_sensors(mesh, [sensors[1]])
    identity = MapCoefficients.identity(basis)
    assert target_template(identity, sensors[0], space) > 5e-3

    result = greedy_template_registration(params, sensors, 1, basis, mesh, RegistrationConfig(max_iters=200))
    assert result.converged
    assert result.space.n == 1
    assert result.selected == [1]
    assert np.nanmax(result.registration.targets) < 1e-3
    assert result.registration.accepted.all()


def test_greedy_template_registration_first_pass_starts_from_the_template(monkeypatch):
    mesh = build_uniform_mesh(10.0, 30, 1)
    basis = build_map_basis(4, 10.0)
    params = np.array([[0.5, 0.7], [1.0, 0.8], [1.5, 0.85]])
    sensors = [_tanh_sensor(mesh, c) for c in (5.0, 5.5, 6.0)]
    calls = []

    def spy(p, reference):
        calls.append(np.asarray(reference, dtype=float))
        return nearest_unprocessed_order(p, reference)

    monkeypatch.setattr(registration, "nearest_unprocessed_order", spy)
    greedy_template_registration(params, sensors, 2, basis, mesh, RegistrationConfig(tol_greedy=1e6, max_iters=20))
    assert len(calls) == 1
    assert np.array_equal(calls[0], params[2])
