from __future__ import annotations

import numpy as np
import pytest

from larom import euler1d
from larom.errors import (
    InconsistentDataError,
    InvalidArgumentError,
    InvalidStateError,
    PtcNonConvergenceError,
)
from larom.euler1d import (
    NozzleDiscretization,
    NozzleProblem,
    PtcConfig,
    PtcRecord,
    artificial_viscosity,
    derived_quantities,
    enthalpy_error_indicator,
    freestream_field,
    freestream_state,
    hf_residual,
    inlet_ghost_state,
    mach_field,
    mass_flux_mismatch,
    nozzle_area,
    pressure,
    ptc_solve,
    rusanov_flux,
)
from larom.mesh1d import StateField, build_uniform_mesh
from larom.registration import shock_locator

GAMMA = 1.4


def _perturbed(field: StateField, scale: float, seed: int) -> StateField:
    rng = np.random.default_rng(seed)
    return field.with_coeffs(field.coeffs * (1.0 + scale * rng.uniform(-1.0, 1.0, field.coeffs.size)))


def test_pressure_examples():
    assert pressure(np.array([1.0, 0.0, 2.5])) == pytest.approx(1.0)
    assert pressure(np.array([1.0, 1.0, 3.0])) == pytest.approx(1.0)
    with pytest.raises(InvalidStateError):
        pressure(np.array([0.0, 1.0, 3.0]))


def test_derived_quantities():
    at_rest = derived_quantities(np.array([1.0, 0.0, 1.0 / (GAMMA * (GAMMA - 1.0))]))
    assert at_rest["a"] == pytest.approx(1.0)
    assert at_rest["Ma"] == pytest.approx(0.0)

    assert derived_quantities(np.array([1.0, 0.0, 2.5]))["H_tot"] == pytest.approx(3.5)

    sonic = derived_quantities(np.array([1.0, 1.0, 1.0 / (GAMMA * (GAMMA - 1.0)) + 0.5]))
    assert sonic["Ma"] == pytest.approx(1.0)
    assert sonic["T_tot"] == pytest.approx(1.2 * sonic["T"])


def test_nonpositive_pressure_is_rejected():
    with pytest.raises(InvalidStateError):
        derived_quantities(np.array([1.0, 2.0, 1.0]))


def test_nozzle_area():
    assert nozzle_area(0.0, 1.5) == pytest.approx(3.0)
    assert nozzle_area(10.0, 1.5) == pytest.approx(3.0)
    assert nozzle_area(5.0, 1.5) == pytest.approx(1.5)
    assert nozzle_area(2.5, 0.5) == pytest.approx(1.125)


def test_freestream_at_rest_when_pressures_match():
    w = freestream_state(0.95, 0.95, 0.95)
    assert w[1] == 0.0
    assert pressure(w) == pytest.approx(0.95, rel=1e-14)


@pytest.mark.parametrize("isentropic", [True, False])
def test_freestream_satisfies_total_relations(isentropic):
    p0 = 0.92 if not isentropic else 0.7
    w = freestream_state(0.95, 0.95, p0, GAMMA, isentropic)
    d = derived_quantities(w, GAMMA, isentropic)
    assert d["p"] == pytest.approx(p0, rel=1e-12)
    assert d["p_tot"] == pytest.approx(0.95, rel=1e-12)
    assert d["T_tot"] == pytest.approx(0.95, rel=1e-12)
    assert d["Ma"] < 1.0


def test_freestream_mach_decreases_with_back_pressure():
    machs = [derived_quantities(freestream_state(0.95, 0.95, p0))["Ma"] for p0 in (0.7, 0.75, 0.8, 0.85)]
    assert np.all(np.diff(machs) < 0)


def test_freestream_rejects_inconsistent_data():
    with pytest.raises(InconsistentDataError):
        freestream_state(0.95, 0.95, 1.0)
    with pytest.raises(InconsistentDataError):
        freestream_state(0.95, 0.95, 0.7, GAMMA, isentropic_totals=False)


def test_rusanov_flux_is_consistent():
    w = np.array([1.0, 0.5, 2.5])
    expected = np.array([0.5, 0.25 + 0.95, 0.5 * (2.5 + 0.95)])
    q = (2.0 * w)[:, None]
    area = np.array([2.0])
    assert np.allclose(rusanov_flux(q, q, 1.0, area)[:, 0], 2.0 * expected)
    assert np.allclose(rusanov_flux(q, q, -1.0, area)[:, 0], -2.0 * expected)


def test_rusanov_flux_is_conservative():
    area = np.array([1.3])
    qa = np.array([[1.0], [0.4], [2.6]])
    qb = np.array([[0.9], [0.5], [2.4]])
    assert np.allclose(rusanov_flux(qa, qb, 1.0, area), -rusanov_flux(qb, qa, -1.0, area))


def test_viscosity_vanishes_on_uniform_flow():
    mesh = build_uniform_mesh(10.0, 12, 2)
    problem = NozzleProblem(A0=3.0, p0=0.8)
    assert np.allclose(artificial_viscosity(freestream_field(mesh, problem)), 0.0, atol=1e-14)


def test_viscosity_of_linear_compression():
    mesh = build_uniform_mesh(4.0, 4, 1)
    q = StateField.from_function(mesh, lambda x: np.stack([np.ones_like(x), 1.0 - 0.1 * x, 3.0 * np.ones_like(x)]))
    assert np.allclose(artificial_viscosity(q, c_nu=0.1), 0.01)


def test_uniform_flow_on_constant_area_duct_has_zero_residual():
    mesh = build_uniform_mesh(10.0, 20, 2)
    problem = NozzleProblem(A0=3.0, p0=0.8)
    res = hf_residual(freestream_field(mesh, problem), problem)
    assert res.norm < 1e-10


def test_jacobian_matches_central_differences():
    mesh = build_uniform_mesh(10.0, 8, 2)
    problem = NozzleProblem()
    q = _perturbed(freestream_field(mesh, problem), 1e-2, seed=11)
    res = hf_residual(q, problem, jacobian=True)
    rng = np.random.default_rng(5)
    v = rng.standard_normal(q.coeffs.size) * q.coeffs
    eps = 1e-6
    plus = hf_residual(q.with_coeffs(q.coeffs + eps * v), problem, viscosity=res.viscosity).vector
    minus = hf_residual(q.with_coeffs(q.coeffs - eps * v), problem, viscosity=res.viscosity).vector
    fd = (plus - minus) / (2.0 * eps)
    exact = res.jacobian @ v
    assert np.linalg.norm(exact - fd) <= 1e-5 * np.linalg.norm(fd)


def test_ptc_from_exact_solution_needs_no_iterations():
    mesh = build_uniform_mesh(10.0, 20, 2)
    problem = NozzleProblem(A0=3.0, p0=0.8)
    result = ptc_solve(mesh, problem, freestream_field(mesh, problem))
    assert result.iterations <= 1
    assert result.history[-1].residual_norm <= 1e-9


def test_ptc_iteration_cap_reports_history():
    mesh = build_uniform_mesh(10.0, 20, 2)
    with pytest.raises(PtcNonConvergenceError) as info:
        ptc_solve(mesh, NozzleProblem(), cfg=PtcConfig(max_iters=1))
    assert info.value.state is not None
    assert len(info.value.history) >= 1


def test_enthalpy_indicator_of_constant_offset():
    mesh = build_uniform_mesh(10.0, 6, 2)
    problem = NozzleProblem()
    offset = 0.05
    rho, u = 1.0, 0.5
    p = (GAMMA - 1.0) / GAMMA * (problem.total_enthalpy + offset - 0.5 * u * u)
    w = np.array([rho, rho * u, p / (GAMMA - 1.0) + 0.5 * rho * u * u])
    q = StateField.from_function(mesh, lambda x: problem.area(x)[None, :] * w[:, None])
    assert np.allclose(enthalpy_error_indicator(q, problem), offset**2, rtol=1e-9)

    exact = freestream_field(mesh, problem)
    assert np.allclose(enthalpy_error_indicator(exact, problem), 0.0, atol=1e-20)


def test_mass_flux_mismatch_of_uniform_flow():
    mesh = build_uniform_mesh(10.0, 10, 2)
    q = freestream_field(mesh, NozzleProblem(A0=3.0, p0=0.8))
    assert mass_flux_mismatch(q) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.slow
def test_transonic_nozzle_has_one_shock_in_diverging_section():
    mesh = build_uniform_mesh(10.0, 60, 2)
    problem = NozzleProblem(A0=1.5, p0=0.7)
    result = ptc_solve(mesh, problem)
    assert result.history[-1].residual_norm <= 1e-9
    x_shock = shock_locator(mach_field(result.state, problem))
    assert 5.0 < x_shock < 10.0
    eta = enthalpy_error_indicator(result.state, problem)
    worst = 0.5 * (mesh.nodes[np.argmax(eta)] + mesh.nodes[np.argmax(eta) + 1])
    assert abs(worst - x_shock) < 1.0


def test_ptc_config_validation():
    with pytest.raises(InvalidArgumentError):
        PtcConfig(cfl_min=2.0)
    with pytest.raises(InvalidArgumentError):
        PtcConfig(cfl_cut=1.0)
    with pytest.raises(InvalidArgumentError):
        PtcConfig(cfl_recovery=1.0)
    with pytest.raises(InvalidArgumentError):
        PtcConfig(max_update=0.0)
    with pytest.raises(InvalidArgumentError):
        PtcConfig(viscosity_continuation=(0.5,))
    assert PtcConfig(viscosity_continuation=(3.0, 10.0)).viscosity_continuation == (10.0, 3.0)


def test_cfl_control():
    cfg = PtcConfig()
    assert cfg.next_cfl(1.0, 1.0, 10.0) == pytest.approx(10.0)
    assert cfg.next_cfl(1e7, 1.0, 100.0) == pytest.approx(1e8)
    # damped and nearly rejected updates
    assert cfg.next_cfl(1.0, 0.5, 1.0) == pytest.approx(0.5)
    assert cfg.next_cfl(1.0, 2.0**-12, 1.0) == pytest.approx(0.1)
    assert cfg.next_cfl(1e-4, 0.5, 1.0) == pytest.approx(1e-4)
    # recovery towards cfl0 after a cut, never faster than cfl_recovery
    assert cfg.next_cfl(0.1, 1.0, 0.5) == pytest.approx(0.15)
    assert cfg.next_cfl(0.1, 1.0, 4.0) == pytest.approx(0.4)
    assert cfg.next_cfl(10.0, 1.0, 0.01) == pytest.approx(1.0)


def test_inlet_ghost_state_of_freestream_is_the_freestream():
    problem = NozzleProblem(A0=1.0, p0=0.8)
    w = freestream_state(problem.p_tot, problem.T_tot, problem.p0)
    assert np.allclose(inlet_ghost_state(w, problem), w, rtol=1e-10)


def test_inlet_ghost_state_survives_a_strong_outgoing_wave():
    problem = NozzleProblem()
    a = 1.0
    w = np.array([1.0, -0.5, a * a / (GAMMA * (GAMMA - 1.0)) + 0.125])
    ghost = inlet_ghost_state(w, problem)
    assert np.all(np.isfinite(ghost))
    assert ghost[0] > 0.0
    assert pressure(ghost) > 0.0
    invariant = -0.5 - 2.0 * a / (GAMMA - 1.0)
    a_b = np.sqrt(GAMMA * pressure(ghost) / ghost[0])
    assert ghost[1] / ghost[0] - 2.0 * a_b / (GAMMA - 1.0) == pytest.approx(invariant, rel=1e-12)


def test_density_pressure_of_freestream():
    mesh = build_uniform_mesh(10.0, 7, 2)
    problem = NozzleProblem(A0=1.2, p0=0.75)
    w = freestream_state(problem.p_tot, problem.T_tot, problem.p0)
    disc = NozzleDiscretization(mesh, problem)
    rho, p = disc.density_pressure(freestream_field(mesh, problem).values)
    assert rho.shape == p.shape == (7, mesh.quad_points.shape[1] + 2)
    assert np.allclose(rho, w[0], rtol=1e-10)
    assert np.allclose(p, problem.p0, rtol=1e-10)


def test_failed_direct_solve_continues_in_viscosity(monkeypatch):
    mesh = build_uniform_mesh(10.0, 10, 1)
    problem = NozzleProblem(A0=3.0, p0=0.8, c_nu=0.2)
    viscosities = []
    iterate = euler1d._ptc_iterate

    def stalls_once(disc, U, cfg):
        viscosities.append(disc.problem.c_nu)
        if len(viscosities) == 1:
            raise PtcNonConvergenceError("stalled", None, [PtcRecord(0, 1.0, 1.0), PtcRecord(1, 1.0, 1.0)])
        return iterate(disc, U, cfg)

    monkeypatch.setattr(euler1d, "_ptc_iterate", stalls_once)
    result = ptc_solve(mesh, problem, freestream_field(mesh, problem))
    assert viscosities == pytest.approx([0.2, 2.0, 0.6, 0.2])
    assert result.iterations >= 1
    assert result.history[-1].residual_norm <= 1e-9

    viscosities.clear()
    with pytest.raises(PtcNonConvergenceError):
        ptc_solve(mesh, problem, cfg=PtcConfig(viscosity_continuation=()))
    assert viscosities == [0.2]


@pytest.mark.slow
@pytest.mark.parametrize("mu", [(0.5, 0.7), (0.5, 0.85), (1.5, 0.85), (1.0, 0.775)])
def test_ptc_converges_across_the_parameter_box(mu):
    mesh = build_uniform_mesh(10.0, 30, 1)
    problem = NozzleProblem(A0=mu[0], p0=mu[1])
    result = ptc_solve(mesh, problem)
    assert result.history[-1].residual_norm <= 1e-9
    rho, p = NozzleDiscretization(mesh, problem).density_pressure(result.state.values)
    assert np.all(rho > 0.0) and np.all(p > 0.0)
