from __future__ import annotations

import numpy as np
import pytest

from larom.errors import DegenerateDensityError, InvalidArgumentError, NonBijectiveMapError
from larom.mesh1d import (
    DensityFunction,
    Mesh1D,
    StateField,
    build_uniform_mesh,
    compose_with_map,
    de_boor_adapt,
    equidistribute,
    interpolate_field,
    mach_curvature_density,
)


class _AffineBump:
    """x + c sin(pi x / L); bijective for |c| < L / pi."""

    def __init__(self, L: float, c: float):
        self.L = L
        self.c = c

    def __call__(self, x):
        return np.asarray(x) + self.c * np.sin(np.pi * np.asarray(x) / self.L)

    def derivative(self, x):
        return 1.0 + self.c * np.pi / self.L * np.cos(np.pi * np.asarray(x) / self.L)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        x = y.copy()
        for _ in range(60):
            x = x - (self(x) - y) / self.derivative(x)
        return x


def test_uniform_mesh_spacing():
    mesh = build_uniform_mesh(10.0, 60, 2)
    assert mesh.nodes.size == 61
    assert np.allclose(mesh.h, 1.0 / 6.0)
    assert mesh.n_dofs(3) == 3 * 60 * 3


@pytest.mark.parametrize("nodes", [[0.0, 0.5, 0.5, 1.0], [0.1, 0.5, 1.0], [0.0]])
def test_mesh_rejects_bad_nodes(nodes):
    with pytest.raises(InvalidArgumentError):
        Mesh1D(np.array(nodes), 1)


def test_quadrature_integrates_polynomials_exactly():
    mesh = build_uniform_mesh(2.0, 7, 3)
    integral = np.sum(mesh.quad_weights * mesh.quad_points**5)
    assert integral == pytest.approx(2.0**6 / 6.0, rel=1e-12)


def test_state_field_layout_and_evaluation():
    mesh = build_uniform_mesh(1.0, 4, 2)
    field = StateField.from_function(mesh, lambda x: np.stack([x, x**2, np.ones_like(x)]))
    assert field.values.shape == (3, 4, 3)
    x = np.array([0.1, 0.37, 0.9])
    assert np.allclose(field.evaluate(x), np.stack([x, x**2, np.ones_like(x)]), atol=1e-13)
    with pytest.raises(InvalidArgumentError):
        StateField(mesh, np.zeros(5))


def test_de_boor_constant_density_gives_uniform_nodes():
    nodes = de_boor_adapt(DensityFunction(np.array([0.0, 1.0]), np.array([1.0]), 5))
    assert np.allclose(nodes, [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-14)


def test_de_boor_step_density():
    d = DensityFunction(np.array([0.0, 0.5, 1.0]), np.array([1.0, 3.0]), 3)
    assert np.allclose(de_boor_adapt(d), [0.0, 2.0 / 3.0, 1.0], atol=1e-14)


def test_de_boor_equidistributes_each_interval():
    rng = np.random.default_rng(3)
    bp = np.sort(np.concatenate([[0.0, 4.0], rng.uniform(0, 4, 9)]))
    d = DensityFunction(bp, rng.uniform(0.2, 5.0, bp.size - 1), 17)
    nodes = de_boor_adapt(d)
    pieces = d.integrate(nodes[:-1], nodes[1:])
    assert np.all(np.diff(nodes) > 0)
    assert np.allclose(pieces, d.integral / 16, rtol=1e-12)


def test_de_boor_zero_density_raises():
    with pytest.raises(DegenerateDensityError):
        de_boor_adapt(DensityFunction(np.array([0.0, 1.0]), np.array([0.0]), 4))


def test_density_rejects_negative_values():
    with pytest.raises(InvalidArgumentError):
        DensityFunction(np.array([0.0, 1.0]), np.array([-1.0]), 4)


def test_curvature_density_of_quadratic_mach_is_constant():
    mesh = build_uniform_mesh(1.0, 8, 2)
    mach = StateField.from_function(mesh, lambda x: (x**2)[None], n_vars=1)
    d = mach_curvature_density([mach], 10)
    assert d.integral == pytest.approx(10.0, rel=1e-12)
    assert np.allclose(d.values, 10.0, rtol=1e-9)


def test_curvature_density_of_linear_mach_is_uniform():
    mesh = build_uniform_mesh(2.0, 5, 1)
    mach = StateField.from_function(mesh, lambda x: (0.3 * x + 0.1)[None], n_vars=1)
    d = mach_curvature_density([mach], 6)
    nodes = de_boor_adapt(d)
    assert np.allclose(nodes, np.linspace(0.0, 2.0, 6), atol=1e-12)


def test_curvature_density_takes_pointwise_max_over_snapshots():
    mesh = build_uniform_mesh(1.0, 10, 3)
    flat = StateField.from_function(mesh, lambda x: (2.0 * x**2)[None], n_vars=1)
    cubic = StateField.from_function(mesh, lambda x: (x**3)[None], n_vars=1)
    d = mach_curvature_density([flat, cubic], 20)
    mid = 0.5 * (d.breakpoints[:-1] + d.breakpoints[1:])
    low = d.values[mid < 0.5]
    assert np.allclose(low, low[0], rtol=1e-8)
    assert np.all(d.values[mid > 0.9] > low.max())


def test_equidistribute_clusters_nodes_near_steep_curvature():
    mesh = build_uniform_mesh(10.0, 40, 2)

    def density_on(candidate):
        mach = StateField.from_function(candidate, lambda x: np.tanh(4.0 * (x - 6.0))[None], n_vars=1)
        return mach_curvature_density([mach], 41)

    adapted = equidistribute(density_on, mesh, 40, sweeps=3)
    assert adapted.n_elements == 40
    near = adapted.h[np.abs(0.5 * (adapted.nodes[:-1] + adapted.nodes[1:]) - 6.0) < 0.5]
    assert near.min() < mesh.h.min()


def test_interpolation_reproduces_global_polynomials():
    src = build_uniform_mesh(3.0, 7, 2)
    dst = Mesh1D(np.array([0.0, 0.2, 1.1, 1.5, 2.9, 3.0]), 2)
    fn = lambda x: np.stack([1.0 + x, x**2 - 2.0 * x, 0.5 * np.ones_like(x)])
    moved = interpolate_field(StateField.from_function(src, fn), dst)
    assert np.allclose(moved.coeffs, StateField.from_function(dst, fn).coeffs, atol=1e-12)


def test_interpolation_rejects_other_domain():
    src = StateField.from_function(build_uniform_mesh(1.0, 3, 1), lambda x: x[None], n_vars=1)
    with pytest.raises(InvalidArgumentError):
        interpolate_field(src, build_uniform_mesh(2.0, 3, 1))


def test_discontinuous_interpolation_keeps_both_traces():
    src = build_uniform_mesh(2.0, 2, 1)
    step = StateField.from_values(src, np.array([[[0.0, 0.0], [1.0, 1.0]]]))
    moved = interpolate_field(step, build_uniform_mesh(2.0, 4, 1))
    assert np.array_equal(moved.values[0], [[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])


def test_compose_with_identity_is_identity():
    mesh = build_uniform_mesh(10.0, 12, 2)
    field = StateField.from_function(mesh, lambda x: np.stack([np.sin(x), np.cos(x), x]))
    same = compose_with_map(field, _AffineBump(10.0, 0.0))
    assert np.allclose(same.coeffs, field.coeffs, atol=1e-12)


def test_compose_forward_then_inverse_recovers_smooth_field():
    mesh = build_uniform_mesh(10.0, 200, 2)
    field = StateField.from_function(mesh, lambda x: np.sin(0.3 * x)[None], n_vars=1)
    mapping = _AffineBump(10.0, 0.5)
    back = compose_with_map(compose_with_map(field, mapping), mapping, direction="inverse")
    assert np.max(np.abs(back.coeffs - field.coeffs)) < 1e-5


def test_compose_rejects_folding_map():
    mesh = build_uniform_mesh(10.0, 10, 1)
    field = StateField.from_function(mesh, lambda x: x[None], n_vars=1)
    with pytest.raises(NonBijectiveMapError):
        compose_with_map(field, _AffineBump(10.0, 5.0))
    with pytest.raises(InvalidArgumentError):
        compose_with_map(field, _AffineBump(10.0, 0.0), direction="sideways")
