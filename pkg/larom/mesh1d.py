"""One-dimensional DG meshes and fields.

Features:
- Lagrange reference element (equispaced nodes, Gauss quadrature with 2p+1 points)
- Mesh1D / StateField containers with elementwise (discontinuous) evaluation
- interpolation between meshes and composition with 1D domain maps
- equidistribution (de Boor) driven by a Mach-curvature density
"""

import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from numpy.polynomial import legendre

from .errors import DegenerateDensityError, InvalidArgumentError, NonBijectiveMapError

logger = logging.getLogger(__name__)

CURVATURE_FLOOR = 1e-2


@dataclass(frozen=True, eq=False)
class ReferenceElement:
    """Lagrange basis of degree p on [0, 1] with its Gauss quadrature."""

    degree: int
    nodes: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    monomial_coeffs: np.ndarray

    @property
    def n_lp(self) -> int:
        return self.degree + 1

    def basis(self, xi, derivative: int = 0) -> np.ndarray:
        """Basis values (or derivatives in xi) at points ``xi``, shape (len(xi), n_lp)."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        powers = np.arange(self.degree + 1)
        factor = np.ones(self.degree + 1)
        for d in range(derivative):
            factor = factor * (powers - d)
        exponents = np.maximum(powers - derivative, 0)
        vander = factor[None, :] * xi[:, None] ** exponents[None, :]
        return vander @ self.monomial_coeffs

    @functools.cached_property
    def phi(self) -> np.ndarray:
        return self.basis(self.points)

    @functools.cached_property
    def dphi(self) -> np.ndarray:
        return self.basis(self.points, 1)

    @functools.cached_property
    def d2phi(self) -> np.ndarray:
        return self.basis(self.points, 2)

    @functools.cached_property
    def phi_left(self) -> np.ndarray:
        return self.basis([0.0])[0]

    @functools.cached_property
    def phi_right(self) -> np.ndarray:
        return self.basis([1.0])[0]

    @functools.cached_property
    def dphi_left(self) -> np.ndarray:
        return self.basis([0.0], 1)[0]

    @functools.cached_property
    def dphi_right(self) -> np.ndarray:
        return self.basis([1.0], 1)[0]

    @functools.cached_property
    def mass(self) -> np.ndarray:
        return np.einsum("q,qa,qb->ab", self.weights, self.phi, self.phi)

    @functools.cached_property
    def stiffness(self) -> np.ndarray:
        return np.einsum("q,qa,qb->ab", self.weights, self.dphi, self.dphi)


@functools.lru_cache(maxsize=None)
def reference_element(degree: int, n_quad: Optional[int] = None) -> ReferenceElement:
    if degree < 1:
        raise InvalidArgumentError(f"polynomial degree must be >= 1, got {degree}")
    n_quad = 2 * degree + 1 if n_quad is None else int(n_quad)
    if n_quad < degree + 1:
        raise InvalidArgumentError(f"need at least {degree + 1} quadrature points, got {n_quad}")
    nodes = np.linspace(0.0, 1.0, degree + 1)
    vander = nodes[:, None] ** np.arange(degree + 1)[None, :]
    coeffs = np.linalg.inv(vander)
    t, w = legendre.leggauss(n_quad)
    return ReferenceElement(
        degree=degree,
        nodes=nodes,
        points=0.5 * (t + 1.0),
        weights=0.5 * w,
        monomial_coeffs=coeffs,
    )


@dataclass(frozen=True, eq=False)
class Mesh1D:
    """Element k spans nodes[k]..nodes[k+1]; facet j sits at nodes[j]."""

    nodes: np.ndarray
    degree: int
    n_quad: Optional[int] = None
    checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        if self.degree < 1:
            raise InvalidArgumentError(f"polynomial degree must be >= 1, got {self.degree}")
        if not self.checked:
            return
        if nodes.ndim != 1 or nodes.size < 2:
            raise InvalidArgumentError("a mesh needs at least two nodes")
        if nodes[0] != 0.0:
            raise InvalidArgumentError(f"first node must be 0, got {nodes[0]}")
        if not np.all(np.isfinite(nodes)) or np.any(np.diff(nodes) <= 0.0):
            raise InvalidArgumentError("mesh nodes must be finite and strictly increasing")

    @property
    def L(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_elements(self) -> int:
        return self.nodes.size - 1

    @property
    def n_facets(self) -> int:
        return self.nodes.size

    @property
    def n_lp(self) -> int:
        return self.degree + 1

    @functools.cached_property
    def ref(self) -> ReferenceElement:
        return reference_element(self.degree, self.n_quad)

    @functools.cached_property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @functools.cached_property
    def quad_points(self) -> np.ndarray:
        """Physical quadrature points, shape (N_e, nq)."""
        return self.nodes[:-1, None] + self.h[:, None] * self.ref.points[None, :]

    @functools.cached_property
    def quad_weights(self) -> np.ndarray:
        return self.h[:, None] * self.ref.weights[None, :]

    @functools.cached_property
    def lagrange_points(self) -> np.ndarray:
        """Physical Lagrange nodes, shape (N_e, n_lp)."""
        return self.nodes[:-1, None] + self.h[:, None] * self.ref.nodes[None, :]

    def n_dofs(self, n_vars: int = 1) -> int:
        return n_vars * self.n_elements * self.n_lp

    def with_nodes(self, nodes, checked: bool = True) -> "Mesh1D":
        return Mesh1D(nodes, self.degree, self.n_quad, checked=checked)

    def same_as(self, other: "Mesh1D") -> bool:
        return (
            self is other
            or (
                self.degree == other.degree
                and self.nodes.shape == other.nodes.shape
                and np.array_equal(self.nodes, other.nodes)
            )
        )

    def locate(self, x, prefer_right=None):
        """Element index and local coordinate of each point.

        Points on an element boundary take the left element unless ``prefer_right``
        is set for them.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        left = np.searchsorted(self.nodes, x, side="left") - 1
        if prefer_right is None:
            elem = left
        else:
            right = np.searchsorted(self.nodes, x, side="right") - 1
            elem = np.where(np.broadcast_to(prefer_right, x.shape), right, left)
        elem = np.clip(elem, 0, self.n_elements - 1)
        xi = (x - self.nodes[elem]) / self.h[elem]
        return elem, xi


def build_uniform_mesh(L: float, n_elements: int, degree: int, n_quad: Optional[int] = None) -> Mesh1D:
    if not L > 0:
        raise InvalidArgumentError(f"domain length must be positive, got {L}")
    if n_elements < 1:
        raise InvalidArgumentError(f"element count must be >= 1, got {n_elements}")
    if degree < 1:
        raise InvalidArgumentError(f"polynomial degree must be >= 1, got {degree}")
    nodes = np.linspace(0.0, float(L), int(n_elements) + 1)
    return Mesh1D(nodes, int(degree), n_quad)


@dataclass(frozen=True, eq=False)
class StateField:
    """DG coefficients of ``n_vars`` variables; index i + k*n_lp + l*n_lp*N_e."""

    mesh: Mesh1D
    coeffs: np.ndarray
    n_vars: int = 3

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).ravel()
        expected = self.mesh.n_dofs(self.n_vars)
        if coeffs.size != expected:
            raise InvalidArgumentError(
                f"expected {expected} coefficients for {self.n_vars} variables, got {coeffs.size}"
            )
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def from_values(cls, mesh: Mesh1D, values: np.ndarray) -> "StateField":
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        return cls(mesh, values.ravel(), values.shape[0])

    @classmethod
    def from_function(cls, mesh: Mesh1D, fn: Callable[[np.ndarray], np.ndarray], n_vars: int = 3) -> "StateField":
        """Interpolate ``fn`` at the Lagrange nodes; ``fn`` maps x to shape (n_vars, len(x))."""
        x = mesh.lagrange_points.ravel()
        vals = np.asarray(fn(x), dtype=float).reshape(n_vars, mesh.n_elements, mesh.n_lp)
        return cls(mesh, vals.ravel(), n_vars)

    @property
    def values(self) -> np.ndarray:
        """Coefficients as (n_vars, N_e, n_lp)."""
        return self.coeffs.reshape(self.n_vars, self.mesh.n_elements, self.mesh.n_lp)

    def with_mesh(self, mesh: Mesh1D) -> "StateField":
        return StateField(mesh, self.coeffs, self.n_vars)

    def with_coeffs(self, coeffs) -> "StateField":
        return StateField(self.mesh, coeffs, self.n_vars)

    def component(self, i: int) -> "StateField":
        return StateField(self.mesh, self.values[i].ravel(), 1)

    def evaluate(self, x, prefer_right=None) -> np.ndarray:
        """Point values, shape (n_vars, len(x))."""
        elem, xi = self.mesh.locate(x, prefer_right)
        phi = self.mesh.ref.basis(xi)
        return np.einsum("vpa,pa->vp", self.values[:, elem, :], phi)

    def at_quadrature(self) -> np.ndarray:
        return np.einsum("vka,qa->vkq", self.values, self.mesh.ref.phi)

    def gradient_at_quadrature(self) -> np.ndarray:
        h = self.mesh.h
        return np.einsum("vka,qa->vkq", self.values, self.mesh.ref.dphi) / h[None, :, None]

    def second_derivative_at_quadrature(self) -> np.ndarray:
        h = self.mesh.h
        return np.einsum("vka,qa->vkq", self.values, self.mesh.ref.d2phi) / (h * h)[None, :, None]

    def l2_norm(self) -> float:
        q = self.at_quadrature()
        return float(np.sqrt(np.sum(q * q * self.mesh.quad_weights[None])))


@dataclass(frozen=True, eq=False)
class DensityFunction:
    """Piecewise-constant mesh density: ``values[i]`` on [breakpoints[i], breakpoints[i+1]]."""

    breakpoints: np.ndarray
    values: np.ndarray
    target_N: int

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or vals.shape != (bp.size - 1,):
            raise InvalidArgumentError("density needs one value per breakpoint interval")
        if np.any(np.diff(bp) <= 0):
            raise InvalidArgumentError("density breakpoints must be strictly increasing")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise InvalidArgumentError("density values must be finite and nonnegative")
        if self.target_N < 2:
            raise InvalidArgumentError(f"target node count must be >= 2, got {self.target_N}")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.values * np.diff(self.breakpoints))])

    @property
    def integral(self) -> float:
        return float(self.cumulative()[-1])

    def integrate(self, a, b) -> np.ndarray:
        """Integral of the density over [a, b] (vectorized)."""
        cum = self.cumulative()
        return _cumulative_at(self, cum, np.asarray(b)) - _cumulative_at(self, cum, np.asarray(a))


def _cumulative_at(d: DensityFunction, cum: np.ndarray, x: np.ndarray) -> np.ndarray:
    bp = d.breakpoints
    idx = np.clip(np.searchsorted(bp, x, side="right") - 1, 0, d.values.size - 1)
    return cum[idx] + d.values[idx] * (np.clip(x, bp[0], bp[-1]) - bp[idx])


def de_boor_adapt(d: DensityFunction) -> np.ndarray:
    """Nodes x_1 < ... < x_N equidistributing the piecewise-constant density.

    The cumulative integral is inverted in closed form, so every interval carries
    exactly total/(N-1).
    """
    cum = d.cumulative()
    total = cum[-1]
    if not total > 0 or not np.isfinite(total):
        raise DegenerateDensityError("density is identically zero")
    targets = np.linspace(0.0, total, d.target_N)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, d.values.size - 1)
    slope = d.values[idx]
    safe = np.where(slope > 0, slope, 1.0)
    nodes = d.breakpoints[idx] + np.where(slope > 0, (targets - cum[idx]) / safe, 0.0)
    nodes[0] = d.breakpoints[0]
    nodes[-1] = d.breakpoints[-1]
    return nodes


def equidistribute(
    density_on: Callable[[Mesh1D], DensityFunction],
    mesh: Mesh1D,
    n_elements: int,
    sweeps: int = 3,
    tol: float = 1e-10,
) -> Mesh1D:
    """Fixed-point de Boor: re-evaluate the density on each new mesh, up to ``sweeps`` times."""
    current = mesh
    for sweep in range(1, sweeps + 1):
        d = density_on(current)
        if d.target_N != n_elements + 1:
            d = DensityFunction(d.breakpoints, d.values, n_elements + 1)
        nodes = de_boor_adapt(d)
        moved = current.nodes.size == nodes.size and np.max(np.abs(nodes - current.nodes)) < tol * mesh.L
        current = mesh.with_nodes(nodes)
        logger.debug(f"de Boor sweep {sweep}: {n_elements} elements, min h={current.h.min():.3e}")
        if moved:
            break
    return current


def _quadrature_cells(mesh: Mesh1D) -> np.ndarray:
    """Breakpoints of one cell per quadrature point (cell widths = quadrature weights)."""
    edges = np.concatenate([[0.0], np.cumsum(mesh.ref.weights)[:-1]])
    inner = mesh.nodes[:-1, None] + mesh.h[:, None] * edges[None, :]
    return np.concatenate([inner.ravel(), [mesh.L]])


def mach_curvature_density(snapshots: Sequence[StateField], N: int) -> DensityFunction:
    """Density from max over snapshots of max(|Ma_xx|, 1e-2 sup|Ma_xx|), normalized to N."""
    if not snapshots:
        raise InvalidArgumentError("need at least one Mach snapshot")
    if N < 2:
        raise InvalidArgumentError(f"target node count must be >= 2, got {N}")
    mesh = snapshots[0].mesh
    for snap in snapshots[1:]:
        if not snap.mesh.same_as(mesh):
            raise InvalidArgumentError("Mach snapshots must share one mesh")

    rho = np.zeros((mesh.n_elements, mesh.ref.points.size))
    for snap in snapshots:
        curvature = np.abs(snap.second_derivative_at_quadrature()[0])
        floor = CURVATURE_FLOOR * curvature.max()
        rho = np.maximum(rho, np.maximum(curvature, floor))

    bp = _quadrature_cells(mesh)
    integral = float(np.sum(rho * mesh.quad_weights))
    if not integral > 0:
        logger.warning("Mach curvature vanishes on every snapshot; using a uniform density")
        return DensityFunction(np.array([0.0, mesh.L]), np.array([N / mesh.L]), N)
    return DensityFunction(bp, N * rho.ravel() / integral, N)


class DomainMap(Protocol):
    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def derivative(self, x: np.ndarray) -> np.ndarray: ...

    def inverse(self, y: np.ndarray) -> np.ndarray: ...


def _left_end_mask(mesh: Mesh1D) -> np.ndarray:
    mask = np.zeros((mesh.n_elements, mesh.n_lp), dtype=bool)
    mask[:, 0] = True
    return mask.ravel()


def _sample_at_nodes(field: StateField, dst_mesh: Mesh1D, points: np.ndarray) -> StateField:
    vals = field.evaluate(points, prefer_right=_left_end_mask(dst_mesh))
    return StateField(dst_mesh, vals.ravel(), field.n_vars)


def interpolate_field(src: StateField, dst_mesh: Mesh1D) -> StateField:
    """Interpolate ``src`` at the Lagrange nodes of ``dst_mesh``.

    A destination node on a source element boundary takes the left trace, except
    the first node of each destination element, which takes the trace on its own side.
    """
    L = src.mesh.L
    if abs(dst_mesh.L - L) > 1e-12 * max(L, 1.0) or dst_mesh.nodes[0] != src.mesh.nodes[0]:
        raise InvalidArgumentError(f"domains differ: [0, {L}] vs [0, {dst_mesh.L}]")
    return _sample_at_nodes(src, dst_mesh, dst_mesh.lagrange_points.ravel())


def compose_with_map(field: StateField, mapping: DomainMap, direction: str = "forward") -> StateField:
    """Coefficients on the same mesh interpolating q o Phi (forward) or q o Phi^-1 (inverse)."""
    mesh = field.mesh
    check = np.concatenate([mesh.quad_points.ravel(), mesh.nodes])
    if np.any(mapping.derivative(check) <= 0):
        raise NonBijectiveMapError("map derivative is not positive on the mesh")
    points = mesh.lagrange_points.ravel()
    if direction == "forward":
        targets = mapping(points)
    elif direction == "inverse":
        targets = mapping.inverse(points)
    else:
        raise InvalidArgumentError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return _sample_at_nodes(field, mesh, targets)
