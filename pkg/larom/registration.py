"""Registration: spectral maps of [0, L] onto itself and their optimization.

Features:
- H2-orthonormal polynomial map space vanishing at the endpoints (Legendre seeds)
- bijectivity penalty f_jac, mesh-quality penalty f_msh (1D and triangles)
- shock locator, shock-tracking target, projection-based template target
- single-parameter BFGS registration, parametric registration with nearest-neighbour
  warm starts (or supplied warm starts in parallel), POD compression of the maps
- template greedy registration and the regressor mu -> a_mu
"""

import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import legendre
from scipy.optimize import minimize

from .errors import (
    DegenerateBasisError,
    InvalidArgumentError,
    NonBijectiveMapError,
    RegistrationFailedError,
    UndefinedLocatorError,
)
from .mesh1d import Mesh1D, StateField
from .mor import pod
from .parallel import parallel_map

logger = logging.getLogger(__name__)

EXP_CLAMP = 50.0
MSH_SENTINEL = 1e30
PENALTY_CELLS = 40
PENALTY_POINTS = 5
LOCATOR_FLAT_TOL = 1e-10


@dataclass
class RegistrationConfig:
    xi: float = 1e-3
    eps: float = 0.1
    c_exp: Optional[float] = None  # 0.025 eps when unset
    kappa_msh: float = 10.0
    delta: float = 0.5
    tol_pod: float = 1e-3
    tol_greedy: float = 1e-2
    max_templates: int = 5
    gtol: float = 1e-8
    max_iters: int = 500
    fd_step: float = 1e-6
    max_failure_fraction: float = 0.2

    def __post_init__(self):
        if not self.xi > 0:
            raise InvalidArgumentError(f"xi must be positive, got {self.xi}")
        if not 0 < self.eps < 1:
            raise InvalidArgumentError(f"eps must lie in (0, 1), got {self.eps}")
        if self.c_exp is None:
            self.c_exp = 0.025 * self.eps
        if not 0 < self.c_exp < self.eps:
            raise InvalidArgumentError(f"c_exp must lie in (0, eps), got {self.c_exp}")
        if not 0 < self.tol_pod < 1:
            raise InvalidArgumentError(f"tol_pod must lie in (0, 1), got {self.tol_pod}")


# --- map space ---------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _composite_gauss(L: float, cells: int = PENALTY_CELLS, points: int = PENALTY_POINTS):
    t, w = legendre.leggauss(points)
    h = L / cells
    left = np.arange(cells)[:, None] * h
    x = (left + 0.5 * h * (t[None, :] + 1.0)).ravel()
    weights = np.tile(0.5 * h * w, cells)
    x.setflags(write=False)
    weights.setflags(write=False)
    return x, weights


@dataclass(frozen=True, eq=False)
class MapBasis:
    """Displacement basis phi_1..phi_m; Legendre coefficients in t = 2x/L - 1.

    ``coeffs`` holds the H2-orthonormal functions of the full space (m_hf rows);
    ``modes`` (m_hf x m, orthonormal columns) selects a compressed subspace.
    """

    J: int
    L: float
    coeffs: np.ndarray
    modes: Optional[np.ndarray] = None

    @property
    def m_hf(self) -> int:
        return self.coeffs.shape[0]

    @property
    def m(self) -> int:
        return self.m_hf if self.modes is None else self.modes.shape[1]

    @functools.cached_property
    def active_coeffs(self) -> np.ndarray:
        """Legendre coefficients of the active basis functions, shape (m, J+1)."""
        return self.coeffs if self.modes is None else self.modes.T @ self.coeffs

    def evaluate(self, x, derivative: int = 0) -> np.ndarray:
        """Basis values (or x-derivatives) at ``x``, shape (len(x), m)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        t = 2.0 * x / self.L - 1.0
        c = self.active_coeffs.T
        if derivative:
            c = legendre.legder(c, derivative) * (2.0 / self.L) ** derivative
        return legendre.legval(t, c).T

    @functools.cached_property
    def seminorm_matrix(self) -> np.ndarray:
        """S with |id + sum a_i phi_i|^2_{H2 seminorm} = a^T S a."""
        x, w = _gauss_exact(self.L, self.J)
        d2 = self.evaluate(x, 2)
        return np.einsum("q,qi,qj->ij", w, d2, d2)

    def compress(self, modes: np.ndarray) -> "MapBasis":
        modes = np.asarray(modes, dtype=float)
        if modes.ndim != 2 or modes.shape[0] != self.m_hf:
            raise InvalidArgumentError(f"modes must have {self.m_hf} rows, got shape {modes.shape}")
        return MapBasis(self.J, self.L, self.coeffs, modes)

    def full(self) -> "MapBasis":
        return MapBasis(self.J, self.L, self.coeffs)

    def expand(self, a) -> np.ndarray:
        """Coefficients in the full (uncompressed) basis."""
        a = np.asarray(a, dtype=float)
        return a if self.modes is None else self.modes @ a

    def project(self, a_full) -> np.ndarray:
        a_full = np.asarray(a_full, dtype=float)
        return a_full if self.modes is None else self.modes.T @ a_full


def _gauss_exact(L: float, J: int):
    t, w = legendre.leggauss(J + 2)
    return 0.5 * L * (t + 1.0), 0.5 * L * w


def build_map_basis(J: int = 10, L: float = 10.0) -> MapBasis:
    """Seeds x(L-x) P_j(2x/L-1), j < J-1, orthonormalized in H2 = (u'', v'') + (u, v)."""
    if J < 2:
        raise InvalidArgumentError(f"map degree must be >= 2, got {J}")
    if not L > 0:
        raise InvalidArgumentError(f"domain length must be positive, got {L}")
    bubble = legendre.poly2leg([1.0, 0.0, -1.0]) * (L * L / 4.0)
    seeds = np.zeros((J - 1, J + 1))
    for j in range(J - 1):
        unit = np.zeros(j + 1)
        unit[j] = 1.0
        s = legendre.legmul(bubble, unit)
        seeds[j, : s.size] = s

    x, w = _gauss_exact(L, J)
    t = 2.0 * x / L - 1.0
    values = legendre.legval(t, seeds.T).T
    second = legendre.legval(t, legendre.legder(seeds.T, 2) * (2.0 / L) ** 2).T
    gram = np.einsum("q,qi,qj->ij", w, values, values) + np.einsum("q,qi,qj->ij", w, second, second)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise DegenerateBasisError(f"H2 Gram matrix of the J={J} seeds is not positive definite") from exc
    if np.min(np.diag(chol)) < 1e-12 * np.max(np.diag(chol)):
        raise DegenerateBasisError(f"seed family for J={J} is numerically rank deficient")
    coeffs = np.linalg.solve(chol, seeds)
    logger.debug(f"map basis J={J}: m_hf={coeffs.shape[0]}")
    return MapBasis(J, float(L), coeffs)


@dataclass(frozen=True, eq=False)
class MapCoefficients:
    """Phi(x) = x + sum_i a_i phi_i(x); identity outside [0, L]."""

    a: np.ndarray
    basis: MapBasis

    def __post_init__(self):
        a = np.array(self.a, dtype=float).ravel()
        if a.size != self.basis.m:
            raise InvalidArgumentError(f"expected {self.basis.m} map coefficients, got {a.size}")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @classmethod
    def identity(cls, basis: MapBasis) -> "MapCoefficients":
        return cls(np.zeros(basis.m), basis)

    @property
    def L(self) -> float:
        return self.basis.L

    def with_a(self, a) -> "MapCoefficients":
        return MapCoefficients(a, self.basis)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).ravel()
        inside = (flat > 0.0) & (flat < self.L)
        out = flat.copy()
        if inside.any():
            out[inside] = flat[inside] + self.basis.evaluate(flat[inside]) @ self.a
        return out.reshape(x.shape) if x.ndim else out[0]

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).ravel()
        return (1.0 + self.basis.evaluate(flat, 1) @ self.a).reshape(x.shape)

    def inverse(self, y, tol: float = 1e-13, max_iters: int = 100) -> np.ndarray:
        """Safeguarded Newton on [0, L]; assumes Phi is increasing."""
        y = np.asarray(y, dtype=float)
        flat = np.atleast_1d(y).ravel()
        target = np.clip(flat, 0.0, self.L)
        lo = np.zeros_like(target)
        hi = np.full_like(target, self.L)
        x = target.copy()
        for _ in range(max_iters):
            r = self(x) - target
            if np.max(np.abs(r), initial=0.0) <= tol * self.L:
                break
            lo = np.where(r < 0, x, lo)
            hi = np.where(r > 0, x, hi)
            d = self.derivative(x)
            newton = x - r / np.where(d > 0, d, 1.0)
            outside = (d <= 0) | (newton <= lo) | (newton >= hi)
            x = np.where(outside, 0.5 * (lo + hi), newton)
        # identity extension outside the domain
        x = np.where((flat <= 0.0) | (flat >= self.L), flat, x)
        return x.reshape(y.shape) if y.ndim else x[0]

    def seminorm2(self) -> float:
        return float(self.a @ self.basis.seminorm_matrix @ self.a)

    def min_jacobian(self, points: Optional[np.ndarray] = None) -> float:
        if points is None:
            points, _ = _composite_gauss(self.L)
        return float(np.min(self.derivative(points)))

    def is_bijective(self, points: Optional[np.ndarray] = None) -> bool:
        return self.min_jacobian(points) > 0.0

    def deform(self, mesh: Mesh1D, checked: bool = True) -> Mesh1D:
        """Mesh with nodes Phi(x_j)."""
        return mesh.with_nodes(self(mesh.nodes), checked=checked)


# --- penalties ---------------------------------------------------------------


def f_jac(coeffs: MapCoefficients, cfg: RegistrationConfig) -> float:
    """|Omega|^-1 int exp((eps - Phi') / C_exp), exponent clamped at 50."""
    x, w = _composite_gauss(coeffs.L)
    arg = np.minimum((cfg.eps - coeffs.derivative(x)) / cfg.c_exp, EXP_CLAMP)
    return float(np.sum(w * np.exp(arg)) / coeffs.L)


@dataclass
class MeshQuality:
    value: float
    ratios: np.ndarray
    inverted: bool

    @property
    def min_ratio(self) -> float:
        return float(np.min(self.ratios))

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios))


def _element_jacobians(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)


def _shape_measure(B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = B.shape[-1]
    det = np.linalg.det(B) if d > 1 else B[:, 0, 0]
    frob = np.sum(B * B, axis=(1, 2))
    positive = det > 0
    safe = np.where(positive, det, 1.0)
    q = (frob / safe ** (2.0 / d)) ** 2 / d**2
    return np.where(positive, q, np.inf), det


def element_quality_ratios(reference, deformed, triangles=None) -> Tuple[np.ndarray, np.ndarray]:
    """q_k(Phi)/q_k(id) per element, and the reference element measures.

    1D meshes are node arrays (``triangles`` None); 2D meshes are (n_v, 2) vertex
    arrays sharing ``triangles``.
    """
    reference = np.asarray(reference, dtype=float)
    deformed = np.asarray(deformed, dtype=float)
    if reference.shape != deformed.shape:
        raise InvalidArgumentError("reference and deformed meshes must share connectivity")
    if triangles is None:
        B_ref = np.diff(reference)[:, None, None]
        B_def = np.diff(deformed)[:, None, None]
        measure = np.diff(reference)
    else:
        triangles = np.asarray(triangles, dtype=int)
        B_ref = _element_jacobians(reference, triangles)
        B_def = _element_jacobians(deformed, triangles)
        measure = 0.5 * np.abs(np.linalg.det(B_ref))
    q_ref, det_ref = _shape_measure(B_ref)
    if np.any(det_ref <= 0):
        raise InvalidArgumentError("reference mesh has inverted or degenerate elements")
    q_def, _ = _shape_measure(B_def)
    return q_def / q_ref, measure


def f_msh(reference, deformed, triangles=None, kappa_msh: float = 10.0) -> MeshQuality:
    """|Omega|^-1 sum_k |D_k| int_{D_hat} exp(q_k(Phi)/q_k(id) - kappa_msh)."""
    ratios, measure = element_quality_ratios(reference, deformed, triangles)
    inverted = bool(np.any(~np.isfinite(ratios)))
    if inverted:
        logger.debug("f_msh: deformed mesh has inverted elements")
        return MeshQuality(MSH_SENTINEL, ratios, True)
    ref_measure = 1.0 if triangles is None else 0.5
    arg = np.minimum(ratios - kappa_msh, EXP_CLAMP)
    value = float(np.sum(measure * ref_measure * np.exp(arg)) / np.sum(measure))
    return MeshQuality(value, ratios, False)


# --- targets -----------------------------------------------------------------


def shock_locator(mach: StateField, delta: float = 0.5) -> float:
    """Mean of the quadrature points where |dMa/dx| exceeds delta times its maximum."""
    grad = np.abs(mach.gradient_at_quadrature()[0])
    top = grad.max()
    # roundoff gradients of a constant field do not locate anything
    scale = max(float(np.abs(mach.values).max()), 1.0) / float(mach.mesh.h.min())
    if not np.isfinite(top) or not top > LOCATOR_FLAT_TOL * scale:
        raise UndefinedLocatorError("sensor has no gradient; shock position undefined")
    mask = grad > delta * top
    if not mask.any():
        mask = grad >= top
    return float(np.mean(mach.mesh.quad_points[mask]))


def target_shock(coeffs: MapCoefficients, x_ref: float, x_mu: float) -> float:
    return float((coeffs(np.array([x_ref]))[0] - x_mu) ** 2)


@dataclass(frozen=True, eq=False)
class TemplateSpace:
    """L2-orthonormal template functions sampled at the quadrature points of ``mesh``."""

    mesh: Mesh1D
    modes: np.ndarray  # (n, N_e, nq)

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    @classmethod
    def from_values(cls, mesh: Mesh1D, samples: Sequence[np.ndarray], rtol: float = 1e-10) -> "TemplateSpace":
        if len(samples) == 0:
            raise InvalidArgumentError("template space needs at least one template")
        w = mesh.quad_weights.ravel()
        X = np.stack([np.asarray(s, dtype=float).ravel() for s in samples], axis=1)
        C = X.T @ (w[:, None] * X)
        lam, vec = np.linalg.eigh(C)
        order = np.argsort(lam)[::-1]
        lam, vec = lam[order], vec[:, order]
        keep = lam > rtol * max(lam[0], 0.0)
        if not keep.any():
            raise InvalidArgumentError("templates are identically zero")
        modes = (X @ vec[:, keep]) / np.sqrt(lam[keep])[None, :]
        return cls(mesh, modes.T.reshape(-1, mesh.n_elements, mesh.ref.points.size))

    @classmethod
    def from_sensors(cls, mesh: Mesh1D, sensors: Sequence[StateField]) -> "TemplateSpace":
        x = mesh.quad_points.ravel()
        return cls.from_values(mesh, [s.evaluate(x)[0].reshape(mesh.quad_points.shape) for s in sensors])

    def misfit(self, values: np.ndarray) -> float:
        """|Omega|^-1 min_{nu in span} ||values - nu||^2."""
        w = self.mesh.quad_weights
        proj = np.einsum("ikq,kq,kq->i", self.modes, w, values)
        total = np.sum(w * values * values)
        return float(max(total - proj @ proj, 0.0) / self.mesh.L)


def mapped_sensor_values(sensor: StateField, coeffs: MapCoefficients, mesh: Mesh1D) -> np.ndarray:
    """(s o Phi) at the quadrature points of ``mesh``, shape (N_e, nq)."""
    y = coeffs(mesh.quad_points.ravel())
    return sensor.evaluate(np.clip(y, 0.0, sensor.mesh.L))[0].reshape(mesh.quad_points.shape)


def target_template(
    coeffs: MapCoefficients,
    sensor: StateField,
    space: TemplateSpace,
    anchor: Optional[Tuple[float, float]] = None,
) -> float:
    """Projection misfit of s o Phi onto the template space, plus an optional shock anchor."""
    if space is None or space.n == 0:
        raise InvalidArgumentError("template space is empty")
    value = space.misfit(mapped_sensor_values(sensor, coeffs, space.mesh))
    if anchor is not None:
        value += target_shock(coeffs, *anchor)
    return value


# --- optimization ------------------------------------------------------------


@dataclass
class RegistrationResult:
    coeffs: MapCoefficients
    target_value: float
    objective: float
    iterations: int
    history: List[float] = field(default_factory=list)


Target = Callable[[MapCoefficients], float]


def regularized_objective(
    target: Target, basis: MapBasis, cfg: Optional[RegistrationConfig] = None
) -> Tuple[Callable[[np.ndarray], float], Callable[[np.ndarray], np.ndarray]]:
    """f_tg(a) + xi (|N(a)|^2_{H2} + f_jac(a)) and its gradient.

    The seminorm gradient is analytic, the target and f_jac gradients are central
    differences. The mesh-quality term is constant for 1D linear elements and omitted.
    """
    cfg = cfg or RegistrationConfig()
    S = basis.seminorm_matrix

    def nonsmooth(a: np.ndarray) -> float:
        phi = MapCoefficients(a, basis)
        return target(phi) + cfg.xi * f_jac(phi, cfg)

    def objective(a: np.ndarray) -> float:
        return nonsmooth(a) + cfg.xi * float(a @ S @ a)

    def gradient(a: np.ndarray) -> np.ndarray:
        g = 2.0 * cfg.xi * (S @ a)
        for i in range(a.size):
            e = np.zeros_like(a)
            e[i] = cfg.fd_step
            g[i] += (nonsmooth(a + e) - nonsmooth(a - e)) / (2.0 * cfg.fd_step)
        return g

    return objective, gradient


def register_single(
    target: Target,
    basis: MapBasis,
    cfg: Optional[RegistrationConfig] = None,
    a0=None,
    check_points: Optional[np.ndarray] = None,
    label: str = "",
) -> RegistrationResult:
    """Minimize ``regularized_objective`` by BFGS from ``a0`` (identity by default)."""
    cfg = cfg or RegistrationConfig()
    a_start = np.zeros(basis.m) if a0 is None else np.asarray(a0, dtype=float).copy()
    if a_start.size != basis.m:
        raise InvalidArgumentError(f"initial guess has {a_start.size} entries, basis has {basis.m}")
    objective, gradient = regularized_objective(target, basis, cfg)

    history = [objective(a_start)]
    res = minimize(
        objective,
        a_start,
        jac=gradient,
        method="BFGS",
        callback=lambda xk: history.append(objective(xk)),
        options={"gtol": cfg.gtol, "maxiter": cfg.max_iters},
    )
    phi = MapCoefficients(res.x, basis)
    points = _composite_gauss(basis.L)[0] if check_points is None else np.concatenate(
        [_composite_gauss(basis.L)[0], np.ravel(check_points)]
    )
    if not phi.is_bijective(points):
        raise NonBijectiveMapError(
            f"registration{' ' + label if label else ''} produced min Phi' = {phi.min_jacobian(points):.3e}"
        )
    value = target(phi)
    logger.debug(
        f"registration {label}: f_tg={value:.3e} f_obj={res.fun:.3e} its={res.nit} ({res.message})"
    )
    return RegistrationResult(phi, float(value), float(res.fun), int(res.nit), history)


def nearest_unprocessed_order(params: np.ndarray, reference) -> Tuple[np.ndarray, np.ndarray]:
    """Processing order and warm-start donors.

    The first parameter is the one closest to ``reference``; each next one is the
    unprocessed parameter closest to the processed set, warm-started from its
    nearest processed neighbour (donor -1 means start from zero).
    """
    params = np.asarray(params, dtype=float)
    n = params.shape[0]
    first = int(np.argmin(np.linalg.norm(params - np.asarray(reference, dtype=float)[None, :], axis=1)))
    order = [first]
    donors = [-1]
    dist = np.linalg.norm(params - params[first][None, :], axis=1)
    nearest = np.full(n, first)
    done = np.zeros(n, dtype=bool)
    done[first] = True
    for _ in range(n - 1):
        cand = np.where(done, np.inf, dist)
        k = int(np.argmin(cand))
        order.append(k)
        donors.append(int(nearest[k]))
        done[k] = True
        d_new = np.linalg.norm(params - params[k][None, :], axis=1)
        closer = d_new < dist
        nearest = np.where(closer, k, nearest)
        dist = np.minimum(dist, d_new)
    return np.array(order), np.array(donors)


@dataclass(frozen=True, eq=False)
class MapRegressor:
    """Componentwise tensor-product Legendre least squares, or nearest neighbour."""

    params: np.ndarray
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    degree: int
    coef: Optional[np.ndarray] = None

    @property
    def method(self) -> str:
        return "nearest" if self.coef is None else "polynomial"

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def _normalize(self, mu: np.ndarray) -> np.ndarray:
        span = np.where(self.upper > self.lower, self.upper - self.lower, 1.0)
        return 2.0 * (mu - self.lower[None, :]) / span[None, :] - 1.0

    def __call__(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        single = mu.ndim == 1
        pts = np.atleast_2d(mu)
        s = self._normalize(pts)
        if self.coef is None:
            ref = self._normalize(self.params)
            idx = np.argmin(np.linalg.norm(s[:, None, :] - ref[None, :, :], axis=2), axis=1)
            out = self.values[idx]
        else:
            V = legendre.legvander2d(s[:, 0], s[:, 1], [self.degree, self.degree])
            out = V @ self.coef
        return out[0] if single else out


def map_regress(
    params,
    values,
    bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
    max_degree: int = 5,
) -> MapRegressor:
    params = np.atleast_2d(np.asarray(params, dtype=float))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if params.shape[0] < 1 or params.shape[0] != values.shape[0]:
        raise InvalidArgumentError("need at least one (mu, a) training pair with matching sizes")
    if bounds is None:
        lower, upper = params.min(axis=0), params.max(axis=0)
    else:
        lower, upper = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    distinct = [np.unique(params[:, d]).size for d in range(2)]
    degree = min(max_degree, distinct[0] - 1, distinct[1] - 1)
    if degree < 1 or params.shape[0] < (degree + 1) ** 2:
        logger.debug(f"map regressor: nearest neighbour on {params.shape[0]} pairs")
        return MapRegressor(params, values, lower, upper, max(degree, 0))
    reg = MapRegressor(params, values, lower, upper, degree)
    s = reg._normalize(params)
    V = legendre.legvander2d(s[:, 0], s[:, 1], [degree, degree])
    coef, *_ = np.linalg.lstsq(V, values, rcond=None)
    logger.debug(f"map regressor: degree {degree} on {params.shape[0]} pairs")
    return MapRegressor(params, values, lower, upper, degree, coef)


def compress_maps(raw: np.ndarray, tol_pod: float) -> np.ndarray:
    """Euclidean POD modes (m_hf x m) of the map coefficients; zero data keeps e_1."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if not np.any(raw):
        modes = np.zeros((raw.shape[1], 1))
        modes[0, 0] = 1.0
        return modes
    return pod(raw.T, tol_pod).modes


@dataclass
class ParametricRegistration:
    params: np.ndarray
    basis: MapBasis  # compressed
    coefficients: np.ndarray  # (n, m) in the compressed basis
    raw_coefficients: np.ndarray  # (n, m_hf)
    targets: np.ndarray
    regressor: MapRegressor
    accepted: np.ndarray  # bool mask
    failures: List[int] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.basis.m

    def map_at(self, i: int) -> MapCoefficients:
        return MapCoefficients(self.coefficients[i], self.basis)

    def map_for(self, mu) -> MapCoefficients:
        return MapCoefficients(self.regressor(np.asarray(mu, dtype=float)), self.basis)


def register_parametric(
    params,
    targets: Sequence[Target],
    basis: MapBasis,
    cfg: Optional[RegistrationConfig] = None,
    reference=None,
    warm_starts: Optional[np.ndarray] = None,
    jobs: int = 1,
    bounds=None,
    check_points: Optional[np.ndarray] = None,
) -> ParametricRegistration:
    """Register every training parameter, compress the maps by POD, fit the regressor.

    Without ``warm_starts`` parameters are processed sequentially in nearest-unprocessed
    order; with them (full-space coefficients, one row per parameter) they are
    independent and run on ``jobs`` workers.
    """
    cfg = cfg or RegistrationConfig()
    params = np.atleast_2d(np.asarray(params, dtype=float))
    n = params.shape[0]
    if n == 0 or len(targets) != n:
        raise InvalidArgumentError("need one target per training parameter")
    full = basis.full()
    raw = np.zeros((n, full.m))
    values = np.full(n, np.nan)
    accepted = np.zeros(n, dtype=bool)
    failures: List[int] = []

    def run(i: int, a0) -> Optional[RegistrationResult]:
        try:
            return register_single(targets[i], full, cfg, a0, check_points, label=f"mu={tuple(np.round(params[i], 4))}")
        except NonBijectiveMapError as exc:
            logger.warning(f"skipping parameter {i}: {exc}")
            return None

    if warm_starts is None:
        ref = params.mean(axis=0) if reference is None else reference
        order, donors = nearest_unprocessed_order(params, ref)
        for i, donor in zip(order, donors):
            a0 = raw[donor] if donor >= 0 and accepted[donor] else np.zeros(full.m)
            result = run(int(i), a0)
            if result is None:
                failures.append(int(i))
                continue
            raw[i], values[i], accepted[i] = result.coeffs.a, result.target_value, True
    else:
        warm = np.asarray(warm_starts, dtype=float)
        if warm.shape != (n, full.m):
            raise InvalidArgumentError(f"warm starts must have shape {(n, full.m)}, got {warm.shape}")
        results = parallel_map(lambda i: run(i, warm[i]), range(n), jobs)
        for i, result in enumerate(results):
            if result is None:
                failures.append(i)
                continue
            raw[i], values[i], accepted[i] = result.coeffs.a, result.target_value, True

    if len(failures) > cfg.max_failure_fraction * n:
        raise RegistrationFailedError(f"{len(failures)} of {n} registrations failed", failures)

    modes = compress_maps(raw[accepted], cfg.tol_pod)
    compressed = basis.full().compress(modes)
    coefficients = raw @ modes
    regressor = map_regress(params[accepted], coefficients[accepted], bounds)
    logger.info(f"registered {accepted.sum()}/{n} parameters; map space compressed to m={modes.shape[1]}")
    return ParametricRegistration(params, compressed, coefficients, raw, values, regressor, accepted, failures)


def shock_targets(shocks: Sequence[float], x_ref: float) -> List[Target]:
    return [functools.partial(target_shock, x_ref=float(x_ref), x_mu=float(xs)) for xs in shocks]


@dataclass
class TemplateRegistration:
    space: TemplateSpace
    registration: ParametricRegistration
    selected: List[int]
    converged: bool


def greedy_template_registration(
    params,
    sensors: Sequence[StateField],
    initial: int,
    basis: MapBasis,
    mesh: Mesh1D,
    cfg: Optional[RegistrationConfig] = None,
    anchors: Optional[Sequence[Tuple[float, float]]] = None,
    jobs: int = 1,
    bounds=None,
) -> TemplateRegistration:
    """Grow the template space with the worst-registered mapped sensor until max f* < tol."""
    cfg = cfg or RegistrationConfig()
    params = np.atleast_2d(np.asarray(params, dtype=float))
    n = params.shape[0]
    selected = [int(initial)]
    samples = [sensors[initial].evaluate(mesh.quad_points.ravel())[0].reshape(mesh.quad_points.shape)]
    warm = None  # first pass: nearest-neighbour order from the template parameter
    converged = False
    reg = None
    space = None
    for _ in range(cfg.max_templates):
        space = TemplateSpace.from_values(mesh, samples)
        targets = [
            functools.partial(
                target_template,
                sensor=sensors[i],
                space=space,
                anchor=None if anchors is None else anchors[i],
            )
            for i in range(n)
        ]
        reg = register_parametric(
            params, targets, basis, cfg, reference=params[initial], warm_starts=warm, jobs=jobs, bounds=bounds
        )
        worst = int(np.nanargmax(reg.targets))
        logger.debug(f"template greedy: n={space.n} max f*={reg.targets[worst]:.3e} at {worst}")
        if reg.targets[worst] < cfg.tol_greedy:
            converged = True
            break
        if worst in selected:
            logger.warning("template greedy re-selected a template parameter; stopping")
            break
        selected.append(worst)
        samples.append(mapped_sensor_values(sensors[worst], MapCoefficients(reg.raw_coefficients[worst], basis.full()), mesh))
        warm = reg.raw_coefficients
    return TemplateRegistration(space, reg, selected, converged)
