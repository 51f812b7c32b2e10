"""Quasi-1D Euler nozzle flow discretized with DG.

Features:
- constitutive relations, nozzle area law, free-stream state from boundary data
- Rusanov convective flux, SIP diffusive flux with dilation-based viscosity
- characteristic subsonic inlet (p_tot, T_tot) / outlet (p0) ghost states
- residual + sparse Jacobian (viscosity lagged), optionally weighted per element/facet
- pseudo-transient continuation with switched-evolution-relaxation CFL growth,
  density/pressure-limited updates and a viscosity-continuation fallback
"""

import functools
import logging
from dataclasses import dataclass, field, replace
from typing import ClassVar, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .errors import (
    InconsistentDataError,
    InvalidArgumentError,
    InvalidStateError,
    PtcNonConvergenceError,
    StateEvaluationError,
)
from .mesh1d import Mesh1D, StateField

logger = logging.getLogger(__name__)

N_VARS = 3
BOUNDARY_FD_STEP = 1e-7
VISCOSITY_CONTINUATION = (10.0, 3.0)


@dataclass(frozen=True)
class NozzleProblem:
    """Converging-diverging duct A(x) = 3 + 4(A0 - 3)(x/L)(1 - x/L); mu = (A0, p0)."""

    L: float = 10.0
    A0: float = 1.5
    p0: float = 0.7
    p_tot: float = 0.95
    T_tot: float = 0.95
    gamma: float = 1.4
    c_nu: float = 0.1
    gamma_ip: Optional[float] = None
    isentropic_totals: bool = True

    A0_RANGE: ClassVar[Tuple[float, float]] = (0.5, 1.5)
    P0_RANGE: ClassVar[Tuple[float, float]] = (0.7, 0.85)

    @property
    def mu(self) -> Tuple[float, float]:
        return (self.A0, self.p0)

    @property
    def R(self) -> float:
        return self.gamma - 1.0

    @property
    def total_pressure_exponent(self) -> float:
        return total_pressure_exponent(self.gamma, self.isentropic_totals)

    @property
    def total_enthalpy(self) -> float:
        """Exact H_tot = c_p T_tot carried by the inlet data."""
        return self.gamma * self.R / (self.gamma - 1.0) * self.T_tot

    def penalty(self, degree: int) -> float:
        return 10.0 * degree**2 if self.gamma_ip is None else float(self.gamma_ip)

    def with_parameters(self, mu: Sequence[float]) -> "NozzleProblem":
        return replace(self, A0=float(mu[0]), p0=float(mu[1]))

    def in_range(self) -> bool:
        lo, hi = self.A0_RANGE
        plo, phi = self.P0_RANGE
        return lo <= self.A0 <= hi and plo <= self.p0 <= phi

    def area(self, x) -> np.ndarray:
        return nozzle_area(x, self.A0, self.L)

    def area_derivative(self, x) -> np.ndarray:
        s = np.asarray(x, dtype=float) / self.L
        return 4.0 * (self.A0 - 3.0) * (1.0 - 2.0 * s) / self.L


def total_pressure_exponent(gamma: float, isentropic: bool = True) -> float:
    """Exponent e in p_tot = p (1 + (gamma-1)/2 Ma^2)^e."""
    return gamma / (gamma - 1.0) if isentropic else (gamma - 1.0) / gamma


@dataclass
class PtcConfig:
    """PTC controls.

    The CFL follows switched evolution relaxation after undamped updates, clipped to
    [cfl0, cfl_max] (a CFL below cfl0 climbs back by ``cfl_recovery`` per step).
    Damped updates shrink it with the accepted step, rejected ones by ``cfl_cut``,
    never below ``cfl_min``. An update may change density and pressure by at most
    ``max_update`` (relative) anywhere. ``viscosity_continuation`` lists the c_nu
    factors tried, largest first, after a failed direct solve.
    """

    cfl0: float = 1.0
    residual_tol: float = 1e-9
    max_iters: int = 300
    cfl_max: float = 1e8
    cfl_min: float = 1e-4
    cfl_cut: float = 0.1
    cfl_recovery: float = 1.5
    max_halvings: int = 12
    max_update: float = 0.2
    viscosity_continuation: Tuple[float, ...] = VISCOSITY_CONTINUATION

    def __post_init__(self):
        if not self.cfl0 > 0:
            raise InvalidArgumentError(f"cfl0 must be positive, got {self.cfl0}")
        if not self.residual_tol > 0:
            raise InvalidArgumentError(f"residual_tol must be positive, got {self.residual_tol}")
        if not 0 < self.cfl_min <= self.cfl0 <= self.cfl_max:
            raise InvalidArgumentError(
                f"need 0 < cfl_min <= cfl0 <= cfl_max, got {self.cfl_min}, {self.cfl0}, {self.cfl_max}"
            )
        if not 0 < self.cfl_cut < 1:
            raise InvalidArgumentError(f"cfl_cut must lie in (0, 1), got {self.cfl_cut}")
        if not self.cfl_recovery > 1:
            raise InvalidArgumentError(f"cfl_recovery must exceed 1, got {self.cfl_recovery}")
        if not self.max_update > 0:
            raise InvalidArgumentError(f"max_update must be positive, got {self.max_update}")
        if any(not f > 1 for f in self.viscosity_continuation):
            raise InvalidArgumentError("viscosity continuation factors must exceed 1")
        self.viscosity_continuation = tuple(sorted(self.viscosity_continuation, reverse=True))

    def next_cfl(self, cfl: float, step: float, ratio: float) -> float:
        """CFL after an update of relative size ``step`` that divided |R| by ``ratio``."""
        if step < 1.0:
            return max(self.cfl_min, cfl * max(step, self.cfl_cut))
        floor = min(self.cfl0, cfl * self.cfl_recovery)
        return float(np.clip(cfl * ratio, floor, self.cfl_max))


@dataclass
class PtcRecord:
    iteration: int
    cfl: float
    residual_norm: float

    def as_line(self) -> str:
        return f"{self.iteration}, {self.cfl:.6e}, {self.residual_norm:.6e}"


@dataclass
class PtcResult:
    state: StateField
    iterations: int
    history: List[PtcRecord] = field(default_factory=list)


# --- constitutive relations -------------------------------------------------


def pressure(w, gamma: float = 1.4) -> np.ndarray:
    """p = (gamma-1)(E - rho u^2 / 2) for unscaled conserved w = (rho, rho u, E)."""
    w = np.asarray(w, dtype=float)
    rho = w[0]
    if np.any(~(rho > 0)):
        raise InvalidStateError("nonpositive density")
    return (gamma - 1.0) * (w[2] - 0.5 * w[1] * w[1] / rho)


def derived_quantities(w, gamma: float = 1.4, isentropic_totals: bool = True) -> dict:
    w = np.asarray(w, dtype=float)
    p = pressure(w, gamma)
    if np.any(~(p > 0)):
        raise InvalidStateError("nonpositive pressure")
    rho = w[0]
    u = w[1] / rho
    a = np.sqrt(gamma * p / rho)
    ma = np.abs(u) / a
    R = gamma - 1.0
    T = p / (R * rho)
    stretch = 1.0 + 0.5 * (gamma - 1.0) * ma * ma
    return {
        "p": p,
        "u": u,
        "a": a,
        "Ma": ma,
        "T": T,
        "T_tot": T * stretch,
        "p_tot": p * stretch ** total_pressure_exponent(gamma, isentropic_totals),
        "H_tot": (w[2] + p) / rho,
    }


def nozzle_area(x, A0: float, L: float = 10.0) -> np.ndarray:
    s = np.asarray(x, dtype=float) / L
    return 3.0 + 4.0 * (A0 - 3.0) * s * (1.0 - s)


def freestream_state(
    p_tot: float,
    T_tot: float,
    p0: float,
    gamma: float = 1.4,
    isentropic_totals: bool = True,
) -> np.ndarray:
    """Unscaled (rho, rho u, E) with static pressure p0 and the given totals."""
    if not (0 < p0 <= p_tot):
        raise InconsistentDataError(f"need 0 < p0 <= p_tot, got p0={p0}, p_tot={p_tot}")
    exponent = total_pressure_exponent(gamma, isentropic_totals)

    def mismatch(ma: float) -> float:
        return p0 * (1.0 + 0.5 * (gamma - 1.0) * ma * ma) ** exponent - p_tot

    if mismatch(0.0) >= 0.0:
        ma = 0.0
    elif mismatch(1.0) < 0.0:
        raise InconsistentDataError(
            f"no subsonic Mach number matches p_tot/p0 = {p_tot / p0:.4f} (exponent {exponent:.4f})"
        )
    else:
        ma = brentq(mismatch, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    R = gamma - 1.0
    T = T_tot / (1.0 + 0.5 * (gamma - 1.0) * ma * ma)
    a = np.sqrt(gamma * R * T)
    u = ma * a
    rho = p0 / (R * T)
    return np.array([rho, rho * u, p0 / (gamma - 1.0) + 0.5 * rho * u * u])


def freestream_field(mesh: Mesh1D, problem: NozzleProblem) -> StateField:
    w = freestream_state(problem.p_tot, problem.T_tot, problem.p0, problem.gamma, problem.isentropic_totals)
    return StateField.from_function(mesh, lambda x: problem.area(x)[None, :] * w[:, None])


def mach_field(q: StateField, problem: NozzleProblem) -> StateField:
    """Mach number at the Lagrange nodes as a scalar DG field (area scaling cancels)."""
    vals = q.values
    ma = derived_quantities(vals, problem.gamma, problem.isentropic_totals)["Ma"]
    return StateField.from_values(q.mesh, ma)


# --- fluxes -----------------------------------------------------------------


def _euler_flux(w: np.ndarray, gamma: float):
    rho, m, E = w
    u = m / rho
    p = (gamma - 1.0) * (E - 0.5 * m * u)
    return np.stack([m, m * u + p, u * (E + p)]), p, u


def _flux_jacobian(w: np.ndarray, gamma: float) -> np.ndarray:
    rho, m, E = w
    u = m / rho
    g1 = gamma - 1.0
    e = E / rho
    zero = np.zeros_like(u)
    one = np.ones_like(u)
    return np.array(
        [
            [zero, one, zero],
            [0.5 * (gamma - 3.0) * u * u, (3.0 - gamma) * u, g1 * one],
            [u * (g1 * u * u - gamma * e), gamma * e - 1.5 * g1 * u * u, gamma * u],
        ]
    )


def _pressure_gradient(w: np.ndarray, gamma: float) -> np.ndarray:
    u = w[1] / w[0]
    g1 = gamma - 1.0
    return np.array([0.5 * g1 * u * u, -g1 * u, g1 * np.ones_like(u)])


def _wave_speed(w: np.ndarray, gamma: float) -> np.ndarray:
    rho = w[0]
    u = w[1] / rho
    p = (gamma - 1.0) * (w[2] - 0.5 * w[1] * u)
    return np.abs(u) + np.sqrt(gamma * p / rho)


def _wave_speed_gradient(w: np.ndarray, gamma: float) -> np.ndarray:
    rho = w[0]
    u = w[1] / rho
    p = (gamma - 1.0) * (w[2] - 0.5 * w[1] * u)
    a = np.sqrt(gamma * p / rho)
    sign = np.sign(u)
    du = np.array([-u / rho, 1.0 / rho, np.zeros_like(u)])
    dp = _pressure_gradient(w, gamma)
    drho = np.array([np.ones_like(u), np.zeros_like(u), np.zeros_like(u)])
    da = gamma / (2.0 * a) * (dp / rho - p / (rho * rho) * drho)
    return sign * du + da


def rusanov_flux(q_in, q_out, n: float, area, gamma: float = 1.4) -> np.ndarray:
    """H(q_in, q_out, n) = (F(q_in) + F(q_out)) n / 2 - lambda (q_out - q_in) / 2."""
    q_in = np.asarray(q_in, dtype=float)
    q_out = np.asarray(q_out, dtype=float)
    area = np.asarray(area, dtype=float)
    w_in, w_out = q_in / area, q_out / area
    f_in = _euler_flux(w_in, gamma)[0] * area
    f_out = _euler_flux(w_out, gamma)[0] * area
    lam = np.maximum(_wave_speed(w_in, gamma), _wave_speed(w_out, gamma))
    return 0.5 * (f_in + f_out) * n - 0.5 * lam * (q_out - q_in)


def _rusanov_with_jacobian(qa: np.ndarray, qb: np.ndarray, area: np.ndarray, gamma: float):
    """Flux from state ``qa`` (left) to ``qb`` (right) and its derivatives, shapes (3, n)."""
    wa, wb = qa / area, qb / area
    fa = _euler_flux(wa, gamma)[0] * area
    fb = _euler_flux(wb, gamma)[0] * area
    sa, sb = _wave_speed(wa, gamma), _wave_speed(wb, gamma)
    lam = np.maximum(sa, sb)
    jump = qb - qa
    flux = 0.5 * (fa + fb) - 0.5 * lam * jump
    eye = np.eye(N_VARS)[:, :, None]
    dlam_a = np.where(sa >= sb, 1.0, 0.0) * _wave_speed_gradient(wa, gamma) / area
    dlam_b = np.where(sa >= sb, 0.0, 1.0) * _wave_speed_gradient(wb, gamma) / area
    da = 0.5 * _flux_jacobian(wa, gamma) + 0.5 * lam * eye - 0.5 * jump[:, None, :] * dlam_a[None, :, :]
    db = 0.5 * _flux_jacobian(wb, gamma) - 0.5 * lam * eye - 0.5 * jump[:, None, :] * dlam_b[None, :, :]
    return flux, da, db


# --- boundary states ----------------------------------------------------------


def inlet_ghost_state(w_int: np.ndarray, problem: NozzleProblem) -> np.ndarray:
    """Subsonic inflow: outgoing invariant from the interior, totals imposed."""
    gamma = problem.gamma
    g1 = gamma - 1.0
    rho, m, E = w_int
    u = m / rho
    p = g1 * (E - 0.5 * m * u)
    a = np.sqrt(gamma * p / rho)
    riemann = u - 2.0 * a / g1
    c2 = 1.0 / g1 + 2.0 / (g1 * g1)
    c1 = 2.0 * riemann / g1
    c0 = 0.5 * riemann * riemann - problem.total_enthalpy
    disc = c1 * c1 - 4.0 * c2 * c0
    if not np.isfinite(disc):
        raise InvalidStateError("non-finite inlet invariant")
    # an outgoing wave too strong for the imposed enthalpy gets the closest state
    a_b = (-c1 + np.sqrt(max(disc, 0.0))) / (2.0 * c2)
    if not a_b > 0:
        raise InvalidStateError("inlet invariant admits no positive sound speed")
    u_b = riemann + 2.0 * a_b / g1
    ma = u_b / a_b
    T_b = a_b * a_b / (gamma * problem.R)
    p_b = problem.p_tot / (1.0 + 0.5 * g1 * ma * ma) ** problem.total_pressure_exponent
    rho_b = p_b / (problem.R * T_b)
    return np.array([rho_b, rho_b * u_b, p_b / g1 + 0.5 * rho_b * u_b * u_b])


def outlet_ghost_state(w_int: np.ndarray, problem: NozzleProblem) -> np.ndarray:
    """Subsonic outflow: incoming invariant and entropy from the interior, p0 imposed."""
    gamma = problem.gamma
    g1 = gamma - 1.0
    rho, m, E = w_int
    u = m / rho
    p = g1 * (E - 0.5 * m * u)
    a = np.sqrt(gamma * p / rho)
    riemann = u + 2.0 * a / g1
    entropy = p / rho**gamma
    rho_b = (problem.p0 / entropy) ** (1.0 / gamma)
    a_b = np.sqrt(gamma * problem.p0 / rho_b)
    u_b = riemann - 2.0 * a_b / g1
    return np.array([rho_b, rho_b * u_b, problem.p0 / g1 + 0.5 * rho_b * u_b * u_b])


# --- assembly ----------------------------------------------------------------


@dataclass
class HfResidual:
    vector: np.ndarray
    viscosity: np.ndarray
    jacobian: Optional[sp.csr_matrix] = None

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


class NozzleDiscretization:
    """DG residual of the nozzle problem on one (possibly deformed) mesh.

    Coefficients are handled as arrays U of shape (3, N_e, n_lp). Facet j sits at
    node j; its left neighbour is element j-1 and its right neighbour element j.
    """

    def __init__(self, mesh: Mesh1D, problem: NozzleProblem):
        self.mesh = mesh
        self.problem = problem
        self.gamma = problem.gamma
        self.n_elements = mesh.n_elements
        self.n_lp = mesh.n_lp
        self.ref = mesh.ref
        self.sigma0 = problem.penalty(mesh.degree)

    @functools.cached_property
    def area_q(self) -> np.ndarray:
        return self.problem.area(self.mesh.quad_points)

    @functools.cached_property
    def darea_q(self) -> np.ndarray:
        return self.problem.area_derivative(self.mesh.quad_points)

    @functools.cached_property
    def area_nodes(self) -> np.ndarray:
        return self.problem.area(self.mesh.nodes)

    @property
    def size(self) -> int:
        return N_VARS * self.n_elements * self.n_lp

    def _check(self, w: np.ndarray, elems: np.ndarray) -> None:
        rho = w[0]
        p = (self.gamma - 1.0) * (w[2] - 0.5 * w[1] * w[1] / np.where(rho > 0, rho, 1.0))
        ok = np.isfinite(w).all(axis=0) & (rho > 0) & (p > 0)
        if ok.ndim > 1:
            ok = ok.all(axis=tuple(range(1, ok.ndim)))
        if not ok.all():
            raise StateEvaluationError(int(elems[np.argmin(ok)]))

    def density_pressure(self, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Unscaled density and pressure at the quadrature points and both element traces."""
        U = np.asarray(U, dtype=float).reshape(N_VARS, self.n_elements, self.n_lp)
        Q = np.concatenate(
            [
                np.einsum("vka,qa->vkq", U, self.ref.phi),
                (U @ self.ref.phi_left)[:, :, None],
                (U @ self.ref.phi_right)[:, :, None],
            ],
            axis=2,
        )
        A = np.concatenate([self.area_q, self.area_nodes[:-1, None], self.area_nodes[1:, None]], axis=1)
        W = Q / A[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            p = (self.gamma - 1.0) * (W[2] - 0.5 * W[1] * W[1] / W[0])
        return W[0], p

    def viscosity(self, U: np.ndarray, elems: Optional[np.ndarray] = None) -> np.ndarray:
        """nu_k = c_nu (h_k/p)^2 int_{D_k} (-du/dx)_+ dx on ``elems`` (all by default)."""
        elems = np.arange(self.n_elements) if elems is None else np.asarray(elems, dtype=int)
        h = self.mesh.h[elems]
        Ue = U[:, elems, :]
        Q = np.einsum("vka,qa->vkq", Ue, self.ref.phi)
        Qx = np.einsum("vka,qa->vkq", Ue, self.ref.dphi) / h[None, :, None]
        self._check(Q / self.area_q[elems][None], elems)
        return _dilation_viscosity(Q, Qx, h, self.ref.weights, self.mesh.degree, self.problem.c_nu)

    def _element_terms(self, U, nu, elems, jacobian: bool):
        ref = self.ref
        h = self.mesh.h[elems]
        Ue = U[:, elems, :]
        Q = np.einsum("vka,qa->vkq", Ue, ref.phi)
        Qx = np.einsum("vka,qa->vkq", Ue, ref.dphi) / h[None, :, None]
        A = self.area_q[elems][None]
        dA = self.darea_q[elems][None]
        W = Q / A
        self._check(W, elems)
        f, p, _ = _euler_flux(W, self.gamma)
        S = np.zeros_like(f)
        S[1] = p * dA[0]
        nu_e = nu[elems]
        grad_part = -A * f + nu_e[None, :, None] * Qx
        R = np.einsum("q,vkq,qa->vka", ref.weights, grad_part, ref.dphi)
        R -= np.einsum("q,vkq,qa->vka", ref.weights, S * h[None, :, None], ref.phi)
        if not jacobian:
            return R, None
        dF = _flux_jacobian(W, self.gamma)
        dS = np.zeros_like(dF)
        dS[1] = (dA[0] / A[0])[None] * _pressure_gradient(W, self.gamma)
        blocks = -np.einsum("q,vmkq,qb,qa->kvamb", ref.weights, dF, ref.phi, ref.dphi)
        blocks -= np.einsum("q,vmkq,qb,qa->kvamb", ref.weights, dS * h[None, None, :, None], ref.phi, ref.phi)
        visc = (nu_e / h)[:, None, None] * ref.stiffness[None, :, :]
        for v in range(N_VARS):
            blocks[:, v, :, v, :] += visc
        return R, blocks

    def _boundary_flux(self, q_int: np.ndarray, inlet: bool) -> np.ndarray:
        if inlet:
            area = self.area_nodes[0]
            w = q_int / area
            self._check(w[:, None], np.array([0]))
            ghost = inlet_ghost_state(w, self.problem) * area
            flux, _, _ = _rusanov_with_jacobian(ghost[:, None], q_int[:, None], np.array([area]), self.gamma)
        else:
            area = self.area_nodes[-1]
            w = q_int / area
            self._check(w[:, None], np.array([self.n_elements - 1]))
            ghost = outlet_ghost_state(w, self.problem) * area
            flux, _, _ = _rusanov_with_jacobian(q_int[:, None], ghost[:, None], np.array([area]), self.gamma)
        return flux[:, 0]

    def _boundary_flux_jacobian(self, q_int: np.ndarray, inlet: bool) -> np.ndarray:
        jac = np.zeros((N_VARS, N_VARS))
        for m in range(N_VARS):
            step = BOUNDARY_FD_STEP * (1.0 + abs(q_int[m]))
            e = np.zeros(N_VARS)
            e[m] = step
            jac[:, m] = (self._boundary_flux(q_int + e, inlet) - self._boundary_flux(q_int - e, inlet)) / (2 * step)
        return jac

    def _facet_terms(self, U, nu, facets, jacobian: bool):
        """Contributions (3, nf, 2, n_lp) to the left/right neighbours of each facet."""
        ref = self.ref
        N = self.n_elements
        nlp = self.n_lp
        nf = facets.size
        out = np.zeros((N_VARS, nf, 2, nlp))
        blocks = np.zeros((nf, 2, N_VARS, nlp, 2, N_VARS, nlp)) if jacobian else None

        inner = np.nonzero((facets > 0) & (facets < N))[0]
        if inner.size:
            j = facets[inner]
            left, right = j - 1, j
            qL = np.einsum("vka,a->vk", U[:, left, :], ref.phi_right)
            qR = np.einsum("vka,a->vk", U[:, right, :], ref.phi_left)
            area = self.area_nodes[j]
            self._check(qL / area, left)
            self._check(qR / area, right)
            flux, dqa, dqb = _rusanov_with_jacobian(qL, qR, area, self.gamma)

            hL, hR = self.mesh.h[left], self.mesh.h[right]
            nuL, nuR = nu[left], nu[right]
            sigma = self.sigma0 * np.maximum(nuL, nuR) * (hL + hR) / (2.0 * hL * hR)
            jv = np.stack([np.broadcast_to(ref.phi_right, (inner.size, nlp)), -np.broadcast_to(ref.phi_left, (inner.size, nlp))], axis=1)
            gv = np.stack(
                [0.5 * (nuL / hL)[:, None] * ref.dphi_right[None, :], 0.5 * (nuR / hR)[:, None] * ref.dphi_left[None, :]],
                axis=1,
            )
            Ulr = np.stack([U[:, left, :], U[:, right, :]], axis=2)  # (3, nf, 2, nlp)
            jump = np.einsum("fsa,vfsa->vf", jv, Ulr)
            avg = np.einsum("fsa,vfsa->vf", gv, Ulr)

            conv = np.zeros((N_VARS, inner.size, 2, nlp))
            conv[:, :, 0, :] = flux[:, :, None] * ref.phi_right[None, None, :]
            conv[:, :, 1, :] = -flux[:, :, None] * ref.phi_left[None, None, :]
            visc = (
                -avg[:, :, None, None] * jv[None]
                - jump[:, :, None, None] * gv[None]
                + (sigma[None, :, None, None] * jump[:, :, None, None]) * jv[None]
            )
            out[:, inner] = conv + visc

            if jacobian:
                test = np.stack([np.broadcast_to(ref.phi_right, (inner.size, nlp)), -np.broadcast_to(ref.phi_left, (inner.size, nlp))], axis=1)
                trace = np.stack([np.broadcast_to(ref.phi_right, (inner.size, nlp)), np.broadcast_to(ref.phi_left, (inner.size, nlp))], axis=1)
                dflux = np.stack([dqa, dqb], axis=0)  # (2, 3, 3, nf)
                conv_blocks = np.einsum("fxa,yvmf,fyb->fxvaymb", test, dflux, trace)
                kernel = (
                    -np.einsum("fxa,fyb->fxayb", jv, gv)
                    - np.einsum("fxa,fyb->fxayb", gv, jv)
                    + sigma[:, None, None, None, None] * np.einsum("fxa,fyb->fxayb", jv, jv)
                )
                fb = conv_blocks
                for v in range(N_VARS):
                    fb[:, :, v, :, :, v, :] += kernel
                blocks[inner] = fb

        for pos in np.nonzero(facets == 0)[0]:
            q_int = U[:, 0, :] @ ref.phi_left
            flux = self._boundary_flux(q_int, inlet=True)
            out[:, pos, 1, :] = -flux[:, None] * ref.phi_left[None, :]
            if jacobian:
                d = self._boundary_flux_jacobian(q_int, inlet=True)
                blocks[pos, 1, :, :, 1, :, :] = -np.einsum("vm,a,b->vamb", d, ref.phi_left, ref.phi_left)
        for pos in np.nonzero(facets == N)[0]:
            q_int = U[:, N - 1, :] @ ref.phi_right
            flux = self._boundary_flux(q_int, inlet=False)
            out[:, pos, 0, :] = flux[:, None] * ref.phi_right[None, :]
            if jacobian:
                d = self._boundary_flux_jacobian(q_int, inlet=False)
                blocks[pos, 0, :, :, 0, :, :] = np.einsum("vm,a,b->vamb", d, ref.phi_right, ref.phi_right)
        return out, blocks

    def _needed_elements(self, elems: np.ndarray, facets: np.ndarray) -> np.ndarray:
        N = self.n_elements
        neighbours = np.concatenate([facets - 1, facets])
        neighbours = neighbours[(neighbours >= 0) & (neighbours < N)]
        return np.unique(np.concatenate([elems, neighbours]).astype(int))

    def contributions(self, U: np.ndarray, nu: Optional[np.ndarray] = None):
        """Unweighted elemental (3, N_e, n_lp) and facet (3, N_f, 2, n_lp) contributions."""
        U = np.asarray(U, dtype=float).reshape(N_VARS, self.n_elements, self.n_lp)
        elems = np.arange(self.n_elements)
        facets = np.arange(self.mesh.n_facets)
        if nu is None:
            nu = self.viscosity(U)
        elem, _ = self._element_terms(U, nu, elems, False)
        facet, _ = self._facet_terms(U, nu, facets, False)
        return elem, facet, nu

    def assemble(
        self,
        U: np.ndarray,
        nu: Optional[np.ndarray] = None,
        elem_weights: Optional[np.ndarray] = None,
        facet_weights: Optional[np.ndarray] = None,
        jacobian: bool = False,
    ) -> HfResidual:
        """Weighted residual sum_k rho_k r_k^e + sum_j rho_j r_j^f (weights default to 1).

        Only elements and facets with nonzero weight are visited; the viscosity is
        evaluated on the elements they touch unless ``nu`` is given (then it is frozen).
        """
        N, nlp = self.n_elements, self.n_lp
        U = np.asarray(U, dtype=float).reshape(N_VARS, N, nlp)
        ew = np.ones(N) if elem_weights is None else np.asarray(elem_weights, dtype=float)
        fw = np.ones(self.mesh.n_facets) if facet_weights is None else np.asarray(facet_weights, dtype=float)
        elems = np.nonzero(ew)[0]
        facets = np.nonzero(fw)[0]

        if nu is None:
            nu_full = np.zeros(N)
            needed = self._needed_elements(elems, facets)
            if needed.size:
                nu_full[needed] = self.viscosity(U, needed)
        else:
            nu_full = np.asarray(nu, dtype=float)

        R = np.zeros((N_VARS, N, nlp))
        e_terms, e_blocks = self._element_terms(U, nu_full, elems, jacobian)
        R[:, elems, :] += ew[elems][None, :, None] * e_terms
        f_terms, f_blocks = self._facet_terms(U, nu_full, facets, jacobian)
        f_terms = f_terms * fw[facets][None, :, None, None]
        has_left = facets > 0
        has_right = facets < N
        np.add.at(R, (slice(None), facets[has_left] - 1), f_terms[:, has_left, 0, :])
        np.add.at(R, (slice(None), facets[has_right]), f_terms[:, has_right, 1, :])

        J = None
        if jacobian:
            J = self._sparse_jacobian(elems, ew[elems] * 1.0, e_blocks, facets, fw[facets], f_blocks)
        return HfResidual(R.ravel(), nu_full, J)

    def _dof_index(self, elem: np.ndarray) -> np.ndarray:
        """Global indices (len(elem), 3, n_lp) of the dofs of ``elem``."""
        N, nlp = self.n_elements, self.n_lp
        v = np.arange(N_VARS)[None, :, None]
        a = np.arange(nlp)[None, None, :]
        return v * N * nlp + np.asarray(elem)[:, None, None] * nlp + a

    def _sparse_jacobian(self, elems, ew, e_blocks, facets, fw, f_blocks) -> sp.csr_matrix:
        N, nlp = self.n_elements, self.n_lp
        rows, cols, vals = [], [], []
        idx = self._dof_index(elems)
        rows.append(np.broadcast_to(idx[:, :, :, None, None], e_blocks.shape).ravel())
        cols.append(np.broadcast_to(idx[:, None, None, :, :], e_blocks.shape).ravel())
        vals.append((ew[:, None, None, None, None] * e_blocks).ravel())
        sides = [np.clip(facets - 1, 0, N - 1), np.clip(facets, 0, N - 1)]
        valid = [facets > 0, facets < N]
        for x in range(2):
            for y in range(2):
                mask = valid[x] & valid[y]
                if not mask.any():
                    continue
                block = f_blocks[mask, x, :, :, y, :, :] * fw[mask][:, None, None, None, None]
                ri = self._dof_index(sides[x][mask])
                ci = self._dof_index(sides[y][mask])
                rows.append(np.broadcast_to(ri[:, :, :, None, None], block.shape).ravel())
                cols.append(np.broadcast_to(ci[:, None, None, :, :], block.shape).ravel())
                vals.append(block.ravel())
        size = self.size
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        ).tocsr()

    def wave_speed_max(self, U: np.ndarray) -> np.ndarray:
        Q = np.einsum("vka,qa->vkq", U, self.ref.phi)
        W = Q / self.area_q[None]
        return _wave_speed(W, self.gamma).max(axis=1)

    def pseudo_time_matrix(self, U: np.ndarray, cfl: float) -> sp.csr_matrix:
        """Block-diagonal M_k / dt_k with dt_k = cfl h_k / lambda_k."""
        lam = self.wave_speed_max(U)
        # M_k = h_k M_ref, so h_k cancels against dt_k
        per_var = sp.kron(sp.diags(lam / cfl), sp.csr_matrix(self.ref.mass))
        return sp.kron(sp.identity(N_VARS), per_var).tocsr()


def hf_residual(
    q: StateField,
    problem: NozzleProblem,
    jacobian: bool = False,
    viscosity: Optional[np.ndarray] = None,
) -> HfResidual:
    """Full DG residual of ``q`` on ``q.mesh`` (optionally with the lagged-viscosity Jacobian)."""
    disc = NozzleDiscretization(q.mesh, problem)
    return disc.assemble(q.values, nu=viscosity, jacobian=jacobian)


def _dilation_viscosity(Q, Qx, h, weights, degree: int, c_nu: float) -> np.ndarray:
    ux = (Qx[1] * Q[0] - Q[1] * Qx[0]) / (Q[0] * Q[0])
    compression = np.sum(np.maximum(-ux, 0.0) * weights[None, :], axis=1) * h
    return c_nu * (h / degree) ** 2 * compression


def artificial_viscosity(q: StateField, c_nu: float = 0.1) -> np.ndarray:
    """Piecewise-constant dilation-based viscosity of a (scaled or unscaled) conserved field."""
    Q = q.at_quadrature()
    if np.any(~(Q[0] > 0)):
        raise InvalidStateError("nonpositive density")
    return _dilation_viscosity(Q, q.gradient_at_quadrature(), q.mesh.h, q.mesh.ref.weights, q.mesh.degree, c_nu)


def _limited_update(
    disc: NozzleDiscretization, U: np.ndarray, dU: np.ndarray, cfg: PtcConfig
) -> Optional[Tuple[float, np.ndarray, HfResidual]]:
    """Largest step 2^-i along ``dU`` that stays admissible within ``cfg.max_update``."""
    if not np.all(np.isfinite(dU)):
        return None
    rho, p = disc.density_pressure(U)
    step = 1.0
    for _ in range(cfg.max_halvings + 1):
        trial = U + step * dU
        trial_rho, trial_p = disc.density_pressure(trial)
        with np.errstate(invalid="ignore"):
            change = max(np.max(np.abs(trial_rho - rho) / rho), np.max(np.abs(trial_p - p) / p))
        if change <= cfg.max_update:
            try:
                trial_res = disc.assemble(trial)
            except InvalidStateError:
                trial_res = None
            if trial_res is not None and np.all(np.isfinite(trial_res.vector)):
                return step, trial, trial_res
        step *= 0.5
    return None


def _ptc_iterate(disc: NozzleDiscretization, U: np.ndarray, cfg: PtcConfig) -> PtcResult:
    mesh, problem = disc.mesh, disc.problem
    res = disc.assemble(U)
    norm = res.norm
    cfl = cfg.cfl0
    history = [PtcRecord(0, cfl, norm)]
    logger.debug(f"PTC mu=({problem.A0:.4f}, {problem.p0:.4f}) c_nu={problem.c_nu:g} start |R|={norm:.3e}")
    iteration = 0
    while norm > cfg.residual_tol:
        if iteration >= cfg.max_iters:
            raise PtcNonConvergenceError(
                f"PTC did not converge in {cfg.max_iters} iterations (|R|={norm:.3e})",
                StateField(mesh, U.ravel()),
                history,
            )
        iteration += 1
        J = disc.assemble(U, nu=res.viscosity, jacobian=True).jacobian
        while True:
            system = (disc.pseudo_time_matrix(U, cfl) + J).tocsc()
            dU = spla.spsolve(system, -res.vector).reshape(U.shape)
            update = _limited_update(disc, U, dU, cfg)
            if update is not None:
                break
            cfl *= cfg.cfl_cut
            if cfl < cfg.cfl_min:
                raise PtcNonConvergenceError(
                    f"PTC update stays inadmissible down to CFL {cfg.cfl_min:g} (|R|={norm:.3e})",
                    StateField(mesh, U.ravel()),
                    history,
                )
            logger.debug(f"PTC update rejected, CFL cut to {cfl:.3e}")
        step, U, res = update
        new_norm = res.norm
        cfl = cfg.next_cfl(cfl, step, norm / max(new_norm, 1e-300))
        norm = new_norm
        history.append(PtcRecord(iteration, cfl, norm))
        logger.debug(f"PTC {history[-1].as_line()} step={step:g}")

    return PtcResult(StateField(mesh, U.ravel()), iteration, history)


def ptc_solve(
    mesh: Mesh1D,
    problem: NozzleProblem,
    init: Optional[StateField] = None,
    cfg: Optional[PtcConfig] = None,
) -> PtcResult:
    """Pseudo-transient continuation: (M/dt + J) dq = -R with SER CFL growth.

    If the direct solve fails, c_nu is raised by each factor of
    ``cfg.viscosity_continuation`` and lowered back stage by stage, every stage
    starting from the state the previous one converged to. Iteration counts and
    histories of all attempts are summed.
    """
    cfg = cfg or PtcConfig()
    U0 = (freestream_field(mesh, problem) if init is None else init.with_mesh(mesh)).values.copy()
    try:
        return _ptc_iterate(NozzleDiscretization(mesh, problem), U0, cfg)
    except PtcNonConvergenceError as exc:
        if not cfg.viscosity_continuation or not problem.c_nu > 0:
            raise
        history = list(exc.history)
        spent = len(history) - 1
        logger.info(f"PTC mu=({problem.A0:.4f}, {problem.p0:.4f}): {exc}; continuing from larger viscosity")

    U = U0
    for factor in (*cfg.viscosity_continuation, 1.0):
        stage = replace(problem, c_nu=problem.c_nu * factor)
        result = _ptc_iterate(NozzleDiscretization(mesh, stage), U, cfg)
        U = result.state.values
        spent += result.iterations
        history.extend(result.history)
    return PtcResult(result.state, spent, history)


def enthalpy_error_indicator(q: StateField, problem: NozzleProblem) -> np.ndarray:
    """eta_k = |D_k|^-1 int_{D_k} (H_tot - H_tot^true)^2 dx."""
    Q = q.at_quadrature()
    W = Q / problem.area(q.mesh.quad_points)[None]
    H = derived_quantities(W, problem.gamma, problem.isentropic_totals)["H_tot"]
    err = (H - problem.total_enthalpy) ** 2
    return np.sum(err * q.mesh.ref.weights[None, :], axis=1)


def mass_flux_mismatch(q: StateField) -> float:
    """|A rho u (0) - A rho u (L)| from the boundary traces."""
    inflow = q.values[1, 0, :] @ q.mesh.ref.phi_left
    outflow = q.values[1, -1, :] @ q.mesh.ref.phi_right
    return float(abs(inflow - outflow))
