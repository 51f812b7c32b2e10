"""Empirical quadrature (EQ) for the DG residual.

Features:
- constraint system G rho = b from elemental/facet residual contributions tested
  against the empirical test space at the training coordinates
- Lawson-Hanson active-set NNLS with a relative residual stopping rule
- reduced mesh: sampled elements, sampled facets and their neighbours
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence

import numpy as np

from .errors import DegenerateEqError, InvalidArgumentError
from .euler1d import N_VARS, NozzleDiscretization, NozzleProblem
from .mesh1d import Mesh1D
from .parallel import parallel_map

if TYPE_CHECKING:
    from .mor import ReducedBasis, TestSpace

logger = logging.getLogger(__name__)

ACCURACY_ROWS_OFFSET = 2


@dataclass(frozen=True, eq=False)
class EqSystem:
    """Rows: element-measure row, facet-count row, then one row per (mu, test vector)."""

    G: np.ndarray
    b: np.ndarray
    n_elements: int
    n_facets: int
    tol_eq: float = 1e-10

    @property
    def delta(self) -> float:
        return self.tol_eq * float(np.linalg.norm(self.b))

    @property
    def n_accuracy_rows(self) -> int:
        return self.G.shape[0] - ACCURACY_ROWS_OFFSET


@dataclass
class EqWeights:
    rho_e: np.ndarray
    rho_f: np.ndarray
    converged: bool = True
    residual: float = 0.0
    support_history: List[int] = field(default_factory=list)

    @classmethod
    def full(cls, mesh: Mesh1D) -> "EqWeights":
        return cls(np.ones(mesh.n_elements), np.ones(mesh.n_facets))

    @property
    def nnz_e(self) -> int:
        return int(np.count_nonzero(self.rho_e))

    @property
    def nnz_f(self) -> int:
        return int(np.count_nonzero(self.rho_f))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho_e, self.rho_f])


def _contribution_columns(
    mesh: Mesh1D, problem: NozzleProblem, U: np.ndarray, Psi: np.ndarray
) -> np.ndarray:
    """(j_es, N_e + N_f): test vector i against each elemental and facet contribution."""
    N, nlp = mesh.n_elements, mesh.n_lp
    disc = NozzleDiscretization(mesh, problem)
    elem, facet, _ = disc.contributions(U)
    psi = Psi.reshape(N_VARS, N, nlp, -1)
    cols_e = np.einsum("vka,vkai->ik", elem, psi)

    cols_f = np.zeros((psi.shape[-1], mesh.n_facets))
    j = np.arange(1, mesh.n_facets)
    cols_f[:, j] += np.einsum("vja,vjai->ij", facet[:, j, 0, :], psi[:, j - 1])
    j = np.arange(0, N)
    cols_f[:, j] += np.einsum("vja,vjai->ij", facet[:, j, 1, :], psi[:, j])
    return np.concatenate([cols_e, cols_f], axis=1)


def assemble_eq_system(
    trial: "ReducedBasis",
    test: "TestSpace",
    mesh: Mesh1D,
    problem: NozzleProblem,
    params: Sequence[Sequence[float]],
    coords: Sequence[np.ndarray],
    mesh_for: Optional[Callable[[np.ndarray], Mesh1D]] = None,
    tol_eq: float = 1e-10,
    jobs: int = 1,
) -> EqSystem:
    """Constant-function rows plus manifold-accuracy rows at (params, coords).

    ``mesh_for(mu)`` returns the mapped mesh on which the residual of mu is assembled
    (the reference mesh when omitted). ``b`` is the image of the all-ones weights.
    """
    if len(params) != len(coords):
        raise InvalidArgumentError("need one coordinate vector per training parameter")
    N = mesh.n_elements

    def rows_for(item):
        mu, alpha = item
        target = mesh if mesh_for is None else mesh_for(np.asarray(mu, dtype=float))
        U = trial.Z @ np.asarray(alpha, dtype=float)
        return _contribution_columns(target, problem.with_parameters(mu), U, test.Psi)

    blocks = parallel_map(rows_for, list(zip(params, coords)), jobs=jobs)
    constant = np.zeros((ACCURACY_ROWS_OFFSET, N + mesh.n_facets))
    constant[0, :N] = mesh.h / mesh.L
    constant[1, N:] = 1.0 / mesh.n_facets
    G = np.vstack([constant, *blocks])
    b = G @ np.ones(G.shape[1])
    logger.debug(f"EQ system: {G.shape[0]} rows x {G.shape[1]} columns from {len(params)} parameters")
    return EqSystem(G, b, N, mesh.n_facets, tol_eq)


def _interpolation_step(x: np.ndarray, s: np.ndarray, passive: np.ndarray) -> float:
    """Largest alpha keeping x + alpha (s - x) >= 0 on the passive set.

    Columns with x = s = 0 (just activated, no weight) do not block; they are dropped.
    """
    blocking = passive & (s <= 0) & (x > s)
    if not blocking.any():
        return 0.0
    return float(np.min(x[blocking] / (x[blocking] - s[blocking])))


def lawson_hanson(G, b, tol: float = 1e-10, max_iters: Optional[int] = None):
    """Active-set NNLS. Returns (x, converged, residual, support_history).

    Stops once ||G x - b|| <= tol ||b||, at the KKT point, or after ``max_iters``
    outer iterations (default 10 * columns).
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = G.shape
    if b.shape != (m,):
        raise InvalidArgumentError(f"right-hand side has shape {b.shape}, expected ({m},)")
    if not tol > 0:
        raise InvalidArgumentError(f"NNLS tolerance must be positive, got {tol}")
    max_iters = 10 * n if max_iters is None else max_iters

    target = tol * float(np.linalg.norm(b))
    passive = np.zeros(n, dtype=bool)
    x = np.zeros(n)
    residual = b.copy()
    w = G.T @ residual
    dual_tol = 1e-14 * max(float(np.abs(w).max(initial=0.0)), 1.0)
    history: List[int] = []
    best_x, best_res = x.copy(), float(np.linalg.norm(residual))

    iteration = 0
    while best_res > target and not passive.all() and np.max(w[~passive]) > dual_tol:
        if iteration >= max_iters:
            logger.warning(f"NNLS hit the iteration cap ({max_iters}); residual {best_res:.3e}")
            return best_x, False, best_res, history
        iteration += 1
        candidates = np.nonzero(~passive)[0]
        passive[candidates[np.argmax(w[candidates])]] = True

        s = np.zeros(n)
        s[passive] = np.linalg.lstsq(G[:, passive], b, rcond=None)[0]
        inner = 0
        while np.any(s[passive] <= 0) and inner < n:
            inner += 1
            alpha = _interpolation_step(x, s, passive)
            x = x + alpha * (s - x)
            passive &= x > 1e-15 * max(float(x.max(initial=0.0)), 1.0)
            x[~passive] = 0.0
            s = np.zeros(n)
            if passive.any():
                s[passive] = np.linalg.lstsq(G[:, passive], b, rcond=None)[0]
        x = s
        residual = b - G @ x
        w = G.T @ residual
        norm = float(np.linalg.norm(residual))
        history.append(int(passive.sum()))
        if norm < best_res:
            best_x, best_res = x.copy(), norm
    return best_x, best_res <= target, best_res, history


def nnls(G, b, tol_eq: float = 1e-10, n_elements: Optional[int] = None) -> EqWeights:
    """Nonnegative weights for G rho ~ b; the first ``n_elements`` columns are elemental."""
    G = np.asarray(G, dtype=float)
    x, converged, residual, history = lawson_hanson(G, b, tol_eq)
    split = G.shape[1] if n_elements is None else int(n_elements)
    weights = EqWeights(x[:split].copy(), x[split:].copy(), converged, residual, history)
    logger.info(
        f"EQ weights: {weights.nnz_e} elements, {weights.nnz_f} facets, "
        f"residual {residual:.3e} ({'converged' if converged else 'not converged'})"
    )
    return weights


def solve_eq_system(system: EqSystem) -> EqWeights:
    return nnls(system.G, system.b, system.tol_eq, system.n_elements)


def constant_function_errors(weights: EqWeights, mesh: Mesh1D):
    """Relative errors of sum_k rho_k |D_k| against |Omega| and sum_j rho_j against N_f."""
    volume = abs(float(weights.rho_e @ mesh.h) - mesh.L) / mesh.L
    facets = abs(float(weights.rho_f.sum()) - mesh.n_facets) / mesh.n_facets
    return volume, facets


@dataclass(frozen=True, eq=False)
class ReducedMesh:
    """Sampled elements/facets and the geometry the online residual touches."""

    elements: np.ndarray
    facets: np.ndarray
    sampled: np.ndarray  # elements carrying basis blocks
    nodes: np.ndarray  # mesh nodes deformed online

    @property
    def n_sampled(self) -> int:
        return self.sampled.size


def extract_reduced_mesh(weights: EqWeights, mesh: Mesh1D) -> ReducedMesh:
    elements = np.nonzero(weights.rho_e)[0]
    facets = np.nonzero(weights.rho_f)[0]
    if elements.size == 0 and facets.size == 0:
        raise DegenerateEqError("EQ weights are identically zero")
    N = mesh.n_elements
    neighbours = np.concatenate([facets - 1, facets])
    neighbours = neighbours[(neighbours >= 0) & (neighbours < N)]
    sampled = np.unique(np.concatenate([elements, neighbours])).astype(int)
    nodes = np.unique(np.concatenate([sampled, sampled + 1])).astype(int)
    return ReducedMesh(elements.astype(int), facets.astype(int), sampled, nodes)
