"""Linear-subspace model reduction on registered (mapped) fields.

Features:
- POD by the method of snapshots in an arbitrary SPD inner product
- discrete L2 and H1-BR2 Gram matrices of the DG space
- empirical test space from Riesz representers of J zeta in the H1-BR2 product
- best-fit coordinates and the LSPG Gauss-Newton solver with hyper-reduced,
  discretize-then-map residuals
"""

import functools
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, List, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IndefiniteGramError, InvalidArgumentError, InvalidStateError, StalledGnmError
from .euler1d import N_VARS, NozzleDiscretization, NozzleProblem
from .mesh1d import Mesh1D, StateField

if TYPE_CHECKING:
    from .hyperreduction import EqWeights, ReducedMesh
    from .registration import MapBasis, MapCoefficients, MapRegressor

logger = logging.getLogger(__name__)

POD_CUTOFF = 1e-12


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    """Columns of Z are orthonormal in the inner product used to build them."""

    Z: np.ndarray
    eigenvalues: np.ndarray
    mesh: Optional[Mesh1D] = None
    coords: Optional[np.ndarray] = None  # (n, n_snapshots)

    @property
    def n(self) -> int:
        return self.Z.shape[1]

    @property
    def modes(self) -> np.ndarray:
        return self.Z

    def field(self, alpha, mesh: Optional[Mesh1D] = None) -> StateField:
        return StateField(mesh or self.mesh, self.Z @ np.asarray(alpha, dtype=float))


def pod_cardinality(eigenvalues, tol: float) -> int:
    """Smallest m with sum_{j<=m} lambda_j >= (1 - tol) sum lambda."""
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = lam.sum()
    if not total > 0:
        return 0
    cumulative = np.cumsum(lam)
    return int(np.searchsorted(cumulative, (1.0 - tol) * total * (1.0 - 1e-14)) + 1)


def pod(
    snapshots,
    tol: Optional[float] = None,
    gram=None,
    mesh: Optional[Mesh1D] = None,
    n_modes: Optional[int] = None,
) -> ReducedBasis:
    """Method of snapshots: C = X^T G X, keep modes by energy (``tol``) or count (``n_modes``)."""
    X = np.asarray(snapshots, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] < 1:
        raise InvalidArgumentError("POD needs at least one snapshot")
    if n_modes is None and (tol is None or not 0 < tol < 1):
        raise InvalidArgumentError(f"POD tolerance must lie in (0, 1), got {tol}")

    GX = X if gram is None else np.asarray(gram @ X)
    C = X.T @ GX
    C = 0.5 * (C + C.T)
    lam, vec = np.linalg.eigh(C)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order]
    if not lam[0] > 0:
        raise InvalidArgumentError("snapshots carry no energy")
    usable = int(np.sum(lam > POD_CUTOFF * lam[0]))
    m = pod_cardinality(lam, tol) if n_modes is None else int(n_modes)
    if m > usable:
        logger.debug(f"POD: requested {m} modes, only {usable} are numerically independent")
    m = max(1, min(m, usable))

    Z = X @ vec[:, :m] / np.sqrt(lam[:m])[None, :]
    # second orthonormalization pass against roundoff in the small modes
    GZ = Z if gram is None else np.asarray(gram @ Z)
    chol = np.linalg.cholesky(0.5 * (Z.T @ GZ + GZ.T @ Z))
    Z = sla.solve_triangular(chol, Z.T, lower=True).T
    GZ = Z if gram is None else np.asarray(gram @ Z)
    coords = GZ.T @ X
    return ReducedBasis(Z, lam, mesh, coords)


# --- inner products ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GramOperator:
    """kron(I_D, scalar): the same scalar Gram for every conserved variable."""

    scalar: sp.csr_matrix
    n_vars: int = N_VARS

    @functools.cached_property
    def matrix(self) -> sp.csr_matrix:
        return sp.kron(sp.identity(self.n_vars), self.scalar).tocsr()

    @functools.cached_property
    def _lu(self):
        return spla.splu(self.scalar.tocsc())

    @property
    def size(self) -> int:
        return self.n_vars * self.scalar.shape[0]

    def __matmul__(self, x):
        return self.matrix @ x

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        n = self.scalar.shape[0]
        flat = rhs.reshape(self.n_vars, n, -1)
        out = np.stack([self._lu.solve(np.ascontiguousarray(flat[v])) for v in range(self.n_vars)])
        return out.reshape(rhs.shape)

    def inner(self, u, v) -> float:
        return float(np.asarray(u) @ (self.matrix @ np.asarray(v)))

    def norm(self, u) -> float:
        return float(np.sqrt(max(self.inner(u, u), 0.0)))

    def min_eigenvalue(self) -> float:
        return float(sla.eigvalsh(self.scalar.toarray(), subset_by_index=[0, 0])[0])


def _block_diagonal(blocks: np.ndarray) -> sp.csr_matrix:
    return sp.block_diag(list(blocks), format="csr")


def l2_gram(mesh: Mesh1D, n_vars: int = N_VARS) -> GramOperator:
    blocks = mesh.h[:, None, None] * mesh.ref.mass[None]
    return GramOperator(_block_diagonal(blocks), n_vars)


def br2_lifting(mesh: Mesh1D, facet: int, jump) -> np.ndarray:
    """Lifting r_j of a scalar jump on interior facet j: int r v = [q] {v} for v in V_h.

    Returns coefficients (N_e, n_lp), nonzero on the two neighbours only.
    """
    if not 0 < facet < mesh.n_elements:
        raise InvalidArgumentError(f"facet {facet} is not an interior facet")
    ref = mesh.ref
    out = np.zeros((mesh.n_elements, mesh.n_lp))
    left, right = facet - 1, facet
    out[left] = np.linalg.solve(mesh.h[left] * ref.mass, 0.5 * float(jump) * ref.phi_right)
    out[right] = np.linalg.solve(mesh.h[right] * ref.mass, 0.5 * float(jump) * ref.phi_left)
    return out


def _br2_constants(mesh: Mesh1D) -> np.ndarray:
    """c_j with ||r_j(w)||^2 = c_j w^2 on each interior facet."""
    ref = mesh.ref
    inv_mass = np.linalg.inv(ref.mass)
    a_left = ref.phi_right @ inv_mass @ ref.phi_right
    a_right = ref.phi_left @ inv_mass @ ref.phi_left
    j = np.arange(1, mesh.n_elements)
    return 0.25 * (a_left / mesh.h[j - 1] + a_right / mesh.h[j])


def h1_br2_gram(mesh: Mesh1D, n_vars: int = N_VARS, eta: float = 2.0) -> GramOperator:
    """((u, v)) = sum_k (u, v)_{H1(D_k)} - sum_j ({u'}[v] + [u]{v'}) + eta sum_j (r_j[u], r_j[v])."""
    ref = mesh.ref
    N, nlp = mesh.n_elements, mesh.n_lp
    blocks = mesh.h[:, None, None] * ref.mass[None] + ref.stiffness[None] / mesh.h[:, None, None]
    G = _block_diagonal(blocks)
    c = _br2_constants(mesh)
    rows, cols, vals = [], [], []
    jv = np.concatenate([ref.phi_right, -ref.phi_left])
    for idx, j in enumerate(range(1, N)):
        left, right = j - 1, j
        gv = np.concatenate([0.5 * ref.dphi_right / mesh.h[left], 0.5 * ref.dphi_left / mesh.h[right]])
        local = -np.outer(gv, jv) - np.outer(jv, gv) + eta * c[idx] * np.outer(jv, jv)
        dofs = np.concatenate([left * nlp + np.arange(nlp), right * nlp + np.arange(nlp)])
        rows.append(np.repeat(dofs, dofs.size))
        cols.append(np.tile(dofs, dofs.size))
        vals.append(local.ravel())
    if rows:
        size = N * nlp
        G = G + sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    op = GramOperator(sp.csr_matrix(G), n_vars)
    lowest = op.min_eigenvalue()
    if not lowest > 0:
        raise IndefiniteGramError(f"H1-BR2 Gram is not positive definite (min eigenvalue {lowest:.3e}, eta={eta})")
    return op


def build_gram_matrices(mesh: Mesh1D, n_vars: int = N_VARS, eta: float = 2.0):
    """(L2 Gram, H1-BR2 Gram) of the DG space on ``mesh``."""
    return l2_gram(mesh, n_vars), h1_br2_gram(mesh, n_vars, eta)


# --- test space ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TestSpace:
    __test__ = False

    Psi: np.ndarray
    gram: Optional[GramOperator] = None

    @property
    def size(self) -> int:
        return self.Psi.shape[1]


def build_test_space(
    trial: ReducedBasis,
    jacobians: Sequence[Any],
    gram: GramOperator,
    factor: int = 2,
    energy_tol: Optional[float] = None,
) -> TestSpace:
    """POD (in the H1-BR2 product) of the Riesz representers of J_k zeta_i.

    Keeps ``factor * n`` modes, or the energy count when ``energy_tol`` is given.
    """
    if len(jacobians) == 0:
        raise InvalidArgumentError("test space needs at least one training Jacobian")
    representers = np.concatenate([gram.solve(np.asarray(J @ trial.Z)) for J in jacobians], axis=1)
    wanted = factor * trial.n
    if energy_tol is None:
        basis = pod(representers, gram=gram.matrix, n_modes=wanted)
    else:
        basis = pod(representers, energy_tol, gram=gram.matrix)
    if energy_tol is None and basis.n < wanted:
        logger.warning(f"test space has {basis.n} independent modes, wanted {wanted}")
    logger.debug(f"test space: {basis.n} modes from {representers.shape[1]} representers")
    return TestSpace(basis.Z, gram)


def best_fit_coords(q, trial: ReducedBasis, gram: Optional[GramOperator] = None) -> np.ndarray:
    """L2-orthogonal projection coordinates Z^T M q."""
    coeffs = q.coeffs if isinstance(q, StateField) else np.asarray(q, dtype=float)
    if gram is None:
        if trial.mesh is None:
            raise InvalidArgumentError("trial basis has no mesh; pass the Gram operator")
        gram = l2_gram(trial.mesh)
    return trial.Z.T @ (gram @ coeffs)


# --- online solver -------------------------------------------------------------


@dataclass
class GnmConfig:
    tol: float = 1e-10
    max_iters: int = 50
    fd_step: float = 1e-7
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 20
    step_tol: float = 1e-10


@dataclass(frozen=True, eq=False)
class RomArtifact:
    trial: ReducedBasis
    test: TestSpace
    weights: "EqWeights"
    reduced_mesh: "ReducedMesh"
    mesh: Mesh1D
    problem: NozzleProblem
    training_params: np.ndarray
    training_coords: np.ndarray
    map_basis: Optional["MapBasis"] = None
    map_regressor: Optional["MapRegressor"] = None

    @property
    def n(self) -> int:
        return self.trial.n

    def map_for(self, mu) -> Optional["MapCoefficients"]:
        if self.map_regressor is None or self.map_basis is None:
            return None
        from .registration import MapCoefficients

        return MapCoefficients(self.map_regressor(np.asarray(mu, dtype=float)), self.map_basis)

    def deformed_mesh(self, mu) -> Mesh1D:
        phi = self.map_for(mu)
        return self.mesh if phi is None else phi.deform(self.mesh)

    def nearest_coords(self, mu) -> np.ndarray:
        d = np.linalg.norm(self.training_params - np.asarray(mu, dtype=float)[None, :], axis=1)
        return self.training_coords[int(np.argmin(d))].copy()

    def state(self, alpha, mu=None) -> StateField:
        """Z alpha as a field on the reference mesh, or on the mapped mesh when ``mu`` is given."""
        mesh = self.mesh if mu is None else self.deformed_mesh(mu)
        return self.trial.field(alpha, mesh)


@dataclass
class LspgResult:
    alpha: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    history: List[float] = field(default_factory=list)


class ReducedResidual:
    """alpha -> Psi^T R_eq(Z alpha) on the reduced mesh with nodes deformed by Phi_mu."""

    def __init__(self, rom: RomArtifact, mu):
        mesh = rom.mesh
        rmesh = rom.reduced_mesh
        nodes = np.array(mesh.nodes)
        phi = rom.map_for(mu)
        if phi is not None:
            nodes[rmesh.nodes] = phi(nodes[rmesh.nodes])
        self.mesh = mesh.with_nodes(nodes, checked=False)
        self.problem = rom.problem.with_parameters(mu)
        self.disc = NozzleDiscretization(self.mesh, self.problem)
        self.elements = rmesh.sampled
        n_lp, N = mesh.n_lp, mesh.n_elements
        self.dofs = (
            np.arange(N_VARS)[:, None, None] * N * n_lp
            + self.elements[None, :, None] * n_lp
            + np.arange(n_lp)[None, None, :]
        ).ravel()
        self.Z = rom.trial.Z[self.dofs]
        self.Psi = rom.test.Psi[self.dofs]
        self.rho_e = rom.weights.rho_e
        self.rho_f = rom.weights.rho_f
        self.size = N_VARS * N * n_lp

    def __call__(self, alpha) -> np.ndarray:
        U = np.zeros(self.size)
        U[self.dofs] = self.Z @ alpha
        res = self.disc.assemble(U, elem_weights=self.rho_e, facet_weights=self.rho_f)
        return self.Psi.T @ res.vector[self.dofs]


def lspg_solve(mu, rom: RomArtifact, alpha0=None, cfg: Optional[GnmConfig] = None) -> LspgResult:
    """Gauss-Newton with backtracking on ||Psi^T R_eq(Z alpha)||_2."""
    cfg = cfg or GnmConfig()
    residual = ReducedResidual(rom, mu)
    alpha = rom.nearest_coords(mu) if alpha0 is None else np.asarray(alpha0, dtype=float).copy()
    try:
        r = residual(alpha)
    except InvalidStateError as exc:
        raise StalledGnmError(f"initial guess is inadmissible: {exc}", alpha, []) from exc
    norm = float(np.linalg.norm(r))
    history = [norm]
    converged = norm <= cfg.tol
    iteration = 0
    while not converged and iteration < cfg.max_iters:
        iteration += 1
        jac = np.empty((r.size, alpha.size))
        for i in range(alpha.size):
            step = cfg.fd_step * (1.0 + abs(alpha[i]))
            e = np.zeros_like(alpha)
            e[i] = step
            jac[:, i] = (residual(alpha + e) - r) / step
        delta, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        slope = -float(np.sum((jac @ delta) ** 2))

        t = 1.0
        for _ in range(cfg.max_backtracks):
            trial = alpha + t * delta
            try:
                r_trial = residual(trial)
                f_trial = 0.5 * float(r_trial @ r_trial)
            except InvalidStateError:
                f_trial = np.inf
            if f_trial <= 0.5 * norm**2 + cfg.armijo * t * slope:
                break
            t *= cfg.backtrack
        else:
            if np.linalg.norm(delta) <= cfg.step_tol * (1.0 + np.linalg.norm(alpha)):
                converged = True
                break
            raise StalledGnmError(
                f"GNM line search failed after {cfg.max_backtracks} trials (|R|={norm:.3e})", alpha, history
            )
        step_size = t * float(np.linalg.norm(delta))
        previous = norm
        alpha, r = trial, r_trial
        norm = float(np.linalg.norm(r))
        history.append(norm)
        logger.debug(f"GNM it={iteration} |R|={norm:.3e} step={step_size:.2e}")
        converged = (
            norm <= cfg.tol
            or step_size <= cfg.step_tol * (1.0 + float(np.linalg.norm(alpha)))
            or previous - norm <= 1e-12 * previous
        )
    return LspgResult(alpha, converged, iteration, norm, history)
