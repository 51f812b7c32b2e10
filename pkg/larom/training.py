"""Offline training: weak greedy ROM construction inside the adaptive loop.

Features:
- parameter box, training/greedy grids and seeded test draws
- HF snapshots on mapped meshes (cold or ROM-warm-started PTC)
- ROM assembly: POD trial space, empirical test space, EQ weights, reduced mesh
- residual-based error indicator, weak greedy, strong greedy
- adaptive loop (snapshots -> mesh adaptation -> registration -> weak greedy) with
  the accelerated variant and the ROM bootstrap of the first iteration
- evaluation metrics (relative L2 error, suboptimality index, total enthalpy error)
"""

import contextlib
import dataclasses
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    IndefiniteGramError,
    InvalidArgumentError,
    InvalidStateError,
    LaromError,
    PhaseError,
    PtcNonConvergenceError,
    StalledGnmError,
)
from .euler1d import (
    NozzleProblem,
    PtcConfig,
    enthalpy_error_indicator,
    hf_residual,
    mach_field,
    ptc_solve,
)
from .hyperreduction import (
    EqWeights,
    assemble_eq_system,
    extract_reduced_mesh,
    solve_eq_system,
)
from .mesh1d import (
    Mesh1D,
    StateField,
    build_uniform_mesh,
    equidistribute,
    interpolate_field,
    mach_curvature_density,
)
from .mor import (
    GnmConfig,
    GramOperator,
    RomArtifact,
    best_fit_coords,
    build_gram_matrices,
    build_test_space,
    l2_gram,
    lspg_solve,
    pod,
    pod_cardinality,
)
from .parallel import parallel_map
from .registration import (
    MapCoefficients,
    ParametricRegistration,
    RegistrationConfig,
    build_map_basis,
    register_parametric,
    shock_locator,
    shock_targets,
)

logger = logging.getLogger(__name__)

COMPRESSIBILITY_TOL = 1e-6
PROFILE_POINTS = 200


@dataclass(frozen=True)
class ParameterBox:
    a0_range: Tuple[float, float] = NozzleProblem.A0_RANGE
    p0_range: Tuple[float, float] = NozzleProblem.P0_RANGE

    def __post_init__(self):
        for lo, hi in (self.a0_range, self.p0_range):
            if not lo <= hi:
                raise InvalidArgumentError(f"inverted parameter range ({lo}, {hi})")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.a0_range[0], self.p0_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.a0_range[1], self.p0_range[1]])

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def grid(self, shape: Tuple[int, int]) -> np.ndarray:
        """Regular grid, shape (n_a0 * n_p0, 2); p0 varies fastest. One point per axis is the midpoint."""
        axes = []
        for (lo, hi), count in zip((self.a0_range, self.p0_range), shape):
            if count < 1:
                raise InvalidArgumentError(f"grid shape must be positive, got {shape}")
            axes.append(np.array([0.5 * (lo + hi)]) if count == 1 else np.linspace(lo, hi, count))
        a0, p0 = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([a0.ravel(), p0.ravel()])

    def contains(self, mu) -> bool:
        mu = np.asarray(mu, dtype=float)
        return bool(np.all(mu >= self.lower) and np.all(mu <= self.upper))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, 2))


@dataclass
class TrainingConfig:
    problem: NozzleProblem = field(default_factory=NozzleProblem)
    box: ParameterBox = field(default_factory=ParameterBox)
    n_elements: int = 60
    degree: int = 2
    quadrature_points: Optional[int] = None
    ptc: PtcConfig = field(default_factory=PtcConfig)
    warm_cfl0: float = 100.0
    map_degree: int = 10
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    gnm: GnmConfig = field(default_factory=GnmConfig)
    train_shape: Tuple[int, int] = (15, 15)
    greedy_shape: Tuple[int, int] = (10, 10)
    tol: float = 1e-3
    n0: int = 9
    n_max: int = 30
    test_factor: int = 2
    test_space_energy: bool = False
    tol_eq: float = 1e-10
    eq_augment: int = 0
    br2_eta: float = 2.0
    iterations: int = 3
    mesh_growth: float = 1.5
    accelerated: bool = False
    rom_bootstrap: bool = False  # ROM-based snapshots at k=1 only; accelerated implies it
    n_test: int = 20
    seed: int = 0
    init_dataset_points: int = 1000
    de_boor_sweeps: int = 3
    jobs: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgumentError(f"greedy tolerance must be positive, got {self.tol}")
        if self.iterations < 1 or self.n0 < 1 or self.n_max < 1:
            raise InvalidArgumentError("iterations, n0 and n_max must be >= 1")
        if not self.mesh_growth > 0:
            raise InvalidArgumentError(f"mesh growth must be positive, got {self.mesh_growth}")

    @property
    def warm_ptc(self) -> PtcConfig:
        # a failed warm start restarts cold, which has its own continuation
        return dataclasses.replace(self.ptc, cfl0=self.warm_cfl0, viscosity_continuation=())

    @property
    def bootstrap(self) -> bool:
        return self.accelerated or self.rom_bootstrap

    def initial_grid(self) -> np.ndarray:
        side = max(1, int(round(math.sqrt(self.n0))))
        return self.box.grid((side, side))


class PhaseTimer:
    """Accumulated wall-clock seconds per named phase."""

    def __init__(self):
        self.seconds: Dict[str, float] = defaultdict(float)

    @contextlib.contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - start


# --- geometry and snapshots ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Geometry:
    """Reference mesh plus the parametric map (identity when unregistered)."""

    mesh: Mesh1D
    registration: Optional[ParametricRegistration] = None

    def map_for(self, mu) -> Optional[MapCoefficients]:
        return None if self.registration is None else self.registration.map_for(mu)

    def mesh_for(self, mu) -> Mesh1D:
        phi = self.map_for(mu)
        return self.mesh if phi is None else phi.deform(self.mesh)


@dataclass(frozen=True, eq=False)
class Snapshot:
    mu: np.ndarray
    physical: StateField  # coefficients on the mapped mesh
    reference: Mesh1D
    alpha: Optional[np.ndarray] = None
    ptc_iterations: int = 0
    warm: bool = False
    source: str = "hf"

    @property
    def field(self) -> StateField:
        """The same coefficients read on the reference mesh (the mapped field)."""
        return self.physical.with_mesh(self.reference)


def _transfer(init: StateField, mesh: Mesh1D) -> StateField:
    return init if init.mesh.same_as(mesh) else interpolate_field(init, mesh)


def solve_hf(mu, geometry: Geometry, cfg: TrainingConfig, init: Optional[StateField] = None) -> Snapshot:
    """PTC on Phi_mu(mesh); a warm start uses CFL0 = warm_cfl0 and falls back to free stream."""
    mu = np.asarray(mu, dtype=float)
    problem = cfg.problem.with_parameters(mu)
    if not problem.in_range():
        logger.warning(f"mu=({mu[0]:.4f}, {mu[1]:.4f}) lies outside the nozzle parameter box")
    mesh = geometry.mesh_for(mu)
    if init is not None:
        try:
            result = ptc_solve(mesh, problem, _transfer(init, mesh), cfg.warm_ptc)
            return Snapshot(mu, result.state, geometry.mesh, ptc_iterations=result.iterations, warm=True)
        except (PtcNonConvergenceError, InvalidStateError) as exc:
            logger.warning(f"warm-started PTC failed at mu={tuple(np.round(mu, 4))}: {exc}; restarting cold")
    result = ptc_solve(mesh, problem, None, cfg.ptc)
    return Snapshot(mu, result.state, geometry.mesh, ptc_iterations=result.iterations)


def _safe_lspg(mu, rom: RomArtifact, cfg: GnmConfig, alpha0=None) -> Tuple[np.ndarray, bool]:
    try:
        res = lspg_solve(mu, rom, alpha0, cfg)
        return res.alpha, res.converged
    except StalledGnmError as exc:
        logger.warning(f"GNM stalled at mu={tuple(np.round(mu, 4))}: {exc}")
        return np.asarray(exc.alpha, dtype=float), False


def rom_snapshots(rom: RomArtifact, params, cfg: TrainingConfig, fallback: Optional[Geometry] = None) -> List[Snapshot]:
    """ROM predictions at ``params``; an inadmissible prediction is replaced by an HF solve."""

    def predict(mu) -> Snapshot:
        alpha, _ = _safe_lspg(mu, rom, cfg.gnm)
        state = rom.state(alpha, mu)
        try:
            mach_field(state, rom.problem)
        except InvalidStateError:
            logger.warning(f"ROM prediction at mu={tuple(np.round(mu, 4))} is inadmissible; using HF")
            return solve_hf(mu, fallback or Geometry(rom.mesh), cfg)
        return Snapshot(np.asarray(mu, dtype=float), state, rom.mesh, alpha=alpha, source="rom")

    return parallel_map(predict, list(np.atleast_2d(params)), cfg.jobs)


# --- ROM construction ----------------------------------------------------------


def build_rom(
    snapshots: Sequence[Snapshot],
    geometry: Geometry,
    cfg: TrainingConfig,
    grams: Tuple[GramOperator, GramOperator],
    augment_params: Optional[np.ndarray] = None,
) -> RomArtifact:
    """Trial space, test space, EQ weights and reduced mesh from HF snapshots."""
    mesh = geometry.mesh
    l2, h1 = grams
    X = np.column_stack([s.physical.coeffs for s in snapshots])
    trial = pod(X, gram=l2.matrix, mesh=mesh, n_modes=len(snapshots))
    jacobians = [
        hf_residual(s.physical, cfg.problem.with_parameters(s.mu), jacobian=True).jacobian for s in snapshots
    ]
    test = build_test_space(
        trial, jacobians, h1, cfg.test_factor, energy_tol=cfg.tol if cfg.test_space_energy else None
    )
    params = np.array([s.mu for s in snapshots])
    coords = np.array([best_fit_coords(s.physical.coeffs, trial, l2) for s in snapshots])
    regression = geometry.registration
    rom_kwargs = dict(
        trial=trial,
        test=test,
        mesh=mesh,
        problem=cfg.problem,
        training_params=params,
        training_coords=coords,
        map_basis=None if regression is None else regression.basis,
        map_regressor=None if regression is None else regression.regressor,
    )

    eq_params, eq_coords = list(params), list(coords)
    if augment_params is not None and len(augment_params):
        full = EqWeights.full(mesh)
        provisional = RomArtifact(weights=full, reduced_mesh=extract_reduced_mesh(full, mesh), **rom_kwargs)
        for mu in np.atleast_2d(augment_params):
            alpha, _ = _safe_lspg(mu, provisional, cfg.gnm)
            eq_params.append(np.asarray(mu, dtype=float))
            eq_coords.append(alpha)

    system = assemble_eq_system(
        trial, test, mesh, cfg.problem, eq_params, eq_coords, geometry.mesh_for, cfg.tol_eq, cfg.jobs
    )
    weights = solve_eq_system(system)
    reduced = extract_reduced_mesh(weights, mesh)
    logger.info(f"ROM n={trial.n}, test size={test.size}, reduced mesh {reduced.n_sampled}/{mesh.n_elements} elements")
    return RomArtifact(weights=weights, reduced_mesh=reduced, **rom_kwargs)


def error_indicator(q: StateField, problem: NozzleProblem, gram: GramOperator) -> float:
    """Dual norm of the full HF residual: sqrt(R^T G^-1 R)."""
    r = hf_residual(q, problem).vector
    value = float(r @ gram.solve(r))
    if value < -1e-12 * max(float(r @ r), 1e-300):
        raise IndefiniteGramError(f"negative residual dual norm {value:.3e}")
    return math.sqrt(max(value, 0.0))


def relative_error(q: StateField, reference: StateField) -> float:
    gram = l2_gram(reference.mesh)
    denom = gram.norm(reference.coeffs)
    return gram.norm(q.coeffs - reference.coeffs) / denom if denom > 0 else math.inf


@dataclass
class GreedyStep:
    n: int
    mu: np.ndarray
    indicator: float
    error: float


@dataclass
class StrongGreedyResult:
    indices: List[int]
    gains: List[float]


def strong_greedy(coords, n0: int) -> StrongGreedyResult:
    """Pick, n0 times, the coordinate vector farthest from the span of those already picked."""
    A = np.atleast_2d(np.asarray(coords, dtype=float))
    residual = A.copy()
    indices: List[int] = []
    gains: List[float] = []
    for _ in range(min(int(n0), A.shape[0])):
        d = np.linalg.norm(residual, axis=1)
        i = int(np.argmax(d))
        gain = float(d[i])
        if gain <= 1e-12 * (gains[0] if gains else 1.0):
            logger.warning(f"strong greedy: only {len(indices)} independent coordinate vectors (wanted {n0})")
            break
        indices.append(i)
        gains.append(gain)
        e = residual[i] / gain
        residual = residual - np.outer(residual @ e, e)
    return StrongGreedyResult(indices, gains)


@dataclass
class GreedyResult:
    rom: RomArtifact
    snapshots: List[Snapshot]
    history: List[GreedyStep]
    converged: bool


def _indicator_at(mu, rom: RomArtifact, cfg: TrainingConfig, h1: GramOperator):
    alpha, _ = _safe_lspg(mu, rom, cfg.gnm)
    try:
        delta = error_indicator(rom.state(alpha, mu), cfg.problem.with_parameters(mu), h1)
    except InvalidStateError:
        delta = math.inf
    return delta, alpha


def weak_greedy(
    grid,
    geometry: Geometry,
    cfg: TrainingConfig,
    initial,
    grams: Optional[Tuple[GramOperator, GramOperator]] = None,
    warm_start: Optional[Callable[[np.ndarray], Optional[StateField]]] = None,
    timer: Optional[PhaseTimer] = None,
    rng: Optional[np.random.Generator] = None,
) -> GreedyResult:
    """Enrich the ROM with the HF solution at argmax of the indicator until the true error < tol."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    timer = timer or PhaseTimer()
    rng = rng or np.random.default_rng(cfg.seed)
    grams = grams or build_gram_matrices(geometry.mesh, eta=cfg.br2_eta)
    h1 = grams[1]

    with timer.phase("greedy_hf"):
        snapshots = parallel_map(
            lambda mu: solve_hf(mu, geometry, cfg, None if warm_start is None else warm_start(mu)),
            list(np.atleast_2d(initial)),
            cfg.jobs,
        )
    available = np.array([not any(np.allclose(g, s.mu) for s in snapshots) for g in grid])
    history: List[GreedyStep] = []
    converged = False
    while True:
        augment = None
        if cfg.eq_augment and available.any():
            pool = np.nonzero(available)[0]
            augment = grid[rng.choice(pool, size=min(cfg.eq_augment, pool.size), replace=False)]
        rom = build_rom(snapshots, geometry, cfg, grams, augment)
        if not available.any():
            logger.warning("weak greedy exhausted the greedy grid")
            break
        candidates = np.nonzero(available)[0]
        sweep = parallel_map(lambda i: _indicator_at(grid[i], rom, cfg, h1), list(candidates), cfg.jobs)
        deltas = np.array([d for d, _ in sweep])
        pick = int(np.argmax(np.where(np.isnan(deltas), np.inf, deltas)))
        best, (delta, alpha) = int(candidates[pick]), sweep[pick]
        mu = grid[best]
        available[best] = False

        init = None
        if cfg.accelerated:
            init = rom.state(alpha, mu)
        with timer.phase("greedy_hf"):
            snap = solve_hf(mu, geometry, cfg, init)
        error = relative_error(rom.state(alpha, mu), snap.physical)
        history.append(GreedyStep(rom.n, mu, float(delta), error))
        logger.debug(
            f"weak greedy n={rom.n}: mu*=({mu[0]:.4f}, {mu[1]:.4f}) indicator={delta:.3e} error={error:.3e} "
            f"PTC its={snap.ptc_iterations}{' (warm)' if snap.warm else ''}"
        )
        if error < cfg.tol:
            converged = True
            break
        if len(snapshots) >= cfg.n_max:
            logger.warning(f"weak greedy reached n_max={cfg.n_max} with error {error:.3e}")
            break
        snapshots.append(snap)
    return GreedyResult(rom, list(snapshots), history, converged)


def basis_at_points(rom: RomArtifact, x: np.ndarray) -> np.ndarray:
    """Trial basis evaluated at reference points, shape (3 * len(x), n)."""
    mesh = rom.mesh
    elem, xi = mesh.locate(x)
    phi = mesh.ref.basis(xi)
    Z = rom.trial.Z.reshape(3, mesh.n_elements, mesh.n_lp, -1)
    return np.einsum("vpai,pa->vpi", Z[:, elem], phi).reshape(-1, Z.shape[-1])


def initial_condition_dataset(
    rom: RomArtifact, snapshots: Sequence[Snapshot], n_points: int, rng: np.random.Generator
) -> np.ndarray:
    """Least-squares coordinates of the previous fields, mapped by the new maps, at random points."""
    x = np.sort(rng.uniform(0.0, rom.mesh.L, n_points))
    B = basis_at_points(rom, x)
    coords = []
    for snap in snapshots:
        phi = rom.map_for(snap.mu)
        y = x if phi is None else phi(x)
        target = snap.physical.evaluate(y)
        coords.append(np.linalg.lstsq(B, target.ravel(), rcond=None)[0])
    return np.array(coords)


# --- evaluation ----------------------------------------------------------------


@dataclass
class MetricRecord:
    mu: np.ndarray
    e_hf: float
    eta: float
    e_inf: float
    online_seconds: float
    eta_defined: bool = True
    gnm_converged: bool = True


def total_enthalpy_error(q: StateField, problem: NozzleProblem) -> float:
    """||H_tot - H_true||_{L2} / ||H_true||_{L2} on q's (mapped) mesh."""
    try:
        per_element = enthalpy_error_indicator(q, problem)
    except InvalidStateError:
        return math.inf
    mesh = q.mesh
    return math.sqrt(float(per_element @ mesh.h)) / (problem.total_enthalpy * math.sqrt(mesh.L))


def best_fit_error(q: StateField, Z: np.ndarray) -> float:
    """min_alpha ||Z alpha - q|| in the L2 product of q's mesh."""
    gram = l2_gram(q.mesh)
    MZ = np.asarray(gram @ Z)
    alpha = np.linalg.solve(Z.T @ MZ, MZ.T @ q.coeffs)
    return gram.norm(Z @ alpha - q.coeffs)


def evaluate_one(
    mu, rom: RomArtifact, cfg: TrainingConfig, hf_solver: Optional[Callable[[np.ndarray], StateField]] = None
) -> MetricRecord:
    mu = np.asarray(mu, dtype=float)
    problem = cfg.problem.with_parameters(mu)
    mesh = rom.deformed_mesh(mu)
    truth = hf_solver(mu) if hf_solver else ptc_solve(mesh, problem, None, cfg.ptc).state
    truth = _transfer(truth, mesh)

    start = time.perf_counter()
    alpha, converged = _safe_lspg(mu, rom, cfg.gnm)
    online = time.perf_counter() - start

    q = rom.trial.field(alpha, mesh)
    gram = l2_gram(mesh)
    denom = gram.norm(truth.coeffs)
    err = gram.norm(q.coeffs - truth.coeffs)
    e_hf = err / denom if denom > 0 else math.inf
    bf = best_fit_error(truth, rom.trial.Z)
    defined = bf > 1e-14 * max(denom, 1.0)
    eta = err / bf if defined else math.nan
    return MetricRecord(mu, e_hf, eta, total_enthalpy_error(q, problem), online, defined, converged)


def evaluate(
    rom: RomArtifact,
    params,
    cfg: TrainingConfig,
    hf_solver: Optional[Callable[[np.ndarray], StateField]] = None,
) -> List[MetricRecord]:
    """Metrics of the ROM against HF solutions on the mapped meshes.

    Without ``hf_solver`` the reference is a cold PTC solve on Phi_mu(mesh).
    """
    return parallel_map(lambda mu: evaluate_one(mu, rom, cfg, hf_solver), list(np.atleast_2d(params)), cfg.jobs)


# --- adaptive loop -------------------------------------------------------------


@dataclass
class ShockRecord:
    mu: np.ndarray
    physical: float
    mapped: float


@dataclass
class ShockProfiles:
    x: np.ndarray
    mus: np.ndarray
    physical: np.ndarray  # (k, len(x)) density in the physical configuration
    reference: np.ndarray  # (k, len(x)) density composed with the map


@dataclass
class IterationReport:
    iteration: int
    n_elements: int
    rob_size: int = 0
    converged: bool = False
    costs: Dict[str, float] = field(default_factory=dict)
    metrics: List[MetricRecord] = field(default_factory=list)
    pod_registered: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pod_unregistered: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shocks: List[ShockRecord] = field(default_factory=list)
    greedy: List[GreedyStep] = field(default_factory=list)
    ptc_cold: List[int] = field(default_factory=list)
    ptc_warm: List[int] = field(default_factory=list)
    eq_support: Tuple[int, int] = (0, 0)
    hf_fallbacks: int = 0
    profiles: Optional[ShockProfiles] = None

    def _finite(self, attr: str) -> np.ndarray:
        vals = np.array([getattr(m, attr) for m in self.metrics], dtype=float)
        return vals[np.isfinite(vals)]

    @property
    def median_e_hf(self) -> float:
        vals = self._finite("e_hf")
        return float(np.median(vals)) if vals.size else math.nan

    @property
    def median_e_inf(self) -> float:
        vals = self._finite("e_inf")
        return float(np.median(vals)) if vals.size else math.nan

    @property
    def max_eta(self) -> float:
        vals = self._finite("eta")
        return float(vals.max()) if vals.size else math.nan

    @property
    def offline_seconds(self) -> float:
        return float(sum(v for k, v in self.costs.items() if k != "evaluation"))

    def modes_for(self, tol: float = COMPRESSIBILITY_TOL) -> Tuple[int, int]:
        """POD modes needed for relative energy ``tol``: (registered, unregistered)."""
        return pod_cardinality(self.pod_registered, tol), pod_cardinality(self.pod_unregistered, tol)


@dataclass
class RunReport:
    accelerated: bool
    seed: int
    test_params: np.ndarray
    iterations: List[IterationReport] = field(default_factory=list)

    @property
    def offline_seconds(self) -> float:
        return float(sum(it.offline_seconds for it in self.iterations))


@dataclass
class IterationArtifacts:
    iteration: int
    geometry: Geometry
    rom: RomArtifact
    snapshots: List[Snapshot]


@dataclass
class LoopResult:
    report: RunReport
    artifacts: List[IterationArtifacts]

    @property
    def rom(self) -> RomArtifact:
        return self.artifacts[-1].rom


def _normalized_pod_energies(fields: Sequence[StateField], gram: GramOperator) -> np.ndarray:
    X = np.column_stack([f.coeffs for f in fields])
    C = X.T @ np.asarray(gram @ X)
    lam = np.clip(np.linalg.eigvalsh(0.5 * (C + C.T))[::-1], 0.0, None)
    return lam / lam.sum() if lam.sum() > 0 else lam


def _adapt_mesh(snapshots: Sequence[Snapshot], mesh: Mesh1D, n_elements: int, cfg: TrainingConfig) -> Mesh1D:
    problem = cfg.problem
    mapped = [s.field for s in snapshots]

    def density_on(candidate: Mesh1D):
        machs = [mach_field(_transfer(f, candidate), problem) for f in mapped]
        return mach_curvature_density(machs, n_elements + 1)

    return equidistribute(density_on, mesh, n_elements, cfg.de_boor_sweeps)


def register_snapshots(
    snapshots: Sequence[Snapshot],
    mesh: Mesh1D,
    cfg: TrainingConfig,
    warm: Optional[np.ndarray],
) -> Tuple[ParametricRegistration, List[ShockRecord]]:
    """Shock-aligning maps relative to the snapshot nearest the box centre, plus mapped shock positions."""
    params = np.array([s.mu for s in snapshots])
    shocks = np.array(
        [shock_locator(mach_field(s.physical, cfg.problem), cfg.registration.delta) for s in snapshots]
    )
    centre = int(np.argmin(np.linalg.norm(params - cfg.box.center[None, :], axis=1)))
    x_ref = float(shocks[centre])
    basis = build_map_basis(cfg.map_degree, mesh.L)
    registration = register_parametric(
        params,
        shock_targets(shocks, x_ref),
        basis,
        cfg.registration,
        reference=cfg.box.center,
        warm_starts=warm,
        jobs=cfg.jobs,
        bounds=cfg.box.bounds,
        check_points=mesh.nodes,
    )
    records = [
        ShockRecord(mu, float(xs), float(registration.map_for(mu).inverse(np.array([xs]))[0]))
        for mu, xs in zip(params, shocks)
    ]
    spread = max(abs(r.mapped - x_ref) for r in records)
    logger.info(f"shock reference x={x_ref:.4f}; max |Phi^-1(x*) - x_ref| = {spread:.3e}")
    return registration, records


def shock_profiles(
    snapshots: Sequence[Snapshot], geometry: Geometry, problem: NozzleProblem, count: int = 3
) -> ShockProfiles:
    """Density traces of ``count`` snapshots spread along A0, physical and mapped."""
    mesh = geometry.mesh
    x = np.linspace(0.0, mesh.L, PROFILE_POINTS)
    order = np.argsort([s.mu[0] for s in snapshots], kind="stable")
    picks = order[np.unique(np.linspace(0, len(order) - 1, min(count, len(order))).round().astype(int))]
    physical, reference, mus = [], [], []
    for i in picks:
        snap = snapshots[int(i)]
        area = problem.with_parameters(snap.mu).area
        phi = geometry.map_for(snap.mu)
        y = x if phi is None else phi(x)
        physical.append(snap.physical.evaluate(x)[0] / area(x))
        reference.append(snap.physical.evaluate(y)[0] / area(y))
        mus.append(snap.mu)
    return ShockProfiles(x, np.array(mus), np.array(physical), np.array(reference))


def adaptive_loop(
    cfg: TrainingConfig,
    on_iteration: Optional[Callable[[IterationArtifacts, IterationReport], None]] = None,
) -> LoopResult:
    """Snapshots -> mesh adaptation -> registration -> weak greedy, ``cfg.iterations`` times.

    A failing phase raises PhaseError carrying the report of the completed iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    test_params = cfg.box.sample(cfg.n_test, np.random.default_rng(cfg.seed))
    train = cfg.box.grid(cfg.train_shape)
    grid_gr = cfg.box.grid(cfg.greedy_shape)
    report = RunReport(cfg.accelerated, cfg.seed, test_params)
    artifacts: List[IterationArtifacts] = []
    mesh = build_uniform_mesh(cfg.problem.L, cfg.n_elements, cfg.degree, cfg.quadrature_points)
    previous: Optional[IterationArtifacts] = None

    for k in range(1, cfg.iterations + 1):
        timer = PhaseTimer()
        it = IterationReport(k, mesh.n_elements)
        phase = "snapshots"
        try:
            with timer.phase("snapshots"):
                if previous is not None:
                    snapshots = rom_snapshots(previous.rom, train, cfg, previous.geometry)
                elif cfg.bootstrap:
                    identity = Geometry(mesh)
                    boot = weak_greedy(grid_gr, identity, cfg, cfg.initial_grid(), rng=rng)
                    snapshots = rom_snapshots(boot.rom, train, cfg, identity)
                else:
                    snapshots = parallel_map(lambda mu: solve_hf(mu, Geometry(mesh), cfg), list(train), cfg.jobs)
            it.hf_fallbacks = sum(1 for s in snapshots if s.source == "hf") if previous is not None or cfg.bootstrap else 0
            logger.info(f"iteration {k}: {len(snapshots)} snapshots for registration")

            if k > 1:
                phase = "mesh_adaptation"
                with timer.phase("mesh_adaptation"):
                    target = int(round(previous.geometry.mesh.n_elements * cfg.mesh_growth))
                    mesh = _adapt_mesh(snapshots, previous.geometry.mesh, target, cfg)
                it.n_elements = mesh.n_elements
                logger.info(f"iteration {k}: adapted mesh with {mesh.n_elements} elements")

            phase = "registration"
            with timer.phase("registration"):
                warm = None
                if cfg.accelerated and previous is not None and previous.geometry.registration is not None:
                    warm = previous.geometry.registration.raw_coefficients
                registration, it.shocks = register_snapshots(snapshots, mesh, cfg, warm)
            geometry = Geometry(mesh, registration)
            l2, h1 = build_gram_matrices(mesh, eta=cfg.br2_eta)
            unregistered = [_transfer(s.physical, mesh) for s in snapshots]
            registered = [_transfer(s.physical, geometry.mesh_for(s.mu)).with_mesh(mesh) for s in snapshots]
            it.pod_unregistered = _normalized_pod_energies(unregistered, l2)
            it.pod_registered = _normalized_pod_energies(registered, l2)

            phase = "greedy"
            initial = cfg.initial_grid()
            warm_start = None
            by_mu = {tuple(np.round(s.mu, 12)): s for s in snapshots}
            if cfg.accelerated and all(s.alpha is not None for s in snapshots):
                picks = strong_greedy([s.alpha for s in snapshots], cfg.n0).indices
                initial = train[picks]

                def warm_start(mu):
                    snap = by_mu.get(tuple(np.round(mu, 12)))
                    return None if snap is None else snap.physical

            start = time.perf_counter()
            greedy = weak_greedy(grid_gr, geometry, cfg, initial, (l2, h1), warm_start, timer, rng)
            timer.seconds["greedy_overhead"] += time.perf_counter() - start - timer.seconds["greedy_hf"]
            rom = greedy.rom
            if cfg.accelerated:
                dataset = initial_condition_dataset(rom, snapshots, cfg.init_dataset_points, rng)
                rom = dataclasses.replace(rom, training_params=train.copy(), training_coords=dataset)

            it.rob_size = rom.n
            it.converged = greedy.converged
            it.greedy = greedy.history
            it.eq_support = (rom.weights.nnz_e, rom.weights.nnz_f)
            for snap in greedy.snapshots:
                (it.ptc_warm if snap.warm else it.ptc_cold).append(snap.ptc_iterations)

            phase = "evaluation"
            with timer.phase("evaluation"):
                it.metrics = evaluate(rom, test_params, cfg)
            it.profiles = shock_profiles(snapshots, geometry, cfg.problem)
        except LaromError as exc:
            it.costs = dict(timer.seconds)
            report.iterations.append(it)
            raise PhaseError(f"iteration {k} {phase}", exc, report) from exc

        it.costs = dict(timer.seconds)
        report.iterations.append(it)
        current = IterationArtifacts(k, geometry, rom, snapshots)
        artifacts.append(current)
        logger.info(
            f"iteration {k}: n={it.rob_size} N_e={it.n_elements} median E_hf={it.median_e_hf:.3e} "
            f"max eta={it.max_eta:.2f} median E_inf={it.median_e_inf:.3e} offline={it.offline_seconds:.1f}s"
        )
        if on_iteration is not None:
            on_iteration(current, it)
        previous = current
    return LoopResult(report, artifacts)
