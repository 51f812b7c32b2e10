"""Riemannian metric toolkit on 2D triangle meshes.

Features:
- metric lengths and volumes with vertex-wise linear tensor interpolation
- element metric extraction from triangle geometry
- two-pass Clement Hessian recovery of P1 fields
- multiscale (L^p) metric with prescribed complexity and size truncation
- metric intersection by simultaneous reduction, left-folded over parameters
- mark-then-refine scaling of element metrics, vertex averaging
- mesh quality of deformed meshes and a unit-mesh edge length checker
"""

import functools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateTriangleError,
    InvalidArgumentError,
    InvalidMeshError,
    InvalidMetricError,
    OutOfDomainError,
)
from .registration import MeshQuality, f_msh

logger = logging.getLogger(__name__)

GAUSS_POINTS = 5
REFINE_FACTOR = 4.0
LOCATE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (n_v, 2)
    triangles: np.ndarray  # (n_t, 3) vertex indices

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float)
        triangles = np.array(self.triangles, dtype=int)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise InvalidMeshError(f"vertices must have shape (n, 2), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or triangles.shape[0] == 0:
            raise InvalidMeshError(f"triangles must have shape (n, 3), got {triangles.shape}")
        if triangles.min() < 0 or triangles.max() >= vertices.shape[0]:
            raise InvalidMeshError("triangle references a vertex that does not exist")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @functools.cached_property
    def jacobians(self) -> np.ndarray:
        """Columns are the edges v1 - v0 and v2 - v0, shape (n_t, 2, 2)."""
        v = self.vertices[self.triangles]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)

    @functools.cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.abs(np.linalg.det(self.jacobians))

    @functools.cached_property
    def area(self) -> float:
        return float(self.areas.sum())

    @functools.cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (i < j), shape (n_edges, 2)."""
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    @functools.cached_property
    def incidence(self) -> np.ndarray:
        """Triangles per vertex."""
        return np.bincount(self.triangles.ravel(), minlength=self.n_vertices)

    def same_as(self, other: "TriMesh") -> bool:
        return self is other or (
            self.vertices.shape == other.vertices.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )

    def barycentric(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Containing triangle and barycentric weights of each point.

        Points on shared edges take the lowest-index triangle.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inv = np.linalg.inv(self.jacobians)
        origin = self.vertices[self.triangles[:, 0]]
        local = np.einsum("tij,ptj->pti", inv, pts[:, None, :] - origin[None, :, :])
        lam = np.concatenate([1.0 - local.sum(axis=2, keepdims=True), local], axis=2)
        inside = np.all(lam >= -LOCATE_TOL, axis=2)
        found = inside.any(axis=1)
        if not found.all():
            bad = pts[np.argmin(found)]
            raise OutOfDomainError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the mesh")
        tri = np.argmax(inside, axis=1)
        return tri, lam[np.arange(pts.shape[0]), tri]


def structured_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> TriMesh:
    """Rectangle split into nx*ny cells, each cut along its (0,0)-(1,1) diagonal."""
    if nx < 1 or ny < 1:
        raise InvalidArgumentError(f"cell counts must be positive, got ({nx}, {ny})")
    x, y = np.meshgrid(np.linspace(0.0, lx, nx + 1), np.linspace(0.0, ly, ny + 1), indexing="xy")
    vertices = np.column_stack([x.ravel(), y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    v00 = (j * (nx + 1) + i).ravel()
    v10, v01, v11 = v00 + 1, v00 + nx + 1, v00 + nx + 2
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    return TriMesh(vertices, np.concatenate([lower, upper]))


# --- SPD tensors -----------------------------------------------------------------


def check_spd(M, what: str = "metric") -> np.ndarray:
    """Validate a stack of 2x2 tensors; returns the symmetrized array."""
    M = np.asarray(M, dtype=float)
    if M.shape[-2:] != (2, 2):
        raise InvalidMetricError(f"{what} must be 2x2, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidMetricError(f"{what} has non-finite entries")
    scale = np.maximum(np.abs(M).max(axis=(-2, -1)), 1e-300)
    if np.any(np.abs(M[..., 0, 1] - M[..., 1, 0]) > 1e-10 * scale):
        raise InvalidMetricError(f"{what} is not symmetric")
    sym = 0.5 * (M + np.swapaxes(M, -1, -2))
    if np.any(np.linalg.eigvalsh(sym)[..., 0] <= 0.0):
        raise InvalidMetricError(f"{what} is not positive definite")
    return sym


def from_eigen(eigenvalues, vectors) -> np.ndarray:
    """sum_i lambda_i n_i n_i^T with n_i the columns of ``vectors``."""
    lam = np.asarray(eigenvalues, dtype=float)
    R = np.asarray(vectors, dtype=float)
    return np.einsum("...ik,...k,...jk->...ij", R, lam, R)


def sizes(M) -> Tuple[np.ndarray, np.ndarray]:
    """Principal sizes h_i = lambda_i^-1/2 and directions of SPD tensors."""
    lam, R = np.linalg.eigh(check_spd(M))
    return lam ** -0.5, R


@dataclass(frozen=True, eq=False)
class MetricField2D:
    mesh: TriMesh
    tensors: np.ndarray  # (n_v, 2, 2)

    def __post_init__(self):
        tensors = np.asarray(self.tensors, dtype=float)
        if tensors.shape != (self.mesh.n_vertices, 2, 2):
            raise InvalidArgumentError(
                f"need one 2x2 tensor per vertex ({self.mesh.n_vertices}), got shape {tensors.shape}"
            )
        object.__setattr__(self, "tensors", check_spd(tensors))

    def at(self, points) -> np.ndarray:
        """Linearly interpolated tensors at points, shape (n, 2, 2)."""
        tri, lam = self.mesh.barycentric(points)
        return np.einsum("pk,pkij->pij", lam, self.tensors[self.mesh.triangles[tri]])

    def scaled(self, factor: float) -> "MetricField2D":
        return MetricField2D(self.mesh, factor * self.tensors)


@dataclass
class MultiscaleConfig:
    N: float
    p: float = 1.0
    h_min: float = 1e-4
    h_max: float = 1e2

    def __post_init__(self):
        if not self.N > 0:
            raise InvalidArgumentError(f"complexity must be positive, got {self.N}")
        if not self.p >= 1:
            raise InvalidArgumentError(f"L^p index must be >= 1, got {self.p}")
        if not 0 < self.h_min <= self.h_max:
            raise InvalidArgumentError(f"invalid size bounds [{self.h_min}, {self.h_max}]")

    @property
    def eigenvalue_bounds(self) -> Tuple[float, float]:
        return self.h_max**-2, self.h_min**-2


# --- lengths and volumes ---------------------------------------------------------


def _gauss_unit(points: int = GAUSS_POINTS) -> Tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(points)
    return 0.5 * (t + 1.0), 0.5 * w


def metric_length(x, y, field: MetricField2D) -> float:
    """int_0^1 sqrt((y-x)^T M((1-t)x + ty) (y-x)) dt."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t, w = _gauss_unit()
    d = y - x
    M = field.at(x[None, :] + t[:, None] * d[None, :])
    return float(w @ np.sqrt(np.einsum("i,qij,j->q", d, M, d)))


def edge_lengths(field: MetricField2D) -> np.ndarray:
    """Metric length of every mesh edge; tensors vary linearly along an edge."""
    edges = field.mesh.edges
    a, b = field.tensors[edges[:, 0]], field.tensors[edges[:, 1]]
    d = field.mesh.vertices[edges[:, 1]] - field.mesh.vertices[edges[:, 0]]
    t, w = _gauss_unit()
    M = (1.0 - t)[None, :, None, None] * a[:, None] + t[None, :, None, None] * b[:, None]
    return np.einsum("q,eq->e", w, np.sqrt(np.einsum("ei,eqij,ej->eq", d, M, d)))


@dataclass
class UnitMeshReport:
    lengths: np.ndarray

    @property
    def min(self) -> float:
        return float(self.lengths.min())

    @property
    def median(self) -> float:
        return float(np.median(self.lengths))

    @property
    def max(self) -> float:
        return float(self.lengths.max())

    def is_unit(self, lower: float = 1.0 / math.sqrt(2.0), upper: float = math.sqrt(2.0)) -> bool:
        return bool(np.all((self.lengths >= lower) & (self.lengths <= upper)))


def unit_mesh_report(field: MetricField2D) -> UnitMeshReport:
    report = UnitMeshReport(edge_lengths(field))
    logger.info(f"edge metric lengths: min {report.min:.3f}, median {report.median:.3f}, max {report.max:.3f}")
    return report


def _edge_midpoint_rule(mesh: TriMesh, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Edge-midpoint values (n_t, 3, ...) and per-triangle weights |T|/3."""
    t = mesh.triangles
    mids = 0.5 * (values[t] + values[np.roll(t, -1, axis=1)])
    return mids, mesh.areas / 3.0


def metric_volume(field: MetricField2D, triangles: Optional[Sequence[int]] = None) -> float:
    """int sqrt(det M) over the given triangles (all by default), edge-midpoint quadrature."""
    mesh = field.mesh
    mids, w = _edge_midpoint_rule(mesh, field.tensors)
    per_triangle = w * np.sqrt(np.linalg.det(mids)).sum(axis=1)
    if triangles is None:
        return float(per_triangle.sum())
    return float(per_triangle[np.asarray(triangles, dtype=int)].sum())


# --- element metrics -------------------------------------------------------------


def mesh_to_metric(vertices) -> np.ndarray:
    """Tensor with the longest edge of metric length 1 and the matching height of length 1.

    ``vertices`` is (3, 2) for one triangle or (n, 3, 2) for a stack.
    """
    v = np.asarray(vertices, dtype=float)
    single = v.ndim == 2
    v = v[None] if single else v
    edges = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    lengths = np.linalg.norm(edges, axis=2)
    longest = np.argmax(lengths, axis=1)
    rows = np.arange(v.shape[0])
    ell = lengths[rows, longest]
    e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    twice_area = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    if np.any(twice_area <= 1e-14 * np.maximum(ell, 1e-300) ** 2):
        raise DegenerateTriangleError("triangle has zero area")
    n1 = edges[rows, longest] / ell[:, None]
    n2 = np.column_stack([-n1[:, 1], n1[:, 0]])
    height = twice_area / ell
    lam = np.column_stack([ell**-2, height**-2])
    M = from_eigen(lam, np.stack([n1, n2], axis=2))
    return M[0] if single else M


def element_metrics(mesh: TriMesh) -> np.ndarray:
    return mesh_to_metric(mesh.vertices[mesh.triangles])


def vertex_average(mesh: TriMesh, element_values: np.ndarray) -> np.ndarray:
    """Simple mean over incident triangles; isolated vertices are an error."""
    counts = mesh.incidence
    if np.any(counts == 0):
        raise InvalidMeshError(f"vertex {int(np.argmin(counts))} belongs to no triangle")
    shape = (mesh.n_vertices,) + element_values.shape[1:]
    total = np.zeros(shape)
    for k in range(3):
        np.add.at(total, mesh.triangles[:, k], element_values)
    return total / counts.reshape((-1,) + (1,) * (total.ndim - 1))


# --- Hessian-based metrics -------------------------------------------------------


def _element_gradients(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    """Gradient of the P1 interpolant per triangle; ``values`` (n_v, ...) -> (n_t, ..., 2)."""
    t = mesh.triangles
    du = np.stack([values[t[:, 1]] - values[t[:, 0]], values[t[:, 2]] - values[t[:, 0]]], axis=-1)
    inv_t = np.swapaxes(np.linalg.inv(mesh.jacobians), 1, 2)  # B^-T
    if du.ndim == 2:
        return np.einsum("tij,tj->ti", inv_t, du)
    return np.einsum("tij,tcj->tci", inv_t, du)


def _clement_average(mesh: TriMesh, element_values: np.ndarray) -> np.ndarray:
    counts = mesh.incidence
    if np.any(counts == 0):
        raise InvalidMeshError(f"vertex {int(np.argmin(counts))} belongs to no triangle")
    shape = (mesh.n_vertices,) + element_values.shape[1:]
    weighted = element_values * mesh.areas.reshape((-1,) + (1,) * (element_values.ndim - 1))
    total, area = np.zeros(shape), np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(total, mesh.triangles[:, k], weighted)
        np.add.at(area, mesh.triangles[:, k], mesh.areas)
    return total / area.reshape((-1,) + (1,) * (total.ndim - 1))


def recover_gradient(mesh: TriMesh, values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_vertices,):
        raise InvalidArgumentError(f"need one value per vertex ({mesh.n_vertices}), got {values.shape}")
    return _clement_average(mesh, _element_gradients(mesh, values))


def hessian_recovery(mesh: TriMesh, values) -> np.ndarray:
    """Per-vertex symmetric Hessians (n_v, 2, 2) of a P1 field by two Clement passes."""
    grad = recover_gradient(mesh, values)
    H = _clement_average(mesh, _element_gradients(mesh, grad))
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def _absolute(H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lam, R = np.linalg.eigh(0.5 * (H + np.swapaxes(H, -1, -2)))
    return np.abs(lam), R


def multiscale_metric(mesh: TriMesh, hessians, cfg: MultiscaleConfig) -> MetricField2D:
    """M = N (int det|H|^{p/(2p+2)})^-1 det|H|^{-1/(2p+2)} |H|, eigenvalues clipped to the size bounds."""
    H = np.asarray(hessians, dtype=float)
    if H.shape != (mesh.n_vertices, 2, 2):
        raise InvalidArgumentError(f"need one Hessian per vertex, got shape {H.shape}")
    lam, R = _absolute(H)
    lo, hi = cfg.eigenvalue_bounds
    top = float(lam.max())
    if not top > 0:
        logger.warning("Hessian vanishes identically; using a uniform isotropic metric")
        level = np.clip(cfg.N / mesh.area, lo, hi)
        return MetricField2D(mesh, np.broadcast_to(level * np.eye(2), (mesh.n_vertices, 2, 2)).copy())

    lam = np.maximum(lam, 1e-12 * top)
    det = lam.prod(axis=1)
    density = det ** (cfg.p / (2.0 * cfg.p + 2.0))
    mids, w = _edge_midpoint_rule(mesh, density)
    normalization = cfg.N / float((w[:, None] * mids).sum())
    scaled = normalization * det[:, None] ** (-1.0 / (2.0 * cfg.p + 2.0)) * lam
    clipped = np.clip(scaled, lo, hi)
    if np.any(clipped != scaled):
        logger.debug(f"multiscale metric: {int(np.sum(clipped != scaled))} eigenvalues truncated")
    return MetricField2D(mesh, from_eigen(clipped, R))


# --- intersection ----------------------------------------------------------------


def intersect(A, B) -> np.ndarray:
    """Metric whose unit ball is the largest ellipse inside both unit balls.

    With A = L L^T and L^-1 B L^-T = Q diag(w) Q^T the result is
    L Q diag(max(1, w)) Q^T L^T. Works on stacks of tensors.
    """
    A = check_spd(A, "first metric")
    B = check_spd(B, "second metric")
    L = np.linalg.cholesky(A)
    Linv = np.linalg.inv(L)
    C = Linv @ B @ np.swapaxes(Linv, -1, -2)
    w, Q = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
    LQ = L @ Q
    M = from_eigen(np.maximum(w, 1.0), LQ)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def parametric_intersection(fields: Sequence[MetricField2D]) -> MetricField2D:
    """((M_1 cap M_2) cap M_3) ... in input order."""
    if not fields:
        raise InvalidArgumentError("need at least one metric field")
    mesh = fields[0].mesh
    result = fields[0].tensors
    for other in fields[1:]:
        if not other.mesh.same_as(mesh):
            raise InvalidArgumentError("metric fields live on different meshes")
        result = intersect(result, other.tensors)
    return MetricField2D(mesh, result)


# --- mark-then-refine ------------------------------------------------------------


def mark_elements(indicators, gamma_ref: float) -> np.ndarray:
    """Indices of the ceil(gamma_ref N_e) largest indicators; ties go to the lower index.

    A 2D array is reduced by its maximum over parameters first.
    """
    if not 0.0 < gamma_ref < 1.0:
        raise InvalidArgumentError(f"refinement fraction must lie in (0, 1), got {gamma_ref}")
    eta = np.asarray(indicators, dtype=float)
    if eta.ndim == 2:
        eta = eta.max(axis=0)
    count = max(1, math.ceil(gamma_ref * eta.size))
    order = np.argsort(-eta, kind="stable")
    return np.sort(order[:count])


def mark_then_refine_metric(indicators, mesh: TriMesh, gamma_ref: float) -> MetricField2D:
    eta = np.asarray(indicators, dtype=float)
    if eta.shape[-1] != mesh.n_triangles:
        raise InvalidArgumentError(f"need one indicator per triangle ({mesh.n_triangles}), got {eta.shape}")
    marked = mark_elements(eta, gamma_ref)
    metrics = element_metrics(mesh)
    metrics[marked] *= REFINE_FACTOR
    logger.info(f"marked {marked.size} of {mesh.n_triangles} elements for refinement")
    return MetricField2D(mesh, vertex_average(mesh, metrics))


def mesh_quality(reference: TriMesh, deformed_vertices, kappa_msh: float = 10.0) -> MeshQuality:
    deformed = np.asarray(deformed_vertices, dtype=float)
    if deformed.shape != reference.vertices.shape:
        raise InvalidArgumentError("deformed mesh must have the reference vertex count")
    return f_msh(reference.vertices, deformed, reference.triangles, kappa_msh)
