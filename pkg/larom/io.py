"""Text and binary dump formats.

Features:
- 1D mesh / state dumps (``# L=<L> p=<p> Ne=<Ne>`` header, one value per line)
- PTC log, Mach profile, map dump, EQ weight files
- ROM artifact directories (binary little-endian float64 matrices with text headers)
- run report tables (metrics.csv, pod_eigs.csv, costs.csv, ...) and shock_profiles.dat
- 2D triangle meshes, vertex fields and metric files
"""

import csv
import logging
import re
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .euler1d import N_VARS, NozzleProblem, PtcRecord
from .hyperreduction import EqWeights, ReducedMesh
from .mesh1d import Mesh1D, StateField
from .metric2d import MetricField2D, TriMesh
from .mor import ReducedBasis, RomArtifact, TestSpace
from .registration import MapBasis, MapRegressor, ParametricRegistration, build_map_basis

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MATRIX_MAGIC = "# larom-matrix"
_TOKEN = re.compile(r"[,\s]+")


# --- parsing helpers -----------------------------------------------------------


def _lines(path: PathLike) -> Iterator[Tuple[int, str]]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                yield lineno, line.strip()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path=path) from exc


def _split(line: str) -> List[str]:
    return [t for t in _TOKEN.split(line) if t]


def _parse_header(line: str) -> Dict[str, str]:
    return dict(item.split("=", 1) for item in line.lstrip("#").split() if "=" in item)


def _read_table(path: PathLike) -> Tuple[Dict[str, str], List[Tuple[int, List[str]]]]:
    """First '#' line with key=value pairs, then the tokenized data lines."""
    header: Dict[str, str] = {}
    rows: List[Tuple[int, List[str]]] = []
    for lineno, line in _lines(path):
        if not line:
            continue
        if line.startswith("#"):
            if not header and not rows:
                header = _parse_header(line)
            continue
        rows.append((lineno, _split(line)))
    return header, rows


def _header_value(header: Dict[str, str], key: str, kind, path: PathLike):
    if key not in header:
        raise ParseError(f"header is missing '{key}='", line=1, path=path)
    try:
        return kind(header[key])
    except ValueError as exc:
        raise ParseError(f"bad header value {key}={header[key]!r}", line=1, path=path) from exc


def _floats(tokens: Sequence[str], lineno: int, path: PathLike) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"expected numbers, got {' '.join(tokens)!r}", line=lineno, path=path) from exc


def _ints(tokens: Sequence[str], lineno: int, path: PathLike) -> List[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"expected integer indices, got {' '.join(tokens)!r}", line=lineno, path=path) from exc


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_lines(path: PathLike, lines: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    return path


def write_csv(path: PathLike, fieldnames: Sequence[str], rows: Sequence[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=list(fieldnames))
        writer.writeheader()
        writer.writerows(rows)
    logger.debug(f"wrote {len(rows)} rows to {path}")
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    if not Path(path).exists():
        raise ParseError("file not found", path=path)
    with open(path, "r", newline="", encoding="utf-8") as csvfile:
        return list(csv.DictReader(csvfile))


# --- 1D meshes and fields ------------------------------------------------------


def _mesh_header(mesh: Mesh1D) -> str:
    header = f"# L={_fmt(mesh.L)} p={mesh.degree} Ne={mesh.n_elements}"
    if mesh.n_quad is not None:
        header += f" q={mesh.n_quad}"
    return header


def write_mesh(path: PathLike, mesh: Mesh1D) -> Path:
    return _write_lines(path, [_mesh_header(mesh)] + [_fmt(x) for x in mesh.nodes])


def read_mesh(path: PathLike) -> Mesh1D:
    header, rows = _read_table(path)
    degree = _header_value(header, "p", int, path)
    n_elements = _header_value(header, "Ne", int, path)
    n_quad = int(header["q"]) if "q" in header else None
    nodes = []
    for lineno, tokens in rows:
        if len(tokens) != 1:
            raise ParseError(f"expected one node position, got {len(tokens)} values", line=lineno, path=path)
        nodes.extend(_floats(tokens, lineno, path))
    if len(nodes) != n_elements + 1:
        raise ParseError(f"header announces Ne={n_elements} but file has {len(nodes)} nodes", path=path)
    try:
        return Mesh1D(np.array(nodes), degree, n_quad)
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), path=path) from exc


def write_state(path: PathLike, field: StateField) -> Path:
    header = f"{_mesh_header(field.mesh)} D={field.n_vars}"
    return _write_lines(path, [header] + [_fmt(c) for c in field.coeffs])


def read_state(path: PathLike, mesh: Mesh1D) -> StateField:
    header, rows = _read_table(path)
    n_vars = _header_value(header, "D", int, path)
    if _header_value(header, "Ne", int, path) != mesh.n_elements or _header_value(header, "p", int, path) != mesh.degree:
        raise ParseError("field header does not match the mesh", line=1, path=path)
    coeffs = [v for lineno, tokens in rows for v in _floats(tokens, lineno, path)]
    if len(coeffs) != mesh.n_dofs(n_vars):
        raise ParseError(f"expected {mesh.n_dofs(n_vars)} coefficients, got {len(coeffs)}", path=path)
    return StateField(mesh, np.array(coeffs), n_vars)


def write_ptc_log(path: PathLike, history: Sequence[PtcRecord]) -> Path:
    return _write_lines(path, ["iter, cfl, residual_norm"] + [rec.as_line() for rec in history])


def write_mach_profile(path: PathLike, mach: StateField) -> Path:
    x = mach.mesh.lagrange_points.ravel()
    ma = mach.values[0].ravel()
    return write_csv(path, ["x", "mach"], [{"x": _fmt(a), "mach": _fmt(b)} for a, b in zip(x, ma)])


# --- maps ----------------------------------------------------------------------


def write_map(path: PathLike, basis: MapBasis, params=None, coefficients=None) -> Path:
    """Header, POD modes of the map space (m_hf rows), then ``A0, p0, a_1..a_m`` per parameter."""
    modes = basis.modes if basis.modes is not None else np.eye(basis.m_hf)
    lines = [f"# J={basis.J} m={modes.shape[1]} L={_fmt(basis.L)}"]
    lines += [", ".join(_fmt(v) for v in row) for row in modes]
    if params is not None:
        for mu, a in zip(np.atleast_2d(params), np.atleast_2d(coefficients)):
            lines.append(", ".join(_fmt(v) for v in (*mu, *a)))
    return _write_lines(path, lines)


def write_registration(path: PathLike, registration: ParametricRegistration) -> Path:
    return write_map(path, registration.basis, registration.params, registration.coefficients)


def read_map(path: PathLike) -> Tuple[MapBasis, np.ndarray, np.ndarray]:
    header, rows = _read_table(path)
    J = _header_value(header, "J", int, path)
    m = _header_value(header, "m", int, path)
    L = _header_value(header, "L", float, path) if "L" in header else 10.0
    full = build_map_basis(J, L)
    if len(rows) < full.m_hf:
        raise ParseError(f"expected {full.m_hf} mode rows, got {len(rows)}", path=path)
    modes = []
    for lineno, tokens in rows[: full.m_hf]:
        if len(tokens) != m:
            raise ParseError(f"mode row has {len(tokens)} entries, expected m={m}", line=lineno, path=path)
        modes.append(_floats(tokens, lineno, path))
    pairs = []
    for lineno, tokens in rows[full.m_hf :]:
        if len(tokens) != m + 2:
            raise ParseError(f"parameter line has {len(tokens)} entries, expected {m + 2}", line=lineno, path=path)
        pairs.append(_floats(tokens, lineno, path))
    table = np.array(pairs).reshape(-1, m + 2)
    return full.compress(np.array(modes)), table[:, :2], table[:, 2:]


def write_regressor(path: PathLike, regressor: MapRegressor) -> Path:
    lines = [
        f"# method={regressor.method} degree={regressor.degree} m={regressor.m}",
        "lower = " + ", ".join(_fmt(v) for v in regressor.lower),
        "upper = " + ", ".join(_fmt(v) for v in regressor.upper),
    ]
    if regressor.coef is not None:
        lines += [", ".join(_fmt(v) for v in row) for row in regressor.coef]
    return _write_lines(path, lines)


def read_regressor(path: PathLike, params: np.ndarray, values: np.ndarray) -> MapRegressor:
    """Regressor coefficients; the (mu, a) training pairs come from the map dump."""
    header, rows = _read_table(path)
    degree = _header_value(header, "degree", int, path)
    method = header.get("method", "polynomial")
    bounds = {}
    coef = []
    for lineno, tokens in rows:
        if tokens and tokens[0] in ("lower", "upper"):
            bounds[tokens[0]] = np.array(_floats([t for t in tokens[1:] if t != "="], lineno, path))
        else:
            coef.append(_floats(tokens, lineno, path))
    if set(bounds) != {"lower", "upper"}:
        raise ParseError("regressor file needs 'lower =' and 'upper =' lines", path=path)
    coef_array = np.array(coef) if method == "polynomial" else None
    if coef_array is not None and coef_array.shape[0] != (degree + 1) ** 2:
        raise ParseError(f"expected {(degree + 1) ** 2} coefficient rows, got {coef_array.shape[0]}", path=path)
    return MapRegressor(params, values, bounds["lower"], bounds["upper"], degree, coef_array)


# --- EQ weights and reduced mesh -----------------------------------------------


def write_weights(path: PathLike, weights: np.ndarray) -> Path:
    """``index, weight`` for every nonzero weight."""
    nz = np.nonzero(weights)[0]
    return _write_lines(path, ["# index, weight"] + [f"{i}, {_fmt(weights[i])}" for i in nz])


def read_weights(path: PathLike, size: int) -> np.ndarray:
    _, rows = _read_table(path)
    out = np.zeros(size)
    for lineno, tokens in rows:
        if len(tokens) != 2:
            raise ParseError("expected 'index, weight'", line=lineno, path=path)
        idx = _ints(tokens[:1], lineno, path)[0]
        if not 0 <= idx < size:
            raise ParseError(f"index {idx} outside [0, {size})", line=lineno, path=path)
        out[idx] = _floats(tokens[1:], lineno, path)[0]
    return out


def write_eq_weights(directory: PathLike, weights: EqWeights) -> None:
    directory = Path(directory)
    write_weights(directory / "eq_elem.txt", weights.rho_e)
    write_weights(directory / "eq_facet.txt", weights.rho_f)


def read_eq_weights(directory: PathLike, mesh: Mesh1D) -> EqWeights:
    directory = Path(directory)
    return EqWeights(
        read_weights(directory / "eq_elem.txt", mesh.n_elements),
        read_weights(directory / "eq_facet.txt", mesh.n_facets),
    )


_REDUCED_KEYS = ("elements", "facets", "sampled", "nodes")


def write_reduced_mesh(path: PathLike, reduced: ReducedMesh) -> Path:
    return _write_lines(
        path, [f"{key} = " + ", ".join(str(int(i)) for i in getattr(reduced, key)) for key in _REDUCED_KEYS]
    )


def read_reduced_mesh(path: PathLike) -> ReducedMesh:
    found = {}
    for lineno, line in _lines(path):
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition("=")
        key = key.strip()
        if not sep or key not in _REDUCED_KEYS:
            raise ParseError(f"expected one of {', '.join(_REDUCED_KEYS)}", line=lineno, path=path)
        found[key] = np.array(_ints(_split(rest), lineno, path), dtype=int)
    missing = [k for k in _REDUCED_KEYS if k not in found]
    if missing:
        raise ParseError(f"missing index sets: {', '.join(missing)}", path=path)
    return ReducedMesh(**found)


# --- binary matrices -----------------------------------------------------------


def write_matrix(path: PathLike, matrix) -> Path:
    """Text header line with the dimensions, then little-endian float64 row-major data."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(f"{MATRIX_MAGIC} rows={A.shape[0]} cols={A.shape[1]} dtype=<f8\n".encode("ascii"))
        handle.write(np.ascontiguousarray(A, dtype="<f8").tobytes(order="C"))
    return path


def read_matrix(path: PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as handle:
            first = handle.readline().decode("ascii", errors="replace")
            payload = handle.read()
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path=path) from exc
    if not first.startswith(MATRIX_MAGIC):
        raise ParseError("not a matrix file", line=1, path=path)
    header = _parse_header(first)
    rows = _header_value(header, "rows", int, path)
    cols = _header_value(header, "cols", int, path)
    if len(payload) != 8 * rows * cols:
        raise ParseError(f"expected {rows}x{cols} float64 values, got {len(payload)} bytes", path=path)
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)


# --- problem description -------------------------------------------------------


def write_problem(path: PathLike, problem: NozzleProblem) -> Path:
    return _write_lines(path, [f"{f.name} = {getattr(problem, f.name)}" for f in fields(problem)])


def read_problem(path: PathLike) -> NozzleProblem:
    kinds = {f.name: f.type for f in fields(NozzleProblem)}
    values = {}
    for lineno, line in _lines(path):
        if not line or line.startswith("#"):
            continue
        key, sep, raw = (part.strip() for part in line.partition("="))
        if not sep or key not in kinds:
            raise ParseError(f"unknown problem key {key!r}", line=lineno, path=path)
        if raw == "None":
            values[key] = None
        elif key == "isentropic_totals":
            values[key] = raw == "True"
        else:
            values[key] = _floats([raw], lineno, path)[0]
    return NozzleProblem(**values)


# --- ROM artifacts -------------------------------------------------------------


def save_rom(directory: PathLike, rom: RomArtifact) -> Path:
    """Directory with every array the online solve needs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mesh(directory / "mesh.dat", rom.mesh)
    write_problem(directory / "problem.txt", rom.problem)
    write_matrix(directory / "trial.bin", rom.trial.Z)
    write_matrix(directory / "eigenvalues.bin", rom.trial.eigenvalues)
    write_matrix(directory / "test.bin", rom.test.Psi)
    write_matrix(directory / "training_params.bin", rom.training_params)
    write_matrix(directory / "training_coords.bin", rom.training_coords)
    write_eq_weights(directory, rom.weights)
    write_reduced_mesh(directory / "reduced_mesh.txt", rom.reduced_mesh)
    if rom.map_basis is not None and rom.map_regressor is not None:
        write_map(directory / "map.dat", rom.map_basis, rom.map_regressor.params, rom.map_regressor.values)
        write_regressor(directory / "regressor.txt", rom.map_regressor)
    logger.info(f"saved ROM (n={rom.n}) to {directory}")
    return directory


def load_rom(directory: PathLike) -> RomArtifact:
    directory = Path(directory)
    if not directory.is_dir():
        raise ParseError("ROM directory not found", path=directory)
    mesh = read_mesh(directory / "mesh.dat")
    Z = read_matrix(directory / "trial.bin")
    if Z.shape[0] != mesh.n_dofs(N_VARS):
        raise ParseError(f"trial basis has {Z.shape[0]} rows, mesh needs {mesh.n_dofs(N_VARS)}", path=directory)
    map_basis = map_regressor = None
    if (directory / "map.dat").exists():
        map_basis, params, values = read_map(directory / "map.dat")
        map_regressor = read_regressor(directory / "regressor.txt", params, values)
    return RomArtifact(
        trial=ReducedBasis(Z, read_matrix(directory / "eigenvalues.bin").ravel(), mesh),
        test=TestSpace(read_matrix(directory / "test.bin")),
        weights=read_eq_weights(directory, mesh),
        reduced_mesh=read_reduced_mesh(directory / "reduced_mesh.txt"),
        mesh=mesh,
        problem=read_problem(directory / "problem.txt"),
        training_params=read_matrix(directory / "training_params.bin"),
        training_coords=read_matrix(directory / "training_coords.bin"),
        map_basis=map_basis,
        map_regressor=map_regressor,
    )


# --- run report tables ---------------------------------------------------------

METRIC_FIELDS = ["iteration", "a0", "p0", "E_hf", "eta", "E_inf", "online_seconds"]
POD_FIELDS = ["iteration", "index", "registered", "unregistered"]
COST_FIELDS = ["phase", "seconds", "iteration"]
SHOCK_FIELDS = ["iteration", "a0", "p0", "x_shock", "x_mapped"]
GREEDY_FIELDS = ["iteration", "n", "a0", "p0", "indicator", "error"]
SUMMARY_FIELDS = [
    "iteration",
    "n_elements",
    "rob_size",
    "converged",
    "median_E_hf",
    "max_eta",
    "median_E_inf",
    "offline_seconds",
    "modes_registered",
    "modes_unregistered",
    "eq_elements",
    "eq_facets",
    "ptc_cold_mean",
    "ptc_warm_mean",
    "hf_fallbacks",
]


def metric_rows(records, iteration: int) -> List[Dict]:
    return [
        {
            "iteration": iteration,
            "a0": _fmt(r.mu[0]),
            "p0": _fmt(r.mu[1]),
            "E_hf": _fmt(r.e_hf),
            "eta": _fmt(r.eta),
            "E_inf": _fmt(r.e_inf),
            "online_seconds": f"{r.online_seconds:.6f}",
        }
        for r in records
    ]


def _mean(values: Sequence[int]) -> str:
    return f"{np.mean(values):.2f}" if len(values) else ""


def write_run_report(directory: PathLike, report) -> List[Path]:
    """metrics.csv, pod_eigs.csv, costs.csv, shocks.csv, greedy.csv, summary.csv, shock_profiles.dat."""
    directory = Path(directory)
    metrics, pods, costs, shocks, greedy, summary = [], [], [], [], [], []
    for it in report.iterations:
        k = it.iteration
        metrics += metric_rows(it.metrics, k)
        for i in range(max(it.pod_registered.size, it.pod_unregistered.size)):
            pods.append(
                {
                    "iteration": k,
                    "index": i + 1,
                    "registered": _fmt(it.pod_registered[i]) if i < it.pod_registered.size else "",
                    "unregistered": _fmt(it.pod_unregistered[i]) if i < it.pod_unregistered.size else "",
                }
            )
        costs += [{"phase": name, "seconds": f"{sec:.6f}", "iteration": k} for name, sec in it.costs.items()]
        shocks += [
            {"iteration": k, "a0": _fmt(s.mu[0]), "p0": _fmt(s.mu[1]), "x_shock": _fmt(s.physical), "x_mapped": _fmt(s.mapped)}
            for s in it.shocks
        ]
        greedy += [
            {"iteration": k, "n": g.n, "a0": _fmt(g.mu[0]), "p0": _fmt(g.mu[1]), "indicator": _fmt(g.indicator), "error": _fmt(g.error)}
            for g in it.greedy
        ]
        registered, unregistered = it.modes_for()
        summary.append(
            {
                "iteration": k,
                "n_elements": it.n_elements,
                "rob_size": it.rob_size,
                "converged": it.converged,
                "median_E_hf": _fmt(it.median_e_hf),
                "max_eta": _fmt(it.max_eta),
                "median_E_inf": _fmt(it.median_e_inf),
                "offline_seconds": f"{it.offline_seconds:.3f}",
                "modes_registered": registered,
                "modes_unregistered": unregistered,
                "eq_elements": it.eq_support[0],
                "eq_facets": it.eq_support[1],
                "ptc_cold_mean": _mean(it.ptc_cold),
                "ptc_warm_mean": _mean(it.ptc_warm),
                "hf_fallbacks": it.hf_fallbacks,
            }
        )
    written = [
        write_csv(directory / "metrics.csv", METRIC_FIELDS, metrics),
        write_csv(directory / "pod_eigs.csv", POD_FIELDS, pods),
        write_csv(directory / "costs.csv", COST_FIELDS, costs),
        write_csv(directory / "shocks.csv", SHOCK_FIELDS, shocks),
        write_csv(directory / "greedy.csv", GREEDY_FIELDS, greedy),
        write_csv(directory / "summary.csv", SUMMARY_FIELDS, summary),
    ]
    profiled = [it for it in report.iterations if it.profiles is not None]
    if profiled:
        written.append(write_shock_profiles(directory / "shock_profiles.dat", profiled[-1].profiles))
    return written


def write_shock_profiles(path: PathLike, profiles) -> Path:
    """Columns: x, then physical and reference density for each parameter."""
    labels = ["x"]
    for mu in profiles.mus:
        tag = f"A0={mu[0]:.4g},p0={mu[1]:.4g}"
        labels += [f"rho_phys[{tag}]", f"rho_ref[{tag}]"]
    lines = ["# " + " ".join(labels)]
    for j, x in enumerate(profiles.x):
        row = [x]
        for k in range(len(profiles.mus)):
            row += [profiles.physical[k, j], profiles.reference[k, j]]
        lines.append(" ".join(f"{v:.10e}" for v in row))
    return _write_lines(path, lines)


# --- 2D meshes, fields and metrics ---------------------------------------------


def write_tri_mesh(path: PathLike, mesh: TriMesh) -> Path:
    lines = [f"# dim=2 nv={mesh.n_vertices} nt={mesh.n_triangles}"]
    lines += [f"{_fmt(x)} {_fmt(y)}" for x, y in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in tri) for tri in mesh.triangles]
    return _write_lines(path, lines)


def read_tri_mesh(path: PathLike) -> TriMesh:
    """``# dim=2`` header, vertex lines ``x y``, then triangle lines ``i j k`` (0-based)."""
    header, rows = _read_table(path)
    if header.get("dim") != "2":
        raise ParseError("expected a '# dim=2' header", line=1, path=path)
    vertices, triangles = [], []
    for lineno, tokens in rows:
        if len(tokens) == 2:
            if triangles:
                raise ParseError("vertex line after triangle lines", line=lineno, path=path)
            vertices.append(_floats(tokens, lineno, path))
        elif len(tokens) == 3:
            tri = _ints(tokens, lineno, path)
            if min(tri) < 0 or max(tri) >= len(vertices):
                raise ParseError(f"triangle {tri} references a missing vertex", line=lineno, path=path)
            triangles.append(tri)
        else:
            raise ParseError(f"expected 2 (vertex) or 3 (triangle) values, got {len(tokens)}", line=lineno, path=path)
    for key, found in (("nv", len(vertices)), ("nt", len(triangles))):
        if key in header and int(header[key]) != found:
            raise ParseError(f"header announces {key}={header[key]} but file has {found}", line=1, path=path)
    if not triangles:
        raise ParseError("mesh has no triangles", path=path)
    return TriMesh(np.array(vertices), np.array(triangles))


def write_vertex_field(path: PathLike, values) -> Path:
    return _write_lines(path, ["# dim=2 field"] + [_fmt(v) for v in np.asarray(values, dtype=float)])


def read_vertex_field(path: PathLike, n_vertices: Optional[int] = None) -> np.ndarray:
    """One value per vertex, one per line."""
    _, rows = _read_table(path)
    values = []
    for lineno, tokens in rows:
        if len(tokens) != 1:
            raise ParseError(f"expected one value per line, got {len(tokens)}", line=lineno, path=path)
        values.extend(_floats(tokens, lineno, path))
    if n_vertices is not None and len(values) != n_vertices:
        raise ParseError(f"field has {len(values)} values, mesh has {n_vertices} vertices", path=path)
    return np.array(values)


def write_metric(path: PathLike, metric: MetricField2D) -> Path:
    lines = ["# x, y, m11, m12, m22"]
    for (x, y), M in zip(metric.mesh.vertices, metric.tensors):
        lines.append(", ".join(_fmt(v) for v in (x, y, M[0, 0], M[0, 1], M[1, 1])))
    return _write_lines(path, lines)


def read_metric(path: PathLike, mesh: TriMesh) -> MetricField2D:
    _, rows = _read_table(path)
    if len(rows) != mesh.n_vertices:
        raise ParseError(f"metric has {len(rows)} lines, mesh has {mesh.n_vertices} vertices", path=path)
    tensors = np.zeros((mesh.n_vertices, 2, 2))
    for i, (lineno, tokens) in enumerate(rows):
        if len(tokens) != 5:
            raise ParseError("expected 'x, y, m11, m12, m22'", line=lineno, path=path)
        _, _, m11, m12, m22 = _floats(tokens, lineno, path)
        tensors[i] = [[m11, m12], [m12, m22]]
    return MetricField2D(mesh, tensors)
