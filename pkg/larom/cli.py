#!/usr/bin/env python3
"""
larom command-line driver

Features:
- hf-solve: steady nozzle solution by pseudo-transient continuation
- register: HF snapshots on the training grid and the parametric shock-aligning map
- adapt-loop: the adaptive ROM training loop (basic or accelerated) with report tables
- rom-eval: evaluate a saved ROM directory on the seeded test set
- metric2d: Hessian-based multiscale metrics (optionally intersected) on triangle meshes
- report: render the csv tables of a run
"""

import contextlib
import dataclasses
import logging
import os
from pathlib import Path
from typing import Iterator, List, Optional

import click
import numpy as np
from rich import print as rprint
from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import io
from .config import RunConfig, load_config
from .errors import LaromError, PhaseError, PtcNonConvergenceError, UndefinedLocatorError
from .euler1d import mach_field, mass_flux_mismatch, ptc_solve
from .mesh1d import build_uniform_mesh, interpolate_field
from .metric2d import MultiscaleConfig, hessian_recovery, mesh_quality, multiscale_metric, parametric_intersection, unit_mesh_report
from .parallel import parallel_map
from .registration import shock_locator
from .training import Geometry, IterationArtifacts, IterationReport, adaptive_loop, evaluate, register_snapshots, solve_hf

logger = logging.getLogger(__name__)
console = Console()

LOG_FILE_ENV = "LAROM_LOG_FILE"
LOG_FILE_NAME = "larom.log"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)


def setup_logging(output_dir: Path, log_file: Optional[Path], verbose: bool) -> Path:
    """File handler in the output directory (or ``log_file``) plus stderr."""
    target = Path(log_file) if log_file else Path(output_dir) / LOG_FILE_NAME
    target.parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(target), logging.StreamHandler()],
        force=True,
    )
    return target


@contextlib.contextmanager
def reported_errors() -> Iterator[None]:
    try:
        yield
    except LaromError as exc:
        logger.error(str(exc))
        raise click.ClickException(str(exc)) from exc


def _spinner() -> Progress:
    return Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console)


def _parse_mu(ctx, param, value: str):
    try:
        parts = [float(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected A0,p0, got {value!r}") from None
    if len(parts) != 2:
        raise click.BadParameter(f"expected two comma-separated values, got {len(parts)}")
    return np.array(parts)


def _prepare(ctx: click.Context, config_path: Path, jobs: Optional[int] = None) -> RunConfig:
    with reported_errors():
        config = load_config(config_path)
    if jobs is not None:
        config.loop.jobs = jobs
    setup_logging(config.output_dir, ctx.obj.get("log_file"), ctx.obj.get("verbose", False))
    logger.debug(f"configuration loaded from {config_path}; output to {config.output_dir}")
    return config


def _fmt(value: float, spec: str = ".3e") -> str:
    return "-" if value is None or not np.isfinite(value) else format(value, spec)


# CLI Interface
@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.option(
    "--log-file",
    type=click.Path(dir_okay=False, path_type=Path),
    default=lambda: os.getenv(LOG_FILE_ENV),
    help=f"Log file (default: <output dir>/{LOG_FILE_NAME}, or ${LOG_FILE_ENV})",
)
@click.pass_context
def cli(ctx, verbose, log_file):
    """Registration-based adaptive model reduction for quasi-1D nozzle flows"""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    ctx.obj["log_file"] = log_file


@cli.command(name="hf-solve")
@click.option("--config", "config_path", required=True, type=EXISTING_FILE, help="Run configuration file")
@click.option("--mu", required=True, callback=_parse_mu, help="Parameter A0,p0")
@click.option(
    "--warm-start",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Directory of a previous hf-solve (mesh.dat + state.dat) used as initial guess",
)
@click.option("--cfl0", type=float, help="Initial CFL number (default from config)")
@click.option("--output", "-o", type=click.Path(file_okay=False, path_type=Path), help="Output directory")
@click.pass_context
def hf_solve(ctx, config_path, mu, warm_start, cfl0, output):
    """Solve the steady nozzle problem at one parameter"""
    config = _prepare(ctx, config_path)
    out = output or config.output_dir / f"hf-{mu[0]:g}-{mu[1]:g}"
    with reported_errors():
        problem = config.nozzle_problem(tuple(mu))
        if not problem.in_range():
            logger.warning(f"mu=({mu[0]}, {mu[1]}) lies outside the nozzle parameter box; solving anyway")
        d = config.discretization
        mesh = build_uniform_mesh(problem.L, d.n_elements, d.degree, d.quadrature_points)
        ptc_cfg = config.ptc_config(warm=warm_start is not None)
        if cfl0 is not None:
            ptc_cfg = dataclasses.replace(ptc_cfg, cfl0=cfl0)
        init = None
        if warm_start is not None:
            warm_mesh = io.read_mesh(warm_start / "mesh.dat")
            init = interpolate_field(io.read_state(warm_start / "state.dat", warm_mesh), mesh)

        rprint(Panel.fit(f"[bold blue]HF solve at A0={mu[0]:g}, p0={mu[1]:g}[/bold blue]", border_style="blue"))
        try:
            with _spinner() as progress:
                progress.add_task("Pseudo-transient continuation...", total=None)
                result = ptc_solve(mesh, problem, init, ptc_cfg)
        except PtcNonConvergenceError as exc:
            io.write_ptc_log(out / "ptc.log", exc.history)
            raise

        mach = mach_field(result.state, problem)
        io.write_mesh(out / "mesh.dat", mesh)
        io.write_state(out / "state.dat", result.state)
        io.write_ptc_log(out / "ptc.log", result.history)
        io.write_mach_profile(out / "mach.csv", mach)
        try:
            shock = f"{shock_locator(mach, config.registration.delta):.4f}"
        except UndefinedLocatorError:
            shock = "-"

    table = Table(title="HF solution")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("Elements", str(mesh.n_elements))
    table.add_row("Degree", str(mesh.degree))
    table.add_row("PTC iterations", str(result.iterations))
    table.add_row("Final residual", _fmt(result.history[-1].residual_norm if result.history else float("nan")))
    table.add_row("Max Mach", f"{float(mach.coeffs.max()):.4f}")
    table.add_row("Shock position", shock)
    table.add_row("Mass flux mismatch", _fmt(mass_flux_mismatch(result.state)))
    console.print(table)
    rprint(f"[blue]📁 Location: {out}[/blue]")


@cli.command()
@click.option("--config", "config_path", required=True, type=EXISTING_FILE, help="Run configuration file")
@click.option("--jobs", "-j", type=click.IntRange(min=1), help="Worker threads")
@click.pass_context
def register(ctx, config_path, jobs):
    """Register the training snapshots and write the parametric map"""
    config = _prepare(ctx, config_path, jobs)
    cfg = config.training_config()
    out = config.output_dir
    with reported_errors():
        mesh = build_uniform_mesh(cfg.problem.L, cfg.n_elements, cfg.degree, cfg.quadrature_points)
        train = cfg.box.grid(cfg.train_shape)
        geometry = Geometry(mesh)
        rprint(Panel.fit(f"[bold blue]Registering {len(train)} training parameters[/bold blue]", border_style="blue"))
        with _spinner() as progress:
            progress.add_task("HF snapshots...", total=None)
            snapshots = parallel_map(lambda mu: solve_hf(mu, geometry, cfg), list(train), cfg.jobs)
        with _spinner() as progress:
            progress.add_task("Parametric registration...", total=None)
            registration, records = register_snapshots(snapshots, mesh, cfg, None)
        io.write_mesh(out / "mesh.dat", mesh)
        io.write_registration(out / "map.dat", registration)
        io.write_csv(
            out / "shocks.csv",
            ["a0", "p0", "x_shock", "x_mapped"],
            [{"a0": r.mu[0], "p0": r.mu[1], "x_shock": r.physical, "x_mapped": r.mapped} for r in records],
        )

    table = Table(title=f"Shock positions (map space m={registration.m})")
    table.add_column("A0", style="cyan")
    table.add_column("p0", style="cyan")
    table.add_column("x* physical", style="yellow")
    table.add_column("x* mapped", style="green")
    for r in records[:10]:
        table.add_row(f"{r.mu[0]:.4f}", f"{r.mu[1]:.4f}", f"{r.physical:.4f}", f"{r.mapped:.4f}")
    console.print(table)
    spread = max(r.mapped for r in records) - min(r.mapped for r in records)
    rprint(f"[green]✅ Registered {int(registration.accepted.sum())}/{len(records)} parameters[/green]")
    rprint(f"[blue]Mapped shock spread {spread:.3e}; smallest element {mesh.h.min():.3e}[/blue]")
    if registration.failures:
        rprint(f"[yellow]⚠️  {len(registration.failures)} registrations skipped[/yellow]")


def _iteration_table(iterations: List[IterationReport]) -> Table:
    table = Table(title="Adaptive loop")
    for name, style in (
        ("it", "cyan"),
        ("N_e", "blue"),
        ("n", "blue"),
        ("median E_hf", "green"),
        ("max eta", "yellow"),
        ("median E_inf", "green"),
        ("modes reg/unreg", "magenta"),
        ("offline s", "yellow"),
    ):
        table.add_column(name, style=style)
    for it in iterations:
        reg, unreg = it.modes_for()
        table.add_row(
            str(it.iteration),
            str(it.n_elements),
            str(it.rob_size),
            _fmt(it.median_e_hf),
            _fmt(it.max_eta, ".2f"),
            _fmt(it.median_e_inf),
            f"{reg}/{unreg}",
            f"{it.offline_seconds:.1f}",
        )
    return table


@cli.command(name="adapt-loop")
@click.option("--config", "config_path", required=True, type=EXISTING_FILE, help="Run configuration file")
@click.option("--accelerated", is_flag=True, help="Use the accelerated variant (warm starts, ROM snapshots)")
@click.option("--iterations", type=click.IntRange(min=1), help="Number of adaptive iterations")
@click.option("--jobs", "-j", type=click.IntRange(min=1), help="Worker threads")
@click.pass_context
def adapt_loop(ctx, config_path, accelerated, iterations, jobs):
    """Run the adaptive ROM training loop"""
    config = _prepare(ctx, config_path, jobs)
    if accelerated:
        config.loop.accelerated = True
    if iterations is not None:
        config.loop.iterations = iterations
    out = config.output_dir
    mode = "accelerated" if config.loop.accelerated else "basic"
    rprint(Panel.fit(f"[bold blue]Adaptive loop ({mode}, {config.loop.iterations} iterations)[/bold blue]", border_style="blue"))

    def save_iteration(art: IterationArtifacts, it: IterationReport) -> None:
        target = out / f"iter{art.iteration}"
        io.write_mesh(target / "mesh.dat", art.geometry.mesh)
        if art.geometry.registration is not None:
            io.write_registration(target / "map.dat", art.geometry.registration)
        io.save_rom(target / "rom", art.rom)
        rprint(f"[green]✅ Iteration {it.iteration}: n={it.rob_size}, median E_hf={_fmt(it.median_e_hf)}[/green]")

    with reported_errors():
        try:
            with _spinner() as progress:
                progress.add_task("Training...", total=None)
                result = adaptive_loop(config.training_config(), on_iteration=save_iteration)
        except PhaseError as exc:
            if exc.report is not None:
                io.write_run_report(out, exc.report)
            raise
        written = io.write_run_report(out, result.report)

    console.print(_iteration_table(result.report.iterations))
    rprint(f"[blue]📁 Wrote {len(written)} report files to {out}[/blue]")


@cli.command(name="rom-eval")
@click.option("--config", "config_path", required=True, type=EXISTING_FILE, help="Run configuration file")
@click.option(
    "--artifact",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="ROM directory written by adapt-loop (iter<k>/rom)",
)
@click.option("--jobs", "-j", type=click.IntRange(min=1), help="Worker threads")
@click.pass_context
def rom_eval(ctx, config_path, artifact, jobs):
    """Evaluate a saved ROM on the seeded test set"""
    config = _prepare(ctx, config_path, jobs)
    cfg = config.training_config()
    with reported_errors():
        rom = io.load_rom(artifact)
        params = cfg.box.sample(cfg.n_test, np.random.default_rng(cfg.seed))
        rprint(Panel.fit(f"[bold blue]Evaluating ROM n={rom.n} on {len(params)} parameters[/bold blue]", border_style="blue"))
        with _spinner() as progress:
            progress.add_task("HF references and LSPG solves...", total=None)
            records = evaluate(rom, params, cfg)
        path = io.write_csv(config.output_dir / "metrics.csv", io.METRIC_FIELDS, io.metric_rows(records, 0))

    table = Table(title="ROM evaluation")
    for name, style in (("A0", "cyan"), ("p0", "cyan"), ("E_hf", "green"), ("eta", "yellow"), ("E_inf", "green"), ("online s", "magenta")):
        table.add_column(name, style=style)
    for r in records:
        table.add_row(f"{r.mu[0]:.4f}", f"{r.mu[1]:.4f}", _fmt(r.e_hf), _fmt(r.eta, ".2f"), _fmt(r.e_inf), f"{r.online_seconds:.3f}")
    console.print(table)
    e_hf = np.array([r.e_hf for r in records])
    rprint(f"[green]Median E_hf {_fmt(float(np.nanmedian(e_hf)))}[/green]")
    rprint(f"[blue]📁 Location: {path}[/blue]")


@cli.command()
@click.argument("fields", nargs=-1, required=True, type=EXISTING_FILE)
@click.option("--mesh", "mesh_path", required=True, type=EXISTING_FILE, help="Triangle mesh (# dim=2)")
@click.option("--complexity", default=100.0, show_default=True, type=click.FloatRange(min=0, min_open=True), help="Target complexity N")
@click.option("--p-norm", default=1.0, show_default=True, type=click.FloatRange(min=1), help="L^p norm index")
@click.option("--intersect", is_flag=True, help="Intersect the metrics of several fields")
@click.option("--quality", type=EXISTING_FILE, help="Deformed mesh to score with the mesh-quality functional")
@click.option("--kappa", default=10.0, show_default=True, type=float, help="Mesh-quality offset kappa_msh")
@click.option("--output", "-o", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Metric output file")
@click.pass_context
def metric2d(ctx, fields, mesh_path, complexity, p_norm, intersect, quality, kappa, output):
    """Multiscale metric of vertex fields on a triangle mesh"""
    if len(fields) > 1 and not intersect:
        raise click.UsageError("several fields need --intersect")
    setup_logging(output.parent, ctx.obj.get("log_file"), ctx.obj.get("verbose", False))
    with reported_errors():
        mesh = io.read_tri_mesh(mesh_path)
        cfg = MultiscaleConfig(complexity, p_norm)
        metrics = [
            multiscale_metric(mesh, hessian_recovery(mesh, io.read_vertex_field(path, mesh.n_vertices)), cfg)
            for path in fields
        ]
        metric = parametric_intersection(metrics)
        io.write_metric(output, metric)
        report = unit_mesh_report(metric)
        mq = None
        if quality is not None:
            deformed = io.read_tri_mesh(quality)
            if not np.array_equal(deformed.triangles, mesh.triangles):
                raise click.UsageError("--quality mesh must share the reference connectivity")
            mq = mesh_quality(mesh, deformed.vertices, kappa)

    table = Table(title=f"Metric ({len(fields)} field{'s' if len(fields) > 1 else ''}, N={complexity:g})")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("Vertices", str(mesh.n_vertices))
    table.add_row("Edge length min", f"{report.min:.3f}")
    table.add_row("Edge length median", f"{report.median:.3f}")
    table.add_row("Edge length max", f"{report.max:.3f}")
    if mq is not None:
        table.add_row("f_msh", _fmt(mq.value))
        table.add_row("q ratio min / max", f"{mq.min_ratio:.3f} / {mq.max_ratio:.3f}")
        table.add_row("Inverted elements", "Yes" if mq.inverted else "No")
    console.print(table)
    rprint(f"[blue]📁 Location: {output}[/blue]")


@cli.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Output directory of adapt-loop")
def report(run_dir):
    """Render the csv tables of a run"""
    with reported_errors():
        summary = io.read_csv(run_dir / "summary.csv")
        costs = io.read_csv(run_dir / "costs.csv")

    if not summary:
        rprint(f"[yellow]No iterations recorded in {run_dir}[/yellow]")
        return
    table = Table(title=f"Run {run_dir}")
    for name in io.SUMMARY_FIELDS:
        table.add_column(name, style="cyan" if name == "iteration" else "green")
    for row in summary:
        table.add_row(*(row.get(name, "") for name in io.SUMMARY_FIELDS))
    console.print(table)

    phases = sorted({row["phase"] for row in costs})
    cost_table = Table(title="Wall-clock seconds per phase")
    cost_table.add_column("iteration", style="cyan")
    for phase in phases:
        cost_table.add_column(phase, style="yellow")
    for k in sorted({row["iteration"] for row in costs}, key=int):
        by_phase = {row["phase"]: row["seconds"] for row in costs if row["iteration"] == k}
        cost_table.add_row(k, *(by_phase.get(phase, "-") for phase in phases))
    console.print(cost_table)


if __name__ == "__main__":
    cli()
