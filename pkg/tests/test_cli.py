from __future__ import annotations

import numpy as np
import pytest
from click.testing import CliRunner

from larom import io
from larom.cli import cli
from larom.metric2d import structured_mesh
from larom.training import IterationReport, RunReport


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def mesh_files(tmp_path):
    mesh = structured_mesh(6, 6)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    io.write_tri_mesh(tmp_path / "mesh.tri", mesh)
    io.write_vertex_field(tmp_path / "u.dat", x**2 + 0.1 * y**2)
    io.write_vertex_field(tmp_path / "v.dat", 0.1 * x**2 + y**2)
    return mesh, tmp_path


def test_missing_config_is_a_usage_error(runner, tmp_path):
    result = runner.invoke(cli, ["hf-solve", "--config", str(tmp_path / "none.ini"), "--mu", "1.0,0.75"])
    assert result.exit_code == 2


def test_bad_parameter_string(runner, tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[loop]\niterations = 1\n")
    result = runner.invoke(cli, ["hf-solve", "--config", str(config), "--mu", "1.0"])
    assert result.exit_code == 2


def test_hf_solve_on_a_straight_duct(runner, tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(f"[discretization]\nn_elements = 10\ndegree = 1\n\n[run]\noutput_dir = {tmp_path / 'out'}\n")
    out = tmp_path / "hf"
    result = runner.invoke(
        cli, ["--log-file", str(tmp_path / "larom.log"), "hf-solve", "--config", str(config), "--mu", "3.0,0.8", "-o", str(out)]
    )
    assert result.exit_code == 0, result.output
    mesh = io.read_mesh(out / "mesh.dat")
    assert mesh.n_elements == 10
    assert io.read_state(out / "state.dat", mesh).n_vars == 3
    assert len(io.read_csv(out / "mach.csv")) == 20


def test_config_errors_become_click_errors(runner, tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[loop]\nbogus = 1\n")
    result = runner.invoke(cli, ["hf-solve", "--config", str(config), "--mu", "1.0,0.75"])
    assert result.exit_code == 1
    assert "line 2" in result.output


def test_metric2d_writes_a_metric(runner, mesh_files):
    mesh, tmp = mesh_files
    out = tmp / "metric.dat"
    args = ["--log-file", str(tmp / "larom.log"), "metric2d", str(tmp / "u.dat"), "--mesh", str(tmp / "mesh.tri")]
    result = runner.invoke(cli, args + ["--complexity", "50", "-o", str(out)])
    assert result.exit_code == 0, result.output
    metric = io.read_metric(out, mesh)
    assert np.all(np.linalg.eigvalsh(metric.tensors) > 0.0)


def test_metric2d_intersection_and_quality(runner, mesh_files):
    _, tmp = mesh_files
    out = tmp / "metric.dat"
    base = ["--log-file", str(tmp / "larom.log"), "metric2d", str(tmp / "u.dat"), str(tmp / "v.dat"), "--mesh", str(tmp / "mesh.tri")]

    result = runner.invoke(cli, base + ["-o", str(out)])
    assert result.exit_code == 2

    result = runner.invoke(cli, base + ["--intersect", "--quality", str(tmp / "mesh.tri"), "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert "Inverted elements" in result.output


def test_metric2d_rejects_short_fields(runner, mesh_files):
    _, tmp = mesh_files
    io.write_vertex_field(tmp / "short.dat", np.ones(3))
    args = ["--log-file", str(tmp / "larom.log"), "metric2d", str(tmp / "short.dat"), "--mesh", str(tmp / "mesh.tri")]
    result = runner.invoke(cli, args + ["-o", str(tmp / "metric.dat")])
    assert result.exit_code == 1


def test_report_renders_run_tables(runner, tmp_path):
    it = IterationReport(1, 60, rob_size=3)
    it.costs = {"snapshots": 2.0, "registration": 1.0}
    io.write_run_report(tmp_path, RunReport(False, 0, np.zeros((0, 2)), [it]))
    result = runner.invoke(cli, ["report", "--run-dir", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "snapshots" in result.output


def test_report_without_tables(runner, tmp_path):
    result = runner.invoke(cli, ["report", "--run-dir", str(tmp_path)])
    assert result.exit_code == 1
