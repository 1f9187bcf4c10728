import json

import pytest
from click.testing import CliRunner

from hdivflow import cli as cli_module
from hdivflow.cli import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, create_cli
from hdivflow.exceptions import SolverError
from hdivflow.services.benchmarks import read_convergence_table
from hdivflow.services.diagnostics import read_field_csv, read_spectrum, read_time_series


def report(result):
    """標準出力の JSON 部分を取り出す"""
    text = result.output
    return json.loads(text[text.index("{"):text.rindex("}") + 1])


@pytest.fixture
def invoke(workdir):
    runner = CliRunner()
    cli = create_cli()

    def call(*args):
        return runner.invoke(cli, list(args))

    return call


class TestInfo:
    def test_module_documents_exit_codes(self):
        doc = cli_module.__doc__
        assert doc
        for code in (EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SOLVER, EXIT_ACCEPTANCE):
            assert f"{code} " in doc

    def test_manufactured_stokes(self, invoke):
        result = invoke("info", "--set", "case=manufactured_stokes", "--set", "mesh=structured:2", "--set", "k=1")
        assert result.exit_code == EXIT_OK
        payload = report(result)
        assert payload["velocity_dofs"] == 32
        assert payload["pressure_dofs"] == 24
        assert payload["num_triangles"] == 8

    def test_config_file(self, invoke, workdir):
        (workdir / "lattice.cfg").write_text("case = lattice\nmesh = structured:2\nk = 1\n", encoding="utf-8")
        result = invoke("info", "--config", "lattice.cfg")
        assert result.exit_code == EXIT_OK
        assert report(result)["bc"]["top"] == "periodic"

    def test_unknown_key(self, invoke):
        result = invoke("info", "--set", "case=lattice", "--set", "speed=3")
        assert result.exit_code == EXIT_CONFIG

    def test_missing_config(self, invoke):
        assert invoke("info", "--config", "missing.cfg").exit_code == EXIT_IO

    def test_missing_mesh_file(self, invoke):
        result = invoke("info", "--set", "case=lattice", "--set", "mesh=no_such.mesh")
        assert result.exit_code == EXIT_IO

    def test_solver_error(self, invoke, monkeypatch):
        def broken(case):
            raise SolverError("分解に失敗")

        monkeypatch.setattr(cli_module, "build_spaces", broken)
        assert invoke("info", "--set", "case=lattice").exit_code == EXIT_SOLVER

    def test_writes_log_file(self, invoke, workdir):
        invoke("info", "--set", "case=lattice", "--set", "mesh=structured:2", "--set", "k=1", "--quiet")
        assert (workdir / "hdivflow.log").exists()


class TestRun:
    def test_manufactured_oseen(self, invoke, workdir):
        result = invoke("run", "--set", "case=manufactured_oseen", "--set", "mesh=structured:2", "--set", "k=1",
                        "--set", "dt=0.1", "--set", "T=0.2", "--set", "nu=0.01", "--set", "snapshot_every=1",
                        "--set", "export_format=csv", "--out", "out", "--quiet")
        assert result.exit_code == EXIT_OK
        out = workdir / "out"
        rows = read_time_series(out / "time_series.csv")
        assert [row["t"] for row in rows] == pytest.approx([0.0, 0.1, 0.2])
        assert all(row["div_max"] < 1e-9 for row in rows)
        assert len(read_time_series(out / "errors.csv")) == 3
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["complete"] is True
        assert (out / "checkpoint_final.npz").exists()
        assert read_field_csv(out / "snapshot_000002.csv")["t"] == pytest.approx(0.2)

    def test_incomplete_run(self, invoke, monkeypatch):
        from hdivflow.services import solver

        def broken(*args, **kwargs):
            raise SolverError("分解に失敗")

        monkeypatch.setattr(solver, "step_transient", broken)
        result = invoke("run", "--set", "case=lattice", "--set", "mesh=structured:2", "--set", "k=1",
                        "--set", "T=0.02", "--out", "out", "--quiet")
        assert result.exit_code == EXIT_SOLVER

    def test_energy_increase_fails_run(self, invoke, workdir, monkeypatch):
        from hdivflow.services import solver
        from hdivflow.services.solver import FlowState

        original = solver.step_transient

        def amplified(*args, **kwargs):
            state = original(*args, **kwargs)
            return FlowState(state.t, 2.0 * state.velocity, state.pressure)

        monkeypatch.setattr(solver, "step_transient", amplified)
        result = invoke("run", "--set", "case=lattice", "--set", "mesh=structured:2", "--set", "k=1",
                        "--set", "nu=0.01", "--set", "dt=0.05", "--set", "T=0.1", "--out", "out", "--quiet")
        assert result.exit_code == EXIT_SOLVER
        summary = json.loads((workdir / "out" / "summary.json").read_text(encoding="utf-8"))
        assert summary["complete"] is False
        assert summary["energy_increases"] == 1
        assert summary["failure"].startswith("step 1")


class TestConvergence:
    ARGS = ("--set", "case=manufactured_stokes", "--set", "k=1", "--set", "meshes=structured:2,structured:4",
            "--out", "conv", "--quiet")

    def test_passes_with_relaxed_order(self, invoke, workdir):
        result = invoke("convergence", *self.ARGS, "--set", "expected_order=1", "--set", "order_tolerance=0.5")
        assert result.exit_code == EXIT_OK
        rows = read_convergence_table(workdir / "conv" / "convergence.csv")
        assert len(rows) == 2

    def test_fails_acceptance(self, invoke):
        result = invoke("convergence", *self.ARGS, "--set", "expected_order=6", "--set", "order_tolerance=0.1")
        assert result.exit_code == EXIT_ACCEPTANCE


class TestSpectrumAndProjection:
    def test_spectrum_from_checkpoint(self, invoke, workdir):
        run = invoke("run", "--set", "case=lattice", "--set", "problem=stokes", "--set", "nu=0.01",
                     "--set", "mesh=structured:4", "--set", "k=2", "--set", "dt=0.05", "--set", "T=0.1",
                     "--out", "out", "--quiet")
        assert run.exit_code == EXIT_OK
        result = invoke("spectrum", "--checkpoint", "out/checkpoint_final.npz", "--grid", "16", "--out", "spec")
        assert result.exit_code == EXIT_OK
        assert report(result)["parseval_error"] < 1e-12
        spectrum = read_spectrum(workdir / "spec" / "spectrum_t0.1.csv")
        assert spectrum.energy.argmax() == 0

    def test_missing_checkpoint(self, invoke):
        assert invoke("spectrum", "--checkpoint", "missing.npz", "--quiet").exit_code == EXIT_IO

    def test_project(self, invoke, workdir):
        result = invoke("project", "--set", "case=manufactured_stokes", "--set", "k=1",
                        "--set", "meshes=structured:2,structured:4", "--out", "proj", "--quiet")
        assert result.exit_code in (EXIT_OK, EXIT_ACCEPTANCE)
        lines = (workdir / "proj" / "projection.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "h,num_dofs,l2,energy,ratio,idempotence"
        assert len(lines) == 3


class TestRunEdgeCases:
    def test_zero_end_time_writes_initial_row(self, invoke, workdir):
        result = invoke("run", "--set", "case=lattice", "--set", "T=0", "--out", "out", "--quiet")
        assert result.exit_code == EXIT_OK
        rows = read_time_series(workdir / "out" / "time_series.csv")
        assert len(rows) == 1
        assert rows[0]["K"] == pytest.approx(0.25, rel=1e-2)

    def test_unknown_key(self, invoke):
        assert invoke("run", "--set", "case=lattice", "--set", "foo=1", "--quiet").exit_code == EXIT_CONFIG

    def test_missing_mesh_file(self, invoke):
        result = invoke("run", "--set", "case=lattice", "--set", "mesh=missing.mesh", "--quiet")
        assert result.exit_code == EXIT_IO


class TestSpectrumEdgeCases:
    @pytest.fixture
    def checkpoint(self, invoke):
        def make(case, *extra):
            result = invoke("run", "--set", f"case={case}", "--set", "mesh=structured:4", "--set", "k=1",
                            "--set", "T=0", *extra, "--out", case, "--quiet")
            assert result.exit_code == EXIT_OK
            return f"{case}/checkpoint_final.npz"

        return make

    def test_single_bin_slope_is_undefined(self, invoke, checkpoint):
        path = checkpoint("lattice")
        result = invoke("spectrum", "--checkpoint", path, "--grid", "8", "--kappa-min", "1", "--kappa-max", "1")
        assert result.exit_code == EXIT_OK
        assert report(result)["slope"] is None
        assert "傾きは定義できません" in result.output

    def test_non_periodic_checkpoint_is_refused(self, invoke, checkpoint):
        path = checkpoint("manufactured_stokes")
        assert invoke("spectrum", "--checkpoint", path, "--grid", "8", "--quiet").exit_code == EXIT_CONFIG
