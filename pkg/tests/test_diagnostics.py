import math

import numpy as np
import pytest

from hdivflow.services.benchmarks import lattice_initial_velocity
from hdivflow.services.diagnostics import (
    RunRecord,
    Spectrum,
    divergence_sup,
    energy_spectrum,
    enstrophy,
    error_norms,
    export_fields,
    fit_spectrum_slope,
    kinetic_energy,
    pressure_error,
    read_field_csv,
    read_spectrum,
    read_time_series,
    spectrum_from_samples,
    velocity_sup,
    vorticity_thickness,
    write_spectrum,
    write_time_series,
)
from hdivflow.services.function_space import DiscreteField, interpolate_velocity, project_pressure
from hdivflow.services.solver import FlowState
from tests.helpers import linear_field, linear_gradient, make_spaces, shear_field

KH_WALLS = {"left": "periodic", "right": "periodic", "bottom": "freeslip", "top": "freeslip"}


def lattice_samples(grid_n):
    centers = (np.arange(grid_n) + 0.5) / grid_n
    xx, yy = np.meshgrid(centers, centers, indexing="xy")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    return lattice_initial_velocity(points).reshape(grid_n, grid_n, 2)


@pytest.fixture
def shear_state():
    velocity_space, pressure_space = make_spaces(2, 1, KH_WALLS)
    return FlowState(0.5, interpolate_velocity(shear_field, velocity_space), DiscreteField(pressure_space))


class TestScalarDiagnostics:
    def test_shear_layer(self, shear_state):
        u_h = shear_state.velocity
        assert kinetic_energy(u_h) == pytest.approx(1.0 / 6.0)
        assert enstrophy(u_h) == pytest.approx(0.5)
        assert divergence_sup(u_h) == pytest.approx(0.0, abs=1e-12)
        assert velocity_sup(u_h) <= 1.0 + 1e-12

    def test_vorticity_thickness_of_linear_profile(self, shear_state):
        # ω = −1 が一様なので δ = 2 u∞
        assert vorticity_thickness(shear_state.velocity, 1.0, n_lines=4, n_samples=9) == pytest.approx(2.0)

    def test_vorticity_thickness_needs_vorticity(self):
        velocity_space, _ = make_spaces(1, 1, KH_WALLS)
        with pytest.raises(ValueError):
            vorticity_thickness(DiscreteField(velocity_space), 1.0, n_lines=2, n_samples=3)

    def test_zero_field(self):
        velocity_space, _ = make_spaces(1, 1, "noslip")
        u_h = DiscreteField(velocity_space)
        assert kinetic_energy(u_h) == 0.0
        assert enstrophy(u_h) == 0.0


class TestErrorNorms:
    def test_exact_for_reproduced_field(self):
        velocity_space, _ = make_spaces(2, 1, "open")
        u_h = interpolate_velocity(linear_field, velocity_space)
        beta = lambda x: np.broadcast_to([1.0, -0.5], x.shape)
        norms = error_norms(u_h, linear_field, linear_gradient, beta=beta)
        assert norms["l2"] == pytest.approx(0.0, abs=1e-10)
        assert norms["energy"] == pytest.approx(0.0, abs=1e-9)
        assert norms["upwind"] == pytest.approx(0.0, abs=1e-9)

    def test_zero_discrete_field(self):
        velocity_space, _ = make_spaces(2, 1, "open")
        norms = error_norms(DiscreteField(velocity_space), linear_field, linear_gradient)
        # ‖w‖² = 8/3 + 11/6
        assert norms["l2"] == pytest.approx(math.sqrt(4.5))

    def test_pressure_error_ignores_constants(self):
        _, pressure_space = make_spaces(2, 2, "noslip")
        p_h = project_pressure(lambda x: x[:, 0] * x[:, 1], pressure_space)
        assert pressure_error(p_h, lambda x: x[:, 0] * x[:, 1] + 5.0) == pytest.approx(0.0, abs=1e-12)
        assert pressure_error(DiscreteField(pressure_space), lambda x: x[:, 0] - 0.5) == pytest.approx(
            math.sqrt(1.0 / 12.0))


class TestSpectrum:
    def test_lattice_samples(self):
        spectrum = spectrum_from_samples(lattice_samples(32))
        # 4 モード (±1, ±1) はすべて |k| = √2 で環 κ = 1 に入る
        assert spectrum.energy[0] == pytest.approx(0.25)
        assert np.sum(spectrum.energy[1:]) == pytest.approx(0.0, abs=1e-20)
        assert spectrum.mean_flow_energy == pytest.approx(0.0, abs=1e-25)
        assert spectrum.parseval_error < 1e-12

    def test_uniform_flow_is_mean_energy(self):
        samples = np.broadcast_to([1.0, 2.0], (8, 8, 2))
        spectrum = spectrum_from_samples(np.array(samples))
        assert spectrum.mean_flow_energy == pytest.approx(2.5)
        assert spectrum.parseval_error < 1e-12

    def test_discrete_field(self):
        velocity_space, _ = make_spaces(4, 2, "periodic")
        spectrum = energy_spectrum(interpolate_velocity(lattice_initial_velocity, velocity_space), grid_n=16)
        assert int(np.argmax(spectrum.energy)) == 0
        assert spectrum.parseval_error < 1e-12

    def test_requires_periodic_mesh(self):
        velocity_space, _ = make_spaces(2, 1, KH_WALLS)
        with pytest.raises(ValueError):
            energy_spectrum(DiscreteField(velocity_space), grid_n=8)

    def test_slope_fit(self):
        kappa = np.arange(1, 65)
        spectrum = Spectrum(kappa=kappa, energy=3.0 * kappa.astype(float) ** -3)
        assert fit_spectrum_slope(spectrum, 10.0, 40.0) == pytest.approx(-3.0)

    def test_slope_needs_two_bins(self):
        kappa = np.arange(1, 65)
        spectrum = Spectrum(kappa=kappa, energy=np.ones(64))
        assert fit_spectrum_slope(spectrum, 10.0, 10.0) is None


class TestRunRecord:
    def test_rows_must_advance(self):
        record = RunRecord(case={"case": "lattice"})
        record.add_row(0.0, 0.25, 19.7, 0.0)
        with pytest.raises(ValueError):
            record.add_row(0.0, 0.25, 19.7, 0.0)

    def test_rejects_negative_energy(self):
        with pytest.raises(ValueError):
            RunRecord(case={}).add_row(0.0, -1.0, 0.0, 0.0)

    def test_summary(self):
        record = RunRecord(case={"case": "lattice"}, newton_iterations=[2, 3])
        record.add_row(0.0, 0.25, 19.7, 1e-14)
        record.add_row(0.1, 0.24, 19.0, 2e-14)
        summary = record.summary()
        assert summary["case"] == "lattice"
        assert summary["final_t"] == 0.1
        assert summary["final_K"] == 0.24
        assert summary["newton_iterations"] == 5


class TestFiles:
    def test_time_series(self, tmp_path):
        path = tmp_path / "time_series.csv"
        write_time_series([{"t": 0.0, "K": 0.25, "E": 19.7, "div_max": 1e-15, "delta_ratio": float("nan")}], path)
        assert path.read_text(encoding="utf-8").splitlines()[0] == "t,K,E,div_max,delta_ratio"
        rows = read_time_series(path)
        assert rows[0]["K"] == 0.25
        assert math.isnan(rows[0]["delta_ratio"])

    def test_spectrum_file(self, tmp_path):
        spectrum = spectrum_from_samples(lattice_samples(8))
        path = tmp_path / "spectrum.csv"
        write_spectrum(spectrum, path, slope=None)
        assert "slope=undefined" in path.read_text(encoding="utf-8")
        loaded = read_spectrum(path)
        assert loaded.energy[0] == pytest.approx(0.25)
        assert loaded.grid_energy == pytest.approx(spectrum.grid_energy)

    def test_export_csv(self, tmp_path, shear_state):
        path = export_fields(shear_state, tmp_path / "snapshot", format="csv")
        assert path.suffix == ".csv"
        data = read_field_csv(path)
        assert data["t"] == 0.5
        assert data["vorticity_min"] == pytest.approx(-1.0)
        assert np.allclose(data["u1"], data["x2"])
        assert len(data["x1"]) == shear_state.velocity.space.mesh.num_triangles

    def test_export_vtk(self, tmp_path, shear_state):
        path = export_fields(shear_state, tmp_path / "snapshot")
        text = path.read_text(encoding="utf-8")
        assert path.suffix == ".vtk"
        assert "DATASET UNSTRUCTURED_GRID" in text
        assert "t=0.5" in text.splitlines()[1]

    def test_unknown_format(self, tmp_path, shear_state):
        with pytest.raises(ValueError):
            export_fields(shear_state, tmp_path / "snapshot", format="hdf5")
