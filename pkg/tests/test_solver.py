import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import sparse

from hdivflow.exceptions import ConfigError, EnergyStabilityError, NewtonConvergenceError, SolverError
from hdivflow.services import solver
from hdivflow.services.assembly import FormParams
from hdivflow.services.benchmarks import (
    lattice_flow_case,
    lattice_flow_solution,
    lattice_initial_velocity,
    manufactured_stokes_solution,
)
from hdivflow.services.diagnostics import divergence_sup, error_norms, kinetic_energy, pressure_error, velocity_sup
from hdivflow.services.function_space import DiscreteField, interpolate_velocity, project_pressure
from hdivflow.services.solver import (
    FlowState,
    SaddleSystem,
    TimeSteppingConfig,
    build_spaces,
    divergence_bound,
    load_checkpoint,
    restore_state,
    run_transient,
    save_checkpoint,
    solve_sparse,
    solve_stationary_stokes,
    step_transient,
    stokes_projection,
)
from tests.helpers import make_spaces

TWO_PI = 2.0 * math.pi


def cubic_gradient(x):
    """∇(x1³ + x2³)"""
    return np.stack([3.0 * x[:, 0] ** 2, 3.0 * x[:, 1] ** 2], axis=-1)


def cell_flow(x):
    s1, c1 = np.sin(np.pi * x[:, 0]), np.cos(np.pi * x[:, 0])
    s2, c2 = np.sin(np.pi * x[:, 1]), np.cos(np.pi * x[:, 1])
    return 2.0 * np.pi * np.stack([s1 ** 2 * s2 * c2, -s1 * c1 * s2 ** 2], axis=-1)


def periodic_potential(x):
    return 10.0 * np.cos(TWO_PI * x[:, 0]) * np.cos(TWO_PI * x[:, 1])


def periodic_potential_gradient(t, x):
    return -10.0 * TWO_PI * np.stack([np.sin(TWO_PI * x[:, 0]) * np.cos(TWO_PI * x[:, 1]),
                                      np.cos(TWO_PI * x[:, 0]) * np.sin(TWO_PI * x[:, 1])], axis=-1)


def lattice_state(spaces, nu=0.01):
    exact = lattice_flow_solution(nu)
    velocity = interpolate_velocity(exact.velocity_at(0.0), spaces[0])
    return FlowState(0.0, velocity, project_pressure(exact.pressure_at(0.0), spaces[1])), exact


def assert_divergence_free(field):
    assert divergence_sup(field) <= 1e-9 * max(velocity_sup(field), 1.0)


class TestSolveSparse:
    def test_diagonal_system(self):
        result = solve_sparse(SaddleSystem(A=sparse.diags([2.0, 4.0]).tocsr(), rhs_velocity=np.array([2.0, 4.0])))
        assert np.allclose(result["velocity"], [1.0, 1.0])
        assert result["pressure"].size == 0

    def test_saddle_with_mean_constraint(self):
        A = sparse.identity(2, format="csr")
        B = sparse.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        result = solve_sparse(SaddleSystem(A=A, B=B, mean=np.array([1.0, 1.0]), rhs_velocity=np.array([1.0, 1.0])))
        assert np.allclose(B @ result["velocity"], 0.0)
        assert result["pressure"].sum() == pytest.approx(0.0, abs=1e-14)
        assert np.allclose(result["velocity"], [1.0, 1.0])

    def test_zero_rhs(self):
        result = solve_sparse(SaddleSystem(A=sparse.csr_matrix((3, 3))))
        assert not np.any(result["velocity"])
        assert result["residual"] == 0.0

    def test_singular(self):
        with pytest.raises(SolverError):
            solve_sparse(SaddleSystem(A=sparse.csr_matrix((2, 2)), rhs_velocity=np.ones(2)))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            SaddleSystem(A=sparse.identity(2, format="csr"), B=sparse.csr_matrix((1, 3)))


class TestTimeSteppingConfig:
    def test_num_steps(self):
        assert TimeSteppingConfig(t_end=0.2, dt=0.05).num_steps == 4
        assert TimeSteppingConfig(t_end=0.0, dt=0.1).num_steps == 0

    @pytest.mark.parametrize("kwargs", [{"t_end": 1.0, "dt": 0.0}, {"t_end": -1.0, "dt": 0.1},
                                        {"t_end": 1.0, "dt": 0.1, "newton_max_iterations": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TimeSteppingConfig(**kwargs)


class TestStationaryStokes:
    def test_requires_viscosity(self):
        with pytest.raises(ValueError):
            solve_stationary_stokes(make_spaces(1, 1, "noslip"), 0.0)

    def test_gradient_forcing_gives_zero_velocity(self):
        spaces = make_spaces(3, 1, "noslip")
        state = solve_stationary_stokes(spaces, 1.0, cubic_gradient)
        assert np.abs(state.velocity.coefficients).max() < 1e-8
        assert spaces[1].mean_functional() @ state.pressure.coefficients == pytest.approx(0.0, abs=1e-12)

    def test_gradient_forcing_pressure_is_recovered(self):
        # k = 3 の圧力空間は x1³ + x2³ を含む
        spaces = make_spaces(2, 3, "noslip")
        state = solve_stationary_stokes(spaces, 1.0, cubic_gradient)
        exact = manufactured_stokes_solution(1.0)
        assert pressure_error(state.pressure, exact.pressure_at(0.0)) < 1e-8

    def test_manufactured_solution_converges(self):
        exact = manufactured_stokes_solution(1.0)
        errors = []
        for n in (2, 4):
            state = solve_stationary_stokes(make_spaces(n, 2, "noslip"), 1.0, exact.forcing_at(0.0))
            assert_divergence_free(state.velocity)
            errors.append(error_norms(state.velocity, exact.velocity_at(0.0), exact.gradient_at(0.0))["l2"])
        assert errors[1] < errors[0] / 2.0

    def test_periodic_constant_forcing_is_absorbed_by_mean_constraint(self):
        spaces = make_spaces(2, 1, "periodic")
        state = solve_stationary_stokes(spaces, 1.0, lambda x: np.broadcast_to([1.0, 0.0], x.shape))
        assert np.abs(state.velocity.coefficients).max() < 1e-10


class TestStokesProjection:
    def test_discretely_divergence_free_field_is_fixed(self):
        spaces = make_spaces(3, 1, "noslip")
        w_h = interpolate_velocity(cell_flow, spaces[0])
        projected = stokes_projection(w_h, spaces)
        assert np.allclose(projected.coefficients, w_h.coefficients, atol=1e-9)

    def test_periodic_means_are_kept(self):
        spaces = make_spaces(2, 2, "periodic")
        w_h = interpolate_velocity(lattice_flow_solution().velocity_at(0.0), spaces[0])
        shifted = w_h + interpolate_velocity(lambda x: np.broadcast_to([0.5, 0.0], x.shape), spaces[0])
        assert np.allclose(stokes_projection(shifted, spaces).coefficients, shifted.coefficients, atol=1e-9)

    def test_rejects_divergent_input(self):
        spaces = make_spaces(2, 1, "open")
        with pytest.raises(ValueError):
            stokes_projection(interpolate_velocity(lambda x: x.copy(), spaces[0]), spaces)

    def test_analytic_input_needs_gradient(self):
        spaces = make_spaces(2, 1, "noslip")
        with pytest.raises(ValueError):
            stokes_projection(cell_flow, spaces)


class TestStepTransient:
    def test_stokes_decay_rate(self):
        spaces = make_spaces(4, 2, "periodic")
        state, exact = lattice_state(spaces)
        params = FormParams(nu=0.01)
        history = [state]
        for _ in range(2):
            history = [history[-1], step_transient(history[-2:], 0.01, "stokes", params)]
        assert history[-1].t == pytest.approx(0.02)
        ratio = kinetic_energy(history[-1].velocity) / kinetic_energy(state.velocity)
        assert ratio < 1.0
        assert ratio == pytest.approx(exact.kinetic_energy(0.02) / exact.kinetic_energy(0.0), rel=1e-2)
        assert_divergence_free(history[-1].velocity)

    def test_oseen_step(self):
        spaces = make_spaces(3, 1, "periodic")
        state, exact = lattice_state(spaces)
        params = FormParams(nu=0.01, beta=exact.velocity)
        iterations = []
        new = step_transient([state], 0.01, "oseen", params, iterations=iterations)
        assert iterations == [1]
        assert_divergence_free(new.velocity)

    def test_navier_stokes_newton(self):
        spaces = make_spaces(4, 2, "periodic")
        state, exact = lattice_state(spaces)
        iterations = []
        new = step_transient([state], 0.01, "navier_stokes", FormParams(nu=0.01), iterations=iterations)
        assert 1 <= iterations[0] <= 6
        ratio = kinetic_energy(new.velocity) / kinetic_energy(state.velocity)
        assert ratio == pytest.approx(exact.kinetic_energy(0.01) / exact.kinetic_energy(0.0), rel=1e-2)

    def test_newton_failure_keeps_history(self):
        spaces = make_spaces(2, 1, "periodic")
        state, _ = lattice_state(spaces)
        with pytest.raises(NewtonConvergenceError) as error:
            step_transient([state], 0.01, "navier_stokes", FormParams(nu=0.01),
                           newton_max_iterations=1, newton_tolerance=1e-300)
        assert len(error.value.history) == 2

    def test_gradient_forcing_only_changes_pressure(self):
        spaces = make_spaces(3, 2, "periodic")
        state, _ = lattice_state(spaces)
        params = FormParams(nu=0.01)
        plain = step_transient([state], 0.01, "stokes", params)
        forced = step_transient([state], 0.01, "stokes", params, forcing=periodic_potential_gradient)
        scale = np.abs(plain.velocity.coefficients).max()
        assert np.abs(forced.velocity.coefficients - plain.velocity.coefficients).max() <= 1e-8 * scale
        # 圧力の差は ϕ の L² 射影
        assert pressure_error(forced.pressure - plain.pressure, periodic_potential) < 1.0

    @pytest.mark.parametrize("problem, dt", [("euler", 0.01), ("stokes", 0.0)])
    def test_invalid_arguments(self, problem, dt):
        spaces = make_spaces(1, 1, "periodic")
        state, _ = lattice_state(spaces)
        with pytest.raises(ConfigError):
            step_transient([state], dt, problem, FormParams(nu=0.01))


class TestCheckpoint:
    def test_save_and_restore(self, tmp_path):
        header = {"case": "lattice", "mesh": "structured:2", "k": 1, "bc": "periodic"}
        spaces = build_spaces(SimpleNamespace(mesh="structured:2", k=1, bc="periodic"))
        state, _ = lattice_state(spaces)
        state.t = 0.25
        path = save_checkpoint(tmp_path / "checkpoint", state, header)
        assert path.suffix == ".npz"
        checkpoint = load_checkpoint(path)
        assert checkpoint["header"]["t"] == 0.25
        restored = restore_state(checkpoint)
        assert restored.t == 0.25
        assert np.array_equal(restored.velocity.coefficients, state.velocity.coefficients)
        assert restored.velocity.space.num_dofs == spaces[0].num_dofs


class TestRunTransient:
    def test_lattice_stokes_run(self, tmp_path):
        case, _ = lattice_flow_case(nu=0.01, mesh="structured:2", k=1, dt=0.05, T=0.1, problem="stokes")
        record = run_transient(case, tmp_path)
        assert record.complete
        assert [row["t"] for row in record.rows] == pytest.approx([0.0, 0.05, 0.1])
        assert len(record.error_rows) == 3
        assert record.rows[-1]["K"] < record.rows[0]["K"]
        assert record.final_state.t == pytest.approx(0.1)
        assert (tmp_path / "checkpoint_final.npz").exists()

    def test_failed_step_returns_partial_record(self, monkeypatch):
        case, _ = lattice_flow_case(nu=0.01, mesh="structured:2", k=1, dt=0.05, T=0.2, problem="stokes")
        calls = []
        original = solver.step_transient

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 2:
                raise SolverError("分解に失敗")
            return original(*args, **kwargs)

        monkeypatch.setattr(solver, "step_transient", flaky)
        record = run_transient(case)
        assert not record.complete
        assert record.failure.startswith("step 2")
        assert len(record.rows) == 2
        assert record.final_state.t == pytest.approx(0.05)

    def test_zero_end_time(self):
        case, _ = lattice_flow_case(nu=0.01, mesh="structured:2", k=1, dt=0.05, T=0.0, problem="stokes")
        record = run_transient(case)
        assert record.complete
        assert len(record.rows) == 1
        assert isinstance(record.final_state.velocity, DiscreteField)


class TestDivergenceCheck:
    def test_bound_is_relative_to_velocity(self):
        velocity_space, _ = make_spaces(4, 2, "periodic")
        field = interpolate_velocity(lattice_initial_velocity, velocity_space)
        assert divergence_bound(field) == pytest.approx(1e-9 * velocity_sup(field))

    def test_small_velocity_with_divergence_is_rejected(self):
        # |u| ≈ 1e-3 に対して ∇·u = 1e-11 は相対 1e-9 を超える
        velocity_space, _ = make_spaces(2, 1, "open")
        field = interpolate_velocity(lambda x: np.stack([1e-3 + 1e-11 * x[:, 0], np.zeros(len(x))], axis=-1),
                                     velocity_space)
        assert divergence_sup(field) == pytest.approx(1e-11, rel=1e-3)
        with pytest.raises(SolverError):
            solver._check_divergence(field, "小さな場")

    def test_zero_field_passes(self):
        velocity_space, _ = make_spaces(2, 1, "noslip")
        assert solver._check_divergence(DiscreteField(velocity_space), "ゼロ場") == 0.0


class TestEnergyMonotonicity:
    @pytest.mark.parametrize("problem", ["stokes", "oseen", "navier_stokes"])
    def test_coarse_lattice_run_has_monotone_energy(self, problem):
        case, _ = lattice_flow_case(nu=0.01, mesh="structured:4", k=2, dt=0.01, T=0.1, problem=problem)
        record = run_transient(case)
        assert record.complete
        assert record.energy_increases == 0
        energies = [row["K"] for row in record.rows]
        assert len(energies) == 11
        assert all(later <= earlier * (1.0 + 1e-10) for earlier, later in zip(energies, energies[1:]))

    def test_energy_increase_rejects_step(self, monkeypatch):
        case, _ = lattice_flow_case(nu=0.01, mesh="structured:2", k=1, dt=0.05, T=0.2, problem="stokes")
        calls = []
        original = solver.step_transient

        def amplified(*args, **kwargs):
            state = original(*args, **kwargs)
            calls.append(1)
            if len(calls) == 2:
                return FlowState(state.t, 2.0 * state.velocity, state.pressure)
            return state

        monkeypatch.setattr(solver, "step_transient", amplified)
        record = run_transient(case)
        assert not record.complete
        assert record.failure.startswith("step 2")
        assert record.energy_increases == 1
        assert len(record.rows) == 2
        assert record.final_state.t == pytest.approx(0.05)
        assert len(calls) == 2
