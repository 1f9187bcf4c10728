"""ソルバーモジュール

定常 Stokes 問題、離散 Stokes 射影、BDF2 + Newton 法による非定常
Oseen / Navier–Stokes 問題を解く。鞍点系は scipy の疎 LU 分解で解き、
残差を検査してから受け入れる。
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from hdivflow.config import Config
from hdivflow.exceptions import ConfigError, NewtonConvergenceError, SolverError
from hdivflow.services.assembly import (
    FormParams,
    assemble_convection,
    assemble_convection_derivative,
    assemble_div_coupling,
    assemble_load,
    assemble_mass,
    assemble_sip,
    assemble_sip_rhs,
)
from hdivflow.services.diagnostics import divergence_sup, velocity_sup
from hdivflow.services.function_space import (
    DiscreteField,
    PressureSpace,
    VelocitySpace,
    build_pressure_space,
    build_velocity_space,
    constant_velocity_kernel,
    interpolate_velocity,
)
from hdivflow.services.mesh import mesh_from_spec

logger = logging.getLogger(__name__)

PROBLEMS = ("stokes", "oseen", "navier_stokes")
MAX_REFINEMENT_STEPS = 2

TimeField = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class SaddleSystem:
    """
    鞍点系

        [ A   Bᵀ  0   G ] [u]   [f]
        [ B   0   m   0 ] [p] = [g]
        [ 0   mᵀ  0   0 ] [λ]   [0]
        [ Gᵀ  0   0   0 ] [μ]   [c]

    m は ∫p = 0 の乗数、G の列は速度平均の拘束（粘性形式の核を固定する）。
    """
    A: sparse.spmatrix
    B: Optional[sparse.spmatrix] = None
    mean: Optional[np.ndarray] = None
    rhs_velocity: Optional[np.ndarray] = None
    rhs_pressure: Optional[np.ndarray] = None
    velocity_constraints: List[np.ndarray] = field(default_factory=list)
    constraint_values: List[float] = field(default_factory=list)

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"速度ブロックが正方ではありません: {self.A.shape}")
        if self.B is not None and self.B.shape[1] != n:
            raise ValueError(f"結合ブロックの列数 {self.B.shape[1]} が速度自由度 {n} と一致しません")
        if self.rhs_velocity is None:
            self.rhs_velocity = np.zeros(n)
        if self.mean is not None and (self.B is None or len(self.mean) != self.B.shape[0]):
            raise ValueError("平均 0 拘束の長さが圧力自由度と一致しません")


@dataclass
class TimeSteppingConfig:
    """時間積分の設定（BDF2、初回のみ BDF1）"""
    t_end: float
    dt: float
    newton_max_iterations: int = Config.NEWTON_MAX_ITERATIONS
    newton_tolerance: float = Config.NEWTON_TOLERANCE

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ConfigError(f"時間刻み dt は正である必要があります: {self.dt}")
        if self.t_end < 0.0:
            raise ConfigError(f"終了時刻 T は非負である必要があります: {self.t_end}")
        if not self.newton_tolerance > 0.0:
            raise ConfigError(f"Newton 許容誤差は正である必要があります: {self.newton_tolerance}")
        if self.newton_max_iterations < 1:
            raise ConfigError(f"Newton 最大反復回数は 1 以上である必要があります: {self.newton_max_iterations}")

    @property
    def num_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class FlowState:
    """時刻 t の速度と圧力"""
    t: float
    velocity: DiscreteField
    pressure: DiscreteField


def solve_sparse(system: SaddleSystem, tolerance: Optional[float] = None) -> Dict[str, Any]:
    """
    鞍点系を疎 LU 分解で解く

    残差が tolerance·‖rhs‖ を超える場合は反復改良を最大 2 回行う。

    Returns:
        "velocity", "pressure", "multiplier", "velocity_multipliers", "residual"

    Raises:
        SolverError: 分解が特異、または残差条件を満たさない場合
    """
    tolerance = Config.SOLVER_TOLERANCE if tolerance is None else tolerance
    n = system.A.shape[0]
    num_pressure = 0 if system.B is None else system.B.shape[0]
    has_mean = system.mean is not None and num_pressure > 0
    constraints = list(system.velocity_constraints)
    num_constraints = len(constraints)

    blocks: List[List[Any]] = [[sparse.csr_matrix(system.A)]]
    rhs = [np.asarray(system.rhs_velocity, dtype=float)]
    if num_pressure:
        blocks[0].append(system.B.T)
        blocks.append([system.B, None])
        rhs.append(np.zeros(num_pressure) if system.rhs_pressure is None else np.asarray(system.rhs_pressure, dtype=float))
    if has_mean:
        for row in blocks:
            row.append(None)
        blocks[1][2] = sparse.csr_matrix(system.mean.reshape(-1, 1))
        blocks.append([None, sparse.csr_matrix(system.mean.reshape(1, -1)), None])
        rhs.append(np.zeros(1))
    if num_constraints:
        columns = sparse.csr_matrix(np.column_stack(constraints))
        for row in blocks:
            row.append(None)
        blocks[0][-1] = columns
        blocks.append([columns.T] + [None] * (len(blocks[0]) - 1))
        rhs.append(np.asarray(system.constraint_values, dtype=float))
    # 空行ブロックの形を bmat に伝えるため、対角に 0 の疎行列を置く
    for index in range(1, len(blocks)):
        if blocks[index][index] is None:
            size = rhs[index].shape[0]
            blocks[index][index] = sparse.csr_matrix((size, size))

    matrix = sparse.bmat(blocks, format="csc")
    vector = np.concatenate(rhs)
    rhs_norm = float(np.linalg.norm(vector))

    if rhs_norm == 0.0:
        solution = np.zeros_like(vector)
        residual = 0.0
    else:
        try:
            factor = splu(matrix)
        except RuntimeError as e:
            logger.error(f"鞍点系の分解に失敗: {e} (サイズ {matrix.shape[0]}, 非零 {matrix.nnz})")
            raise SolverError(f"鞍点系が特異です: {e} (サイズ {matrix.shape[0]}, 非零 {matrix.nnz})") from e
        solution = factor.solve(vector)
        residual = float(np.linalg.norm(vector - matrix @ solution))
        steps = 0
        while residual > tolerance * rhs_norm and steps < MAX_REFINEMENT_STEPS:
            solution = solution + factor.solve(vector - matrix @ solution)
            residual = float(np.linalg.norm(vector - matrix @ solution))
            steps += 1
            logger.debug(f"反復改良 {steps}: 相対残差 {residual / rhs_norm:.3e}")
        if not np.all(np.isfinite(solution)) or residual > tolerance * rhs_norm:
            logger.error(f"鞍点系の残差が大きすぎます: {residual / rhs_norm:.3e} (許容 {tolerance:.1e})")
            raise SolverError(f"鞍点系の相対残差 {residual / rhs_norm:.3e} が許容値 {tolerance:.1e} を超えました "
                              f"(サイズ {matrix.shape[0]}, 非零 {matrix.nnz})")

    offset = n
    result = {"velocity": solution[:n], "pressure": np.zeros(0), "multiplier": 0.0,
              "velocity_multipliers": np.zeros(0), "residual": residual}
    if num_pressure:
        result["pressure"] = solution[offset:offset + num_pressure]
        offset += num_pressure
    if has_mean:
        result["multiplier"] = float(solution[offset])
        offset += 1
    if num_constraints:
        result["velocity_multipliers"] = solution[offset:offset + num_constraints]
    return result


def build_spaces(case) -> Tuple[VelocitySpace, PressureSpace]:
    """
    ケース設定から速度空間と圧力空間を構築

    Args:
        case: mesh, k, bc を持つ設定（CaseConfig など）
    """
    mesh = mesh_from_spec(case.mesh)
    velocity_space = build_velocity_space(mesh, case.k, case.bc)
    return velocity_space, build_pressure_space(velocity_space.mesh, case.k)


def divergence_bound(u_h: DiscreteField, tolerance: Optional[float] = None) -> float:
    """
    発散の許容値 max(tolerance·max|u_h|, DIVERGENCE_FLOOR)

    Args:
        u_h: 速度場
        tolerance: 相対許容値（既定は Config.DIVERGENCE_TOLERANCE）
    """
    tolerance = Config.DIVERGENCE_TOLERANCE if tolerance is None else tolerance
    return max(tolerance * velocity_sup(u_h), Config.DIVERGENCE_FLOOR)


def _check_divergence(u_h: DiscreteField, context: str) -> float:
    divergence = divergence_sup(u_h)
    bound = divergence_bound(u_h)
    if divergence > bound:
        logger.error(f"{context}: 発散 {divergence:.3e} が許容値 {bound:.3e} を超えました")
        raise SolverError(f"{context}: 速度場の発散 {divergence:.3e} が許容値 {bound:.3e} を超えました")
    return divergence


def _kernel_constraints(velocity_space: VelocitySpace, viscous: sparse.spmatrix) -> List[np.ndarray]:
    mass = assemble_mass(velocity_space)
    return [mass @ c for c in constant_velocity_kernel(velocity_space, viscous)]


def solve_stationary_stokes(spaces: Tuple[VelocitySpace, PressureSpace], nu: float, f=None,
                            sigma: Optional[float] = None, sigma_wall: Optional[float] = None) -> FlowState:
    """
    定常 Stokes 問題 ν a_h(u, v) + b(v, p) − b(u, q) = (f, v) を解く

    粘性形式の核に定数速度場がある場合は速度平均 0 を課す。

    Args:
        spaces: (速度空間, 圧力空間)
        nu: 粘性係数 (> 0)
        f: 外力 f(x)（None なら 0）
        sigma, sigma_wall: SIP ペナルティ
    """
    if not nu > 0.0:
        raise ValueError(f"定常 Stokes 問題には正の粘性係数が必要です: {nu}")
    velocity_space, pressure_space = spaces
    viscous = assemble_sip(velocity_space, nu, sigma, sigma_wall)
    constraints = _kernel_constraints(velocity_space, viscous)
    system = SaddleSystem(
        A=viscous,
        B=assemble_div_coupling(velocity_space, pressure_space),
        mean=pressure_space.mean_functional(),
        rhs_velocity=assemble_load(f, velocity_space),
        velocity_constraints=constraints,
        constraint_values=[0.0] * len(constraints),
    )
    result = solve_sparse(system)
    velocity = DiscreteField(velocity_space, result["velocity"])
    pressure = DiscreteField(pressure_space, result["pressure"])
    _check_divergence(velocity, "定常 Stokes")
    logger.info(f"定常 Stokes を求解: 速度自由度 {velocity_space.num_dofs}, 圧力自由度 {pressure_space.num_dofs}")
    return FlowState(0.0, velocity, pressure)


def stokes_projection(w, spaces: Tuple[VelocitySpace, PressureSpace], grad_w=None,
                      sigma: Optional[float] = None, sigma_wall: Optional[float] = None) -> DiscreteField:
    """
    離散 Stokes 射影 π_s w

    離散発散ゼロの全 v_h に対して a_h(π_s w, v_h) = a_h(w, v_h) を満たす。
    粘性係数は含まない。

    Args:
        w: 発散ゼロの解析関数 w(x)、または同じ空間の離散場
        spaces: (速度空間, 圧力空間)
        grad_w: w の勾配（解析関数の場合は必須）
        sigma, sigma_wall: SIP ペナルティ

    Raises:
        ValueError: w が発散ゼロでない場合
    """
    velocity_space, pressure_space = spaces
    viscous = assemble_sip(velocity_space, 1.0, sigma, sigma_wall)

    if isinstance(w, DiscreteField):
        interpolant = w
        rhs = viscous @ w.coefficients
    else:
        if grad_w is None:
            raise ValueError("解析関数の Stokes 射影には勾配 grad_w が必要です")
        interpolant = interpolate_velocity(w, velocity_space)
        rhs = assemble_sip_rhs(velocity_space, w, grad_w, sigma, sigma_wall)

    divergence = divergence_sup(interpolant)
    if divergence > divergence_bound(interpolant, 1e-8):
        logger.error(f"Stokes 射影の入力が発散ゼロではありません: {divergence:.3e}")
        raise ValueError(f"Stokes 射影の入力が発散ゼロではありません (max|π_0 ∇·w| = {divergence:.3e})")

    kernel = constant_velocity_kernel(velocity_space, viscous)
    mass = assemble_mass(velocity_space)
    constraints = [mass @ c for c in kernel]
    values = [float(g @ interpolant.coefficients) for g in constraints]
    system = SaddleSystem(
        A=viscous,
        B=assemble_div_coupling(velocity_space, pressure_space),
        mean=pressure_space.mean_functional(),
        rhs_velocity=rhs,
        velocity_constraints=constraints,
        constraint_values=values,
    )
    result = solve_sparse(system)
    projected = DiscreteField(velocity_space, result["velocity"])
    _check_divergence(projected, "Stokes 射影")
    return projected


def _convective_at(beta, t: float):
    """時刻 t の対流場（離散場はそのまま、関数は β(t, x) として扱う）"""
    if beta is None or isinstance(beta, DiscreteField):
        return beta
    return lambda x: beta(t, x)


def step_transient(history: Sequence[FlowState], dt: float, problem: str, params: FormParams,
                   forcing: Optional[TimeField] = None,
                   newton_max_iterations: int = Config.NEWTON_MAX_ITERATIONS,
                   newton_tolerance: float = Config.NEWTON_TOLERANCE,
                   iterations: Optional[List[int]] = None) -> FlowState:
    """
    非定常問題を 1 ステップ進める

    history が 2 状態以上なら BDF2、1 状態なら BDF1。
    Oseen は β(t_{n+1}, x) で 1 回の線形解、Navier–Stokes は β = u の Newton 反復。

    Args:
        history: 過去の状態（最後が現在）
        dt: 時間刻み
        problem: "stokes" | "oseen" | "navier_stokes"
        params: 形式パラメータ（Oseen の beta は β(t, x)）
        forcing: 外力 f(t, x)（None なら 0）
        newton_max_iterations: Newton 最大反復回数
        newton_tolerance: Newton の相対残差許容値
        iterations: 与えられれば Newton 反復回数を追記する

    Raises:
        NewtonConvergenceError: Newton 法が収束しない場合
        SolverError: 線形解法の失敗、または発散条件の違反
    """
    if problem not in PROBLEMS:
        raise ConfigError(f"未知の問題種別です: {problem}")
    if not dt > 0.0:
        raise ConfigError(f"時間刻み dt は正である必要があります: {dt}")
    current = history[-1]
    velocity_space = current.velocity.space
    pressure_space = current.pressure.space
    k = velocity_space.degree
    t_new = current.t + dt

    mass = assemble_mass(velocity_space)
    viscous = assemble_sip(velocity_space, params.nu, params.penalty(k), params.wall_penalty(k))
    coupling = assemble_div_coupling(velocity_space, pressure_space)
    mean = pressure_space.mean_functional()

    if len(history) >= 2:
        alpha = 1.5
        memory = (2.0 * current.velocity.coefficients - 0.5 * history[-2].velocity.coefficients) / dt
    else:
        alpha = 1.0
        memory = current.velocity.coefficients / dt
    rhs = mass @ memory
    if forcing is not None:
        rhs = rhs + assemble_load(lambda x: forcing(t_new, x), velocity_space)
    base = (alpha / dt) * mass + viscous

    if problem in ("stokes", "oseen"):
        operator = base
        if problem == "oseen":
            operator = operator + assemble_convection(velocity_space, _convective_at(params.beta, t_new), params.gamma)
        result = solve_sparse(SaddleSystem(A=operator, B=coupling, mean=mean, rhs_velocity=rhs))
        if iterations is not None:
            iterations.append(1)
        velocity = DiscreteField(velocity_space, result["velocity"])
        pressure = DiscreteField(pressure_space, result["pressure"])
    else:
        velocity, pressure = _newton(current, base, coupling, mean, rhs, params.gamma,
                                     newton_max_iterations, newton_tolerance, iterations)

    _check_divergence(velocity, f"t={t_new:.6g}")
    return FlowState(t_new, velocity, pressure)


def _newton(current: FlowState, base, coupling, mean, rhs, gamma: float, max_iterations: int,
            tolerance: float, iterations: Optional[List[int]]) -> Tuple[DiscreteField, DiscreteField]:
    """Navier–Stokes の Newton 反復（完全な解析的ヤコビアン）"""
    velocity_space = current.velocity.space
    velocity = current.velocity.copy()
    pressure = current.pressure.copy()
    history: List[float] = []

    for iteration in range(max_iterations + 1):
        convection = assemble_convection(velocity_space, velocity, gamma)
        u = velocity.coefficients
        residual = base @ u + convection @ u + coupling.T @ pressure.coefficients - rhs
        reference = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(base @ u)), 1e-300)
        relative = float(np.linalg.norm(residual)) / reference
        history.append(relative)
        logger.debug(f"Newton 反復 {iteration}: 相対残差 {relative:.3e}")
        if relative < tolerance:
            if iterations is not None:
                iterations.append(iteration)
            return velocity, pressure
        if iteration == max_iterations:
            break
        derivative = assemble_convection_derivative(velocity_space, velocity, gamma)
        jacobian = base + convection + derivative
        result = solve_sparse(SaddleSystem(A=jacobian, B=coupling, mean=mean, rhs_velocity=derivative @ u + rhs))
        velocity = DiscreteField(velocity_space, result["velocity"])
        pressure = DiscreteField(current.pressure.space, result["pressure"])

    logger.error(f"Newton 法が {max_iterations} 回で収束しませんでした: 残差履歴 {history}")
    raise NewtonConvergenceError(f"Newton 法が {max_iterations} 回で収束しませんでした (最終相対残差 {history[-1]:.3e})",
                                 history)


def save_checkpoint(path: Union[str, Path], state: FlowState, header: Dict[str, Any]) -> Path:
    """
    状態を .npz（JSON ヘッダー付き）で保存

    Args:
        path: 出力パス
        state: 保存する状態
        header: case, mesh, k, sigma, gamma, nu, bc などの情報
    """
    path = Path(path).with_suffix(".npz")
    meta = dict(header)
    meta["t"] = state.t
    np.savez(path, header=np.array(json.dumps(meta, sort_keys=True)),
             velocity=state.velocity.coefficients, pressure=state.pressure.coefficients)
    logger.debug(f"チェックポイントを保存: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """
    save_checkpoint の出力を読み込む

    Returns:
        "header"（辞書）, "velocity", "pressure"（係数配列）
    """
    with np.load(path, allow_pickle=False) as data:
        return {"header": json.loads(str(data["header"])), "velocity": data["velocity"].copy(),
                "pressure": data["pressure"].copy()}


def restore_state(checkpoint: Dict[str, Any]) -> FlowState:
    """チェックポイントから空間を再構築して状態を復元"""
    header = checkpoint["header"]
    velocity_space, pressure_space = build_spaces(SimpleNamespace(mesh=header["mesh"], k=int(header["k"]), bc=header["bc"]))
    return FlowState(float(header["t"]), DiscreteField(velocity_space, checkpoint["velocity"]),
                     DiscreteField(pressure_space, checkpoint["pressure"]))


def run_transient(case, out_dir: Optional[Union[str, Path]] = None):
    """
    ケースを時間発展させ、診断量を記録する

    ステップが失敗した場合（外力なしの問題での運動エネルギー増加を含む）は
    その時点までの記録を incomplete として返す。

    Args:
        case: CaseConfig
        out_dir: スナップショット・チェックポイントの出力先（None なら書き出さない）

    Returns:
        RunRecord
    """
    from hdivflow.services.benchmarks import case_setup
    from hdivflow.services.diagnostics import RunRecord

    started = time.perf_counter()
    stepping = TimeSteppingConfig(t_end=case.T, dt=case.dt)
    setup = case_setup(case)
    record = RunRecord(case=case.header())
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    state = setup.initial_state()
    _check_divergence(state.velocity, "初期条件")
    setup.observe(record, state, step=0, out_dir=out_path)
    history = [state]
    logger.info(f"実行開始: {case.case} (ステップ数 {stepping.num_steps}, dt={case.dt:g})")

    for step in range(1, stepping.num_steps + 1):
        try:
            state = step_transient(history[-2:], case.dt, setup.problem, setup.params, setup.forcing,
                                   newton_max_iterations=stepping.newton_max_iterations,
                                   newton_tolerance=stepping.newton_tolerance,
                                   iterations=record.newton_iterations)
            # エネルギー増加はステップの棄却として扱う
            setup.observe(record, state, step=step, out_dir=out_path, final=step == stepping.num_steps)
        except SolverError as e:
            logger.error(f"ステップ {step} (t={history[-1].t + case.dt:.6g}) で失敗: {e}")
            record.complete = False
            record.failure = f"step {step}: {e}"
            break
        history = [history[-1], state]

    record.final_state = history[-1]
    if out_path is not None:
        record.checkpoints.append(str(save_checkpoint(out_path / "checkpoint_final", history[-1], case.header())))
    record.wall_time = time.perf_counter() - started
    logger.info(f"実行終了: {case.case} (完了 {record.complete}, 経過 {record.wall_time:.2f} 秒)")
    return record
