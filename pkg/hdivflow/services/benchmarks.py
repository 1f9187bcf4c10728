"""ベンチマークモジュール

平面格子流、Kelvin–Helmholtz 混合層、減衰 2 次元乱流、製造解によるケースの
定義と、ケース設定ファイルの解析、収束次数調査の実行。
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import trapezoid

from hdivflow.config import Config
from hdivflow.exceptions import ConfigError, EnergyStabilityError
from hdivflow.services.assembly import FormParams
from hdivflow.services.diagnostics import (
    RunRecord,
    divergence_sup,
    energy_spectrum,
    enstrophy,
    error_norms,
    export_fields,
    fit_spectrum_slope,
    kinetic_energy,
    pressure_error,
    vorticity_thickness,
    write_spectrum,
)
from hdivflow.services.function_space import (
    DiscreteField,
    interpolate_velocity,
    normalize_bc,
    periodic_axes_of,
    project_pressure,
)
from hdivflow.services.mesh import mesh_statistics
from hdivflow.services.solver import (
    PROBLEMS,
    FlowState,
    build_spaces,
    save_checkpoint,
    solve_stationary_stokes,
    step_transient,
    stokes_projection,
)
from hdivflow.services.utils import (
    calculate_loglog_slope,
    calculate_observed_orders,
    check_order,
    parse_float_list,
    parse_text_list,
    worker_count,
)

logger = logging.getLogger(__name__)

CASES = ("lattice", "kelvin_helmholtz", "decaying_turbulence", "manufactured_stokes", "manufactured_oseen")
INITIAL_MODES = ("interpolate", "stokes_projection")
EXPORT_FORMATS = ("vtk", "csv", "none")

# 平面格子流
LATTICE_NU = 4e-6

# Kelvin–Helmholtz 混合層
KH_DELTA0 = 1.0 / 28.0
KH_U_INF = 1.0
KH_NOISE = 1e-3
KH_NU = 1.0 / 280000.0
KH_TIME_UNIT = KH_DELTA0 / KH_U_INF

# 減衰乱流の渦配列
TURBULENCE_AMPLITUDE = 1e-2
TURBULENCE_SHARPNESS = 1e4

TWO_PI = 2.0 * math.pi

TimeVector = Callable[[float, np.ndarray], np.ndarray]
TimeScalar = Callable[[float, np.ndarray], np.ndarray]

CONVERGENCE_HEADER = ["h", "num_dofs", "l2", "energy", "upwind", "combined", "pressure",
                      "l2_order", "energy_order", "combined_order"]


# ----------------------------------------------------------------------
# ケース設定
# ----------------------------------------------------------------------
CASE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "lattice": {"nu": LATTICE_NU, "k": 2, "mesh": "structured:8", "dt": 0.01, "T": 0.1,
                "meshes": ["structured:8", "structured:16", "structured:32"], "order_tolerance": 0.3},
    "kelvin_helmholtz": {"nu": KH_NU, "k": 3, "mesh": "structured:28", "dt": KH_TIME_UNIT / 4.0,
                         "T": 50.0 * KH_TIME_UNIT},
    "decaying_turbulence": {"nu": 5e-5, "k": 2, "mesh": "structured:32", "dt": 0.01, "T": 2.0,
                            "n_v": 8, "spectrum_times": [2.0]},
    "manufactured_stokes": {"nu": 1.0, "k": 2, "mesh": "structured:4", "dt": 0.01, "T": 0.0,
                            "meshes": ["structured:4", "structured:8", "structured:16"],
                            "order_tolerance": 0.2},
    "manufactured_oseen": {"nu": LATTICE_NU, "k": 2, "mesh": "structured:8", "dt": 0.05, "T": 0.2,
                           "meshes": ["structured:8", "structured:16", "structured:32"],
                           "order_tolerance": 0.3},
}

CASE_PROBLEMS = {
    "lattice": "navier_stokes",
    "kelvin_helmholtz": "navier_stokes",
    "decaying_turbulence": "navier_stokes",
    "manufactured_stokes": "stokes",
    "manufactured_oseen": "oseen",
}


@dataclass
class CaseConfig:
    """
    ベンチマーク 1 件の設定

    境界条件はケース ID から決まる（periodic キーで周期軸を上書きできる）。
    """
    case: str
    nu: float
    k: int
    mesh: str
    dt: float
    T: float
    gamma: float = Config.DEFAULT_GAMMA
    sigma: Optional[float] = None
    out_dir: str = Config.DEFAULT_OUT_DIR
    spectrum_times: List[float] = field(default_factory=list)
    problem: Optional[str] = None
    initial: str = "interpolate"
    output_every: int = 1
    snapshot_every: int = 0
    export_format: str = "vtk"
    n_v: int = 8
    meshes: List[str] = field(default_factory=list)
    expected_order: Optional[float] = None
    order_tolerance: float = 0.2
    grid_n: int = Config.SPECTRUM_GRID
    kappa_min: float = 10.0
    kappa_max: float = 40.0
    periodic: Optional[str] = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ConfigError(f"未知のケースです: {self.case} (候補: {', '.join(CASES)})")
        if self.nu < 0.0:
            raise ConfigError(f"粘性係数 nu は非負である必要があります: {self.nu}")
        if not 1 <= self.k <= Config.MAX_DEGREE:
            raise ConfigError(f"次数 k は 1 から {Config.MAX_DEGREE} の範囲で指定してください: {self.k}")
        if not self.dt > 0.0:
            raise ConfigError(f"時間刻み dt は正である必要があります: {self.dt}")
        if self.T < 0.0:
            raise ConfigError(f"終了時刻 T は非負である必要があります: {self.T}")
        if self.gamma < 0.0:
            raise ConfigError(f"風上パラメータ gamma は非負である必要があります: {self.gamma}")
        if self.sigma is not None and not self.sigma > 0.0:
            raise ConfigError(f"ペナルティ sigma は正である必要があります: {self.sigma}")
        if self.problem is not None:
            if self.problem not in PROBLEMS:
                raise ConfigError(f"未知の問題種別です: {self.problem}")
            if self.case != "lattice" and self.problem != CASE_PROBLEMS[self.case]:
                raise ConfigError(f"ケース {self.case} の問題種別は {CASE_PROBLEMS[self.case]} に固定です")
        if self.initial not in INITIAL_MODES:
            raise ConfigError(f"未知の初期条件モードです: {self.initial}")
        if self.export_format not in EXPORT_FORMATS:
            raise ConfigError(f"未知の出力形式です: {self.export_format}")
        if self.output_every < 1 or self.snapshot_every < 0:
            raise ConfigError("output_every は 1 以上、snapshot_every は 0 以上で指定してください")
        if self.case == "decaying_turbulence" and self.n_v < 2:
            raise ConfigError(f"渦の数 n_v は 2 以上である必要があります: {self.n_v}")
        if self.grid_n < 2:
            raise ConfigError(f"スペクトル格子 grid_n は 2 以上である必要があります: {self.grid_n}")
        if self.order_tolerance < 0.0:
            raise ConfigError(f"order_tolerance は非負である必要があります: {self.order_tolerance}")
        # bc の検証を兼ねる
        self.bc

    @property
    def resolved_problem(self) -> str:
        return self.problem or CASE_PROBLEMS[self.case]

    @property
    def bc(self) -> Dict[str, str]:
        """ケース ID から決まる境界条件"""
        if self.case in ("lattice", "decaying_turbulence", "manufactured_oseen"):
            walls = {"left": "periodic", "right": "periodic", "bottom": "periodic", "top": "periodic"}
        elif self.case == "kelvin_helmholtz":
            walls = {"left": "periodic", "right": "periodic", "bottom": "freeslip", "top": "freeslip"}
        else:
            walls = {"left": "noslip", "right": "noslip", "bottom": "noslip", "top": "noslip"}
        if self.periodic is not None:
            axes = [] if self.periodic.strip().lower() in ("", "none") else parse_text_list(self.periodic)
            for axis, pair in (("x1", ("left", "right")), ("x2", ("bottom", "top"))):
                for wall in pair:
                    if axis in axes:
                        walls[wall] = "periodic"
                    elif walls[wall] == "periodic":
                        walls[wall] = "noslip"
            unknown = set(axes) - {"x1", "x2"}
            if unknown:
                raise ConfigError(f"未知の周期軸です: {', '.join(sorted(unknown))}")
        return normalize_bc(walls)

    @property
    def fully_periodic(self) -> bool:
        return len(periodic_axes_of(self.bc)) == 2

    def header(self) -> Dict[str, Any]:
        """チェックポイントと要約に書き出すメタデータ"""
        return {"case": self.case, "mesh": self.mesh, "k": self.k, "sigma": self.sigma, "gamma": self.gamma,
                "nu": self.nu, "bc": self.bc, "problem": self.resolved_problem, "dt": self.dt}


_FLOAT_KEYS = ("nu", "dt", "T", "gamma", "expected_order", "order_tolerance", "kappa_min", "kappa_max")
_OPTIONAL_FLOAT_KEYS = ("sigma", "expected_order")
_INT_KEYS = ("k", "output_every", "snapshot_every", "n_v", "grid_n")
_TEXT_KEYS = ("case", "mesh", "out_dir", "problem", "initial", "export_format", "periodic")
CASE_KEYS = tuple(f.name for f in fields(CaseConfig))


def _convert(key: str, text: str) -> Any:
    value = text.strip()
    try:
        if key in _OPTIONAL_FLOAT_KEYS and value.lower() in ("", "none", "default"):
            return None
        if key in _FLOAT_KEYS or key in _OPTIONAL_FLOAT_KEYS:
            return float(value)
        if key in _INT_KEYS:
            return int(value)
        if key == "spectrum_times":
            return parse_float_list(value)
        if key == "meshes":
            return parse_text_list(value)
    except ValueError as e:
        raise ConfigError(f"{key} の値を解釈できません: {value!r}") from e
    return value


def _parse_pairs(lines: Sequence[str], source: str) -> Dict[str, str]:
    result: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        key = key.strip()
        if not separator or not key:
            raise ConfigError(f"{source} {number}行目: key = value の形式ではありません: {raw.strip()!r}")
        if key not in CASE_KEYS:
            raise ConfigError(f"{source} {number}行目: 未知のキーです: {key}")
        result[key] = value.strip()
    return result


def parse_case_file(text: str, overrides: Union[None, Sequence[str], Mapping[str, Any]] = None) -> CaseConfig:
    """
    フラットな key = value 形式のケース設定を解析

    空行と # 以降は無視する。overrides（"key=value" の列または辞書）は
    ファイルの解析後に適用する。

    Args:
        text: 設定ファイルの内容
        overrides: 上書き設定

    Returns:
        CaseConfig

    Raises:
        ConfigError: 書式エラー、未知のキー、値の誤り、case 未指定
    """
    values = _parse_pairs(text.splitlines(), "設定ファイル")
    if overrides:
        if isinstance(overrides, Mapping):
            items = {str(key): str(value) for key, value in overrides.items()}
            unknown = [key for key in items if key not in CASE_KEYS]
            if unknown:
                raise ConfigError(f"--set: 未知のキーです: {', '.join(unknown)}")
        else:
            items = _parse_pairs(list(overrides), "--set")
        values.update(items)

    case = values.get("case", "").strip()
    if not case:
        raise ConfigError("case が指定されていません")
    if case not in CASE_DEFAULTS:
        raise ConfigError(f"未知のケースです: {case} (候補: {', '.join(CASES)})")
    settings = {key: list(value) if isinstance(value, list) else value for key, value in CASE_DEFAULTS[case].items()}
    settings.update({key: _convert(key, value) for key, value in values.items()})
    try:
        return CaseConfig(**settings)
    except TypeError as e:
        raise ConfigError(f"ケース設定が不完全です: {e}") from e


def load_case(path: Optional[Union[str, Path]], overrides: Optional[Sequence[str]] = None) -> CaseConfig:
    """設定ファイル（None なら上書きのみ）から CaseConfig を作る"""
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    case = parse_case_file(text, overrides)
    logger.info(f"ケース設定を読み込み: {case.case} (mesh={case.mesh}, k={case.k}, nu={case.nu:g})")
    return case


# ----------------------------------------------------------------------
# 厳密解・初期場
# ----------------------------------------------------------------------
@dataclass
class ExactSolution:
    """
    厳密解

    Attributes:
        velocity: u(t, x) -> (N, 2)
        gradient: ∇u(t, x) -> (N, 2, 2)、[i, j] = ∂u_i/∂x_j
        pressure: p(t, x) -> (N,)
        forcing: f(t, x) -> (N, 2)（None なら 0）
        kinetic_energy: K(t)（既知の場合）
        enstrophy: E(t)（既知の場合）
    """
    velocity: TimeVector
    gradient: TimeVector
    pressure: TimeScalar
    forcing: Optional[TimeVector] = None
    kinetic_energy: Optional[Callable[[float], float]] = None
    enstrophy: Optional[Callable[[float], float]] = None

    def velocity_at(self, t: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self.velocity(t, x)

    def gradient_at(self, t: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self.gradient(t, x)

    def pressure_at(self, t: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self.pressure(t, x)

    def forcing_at(self, t: float) -> Optional[Callable[[np.ndarray], np.ndarray]]:
        if self.forcing is None:
            return None
        return lambda x: self.forcing(t, x)


class SeparableStream:
    """
    変数分離形の流れ関数 ψ(x) = a·X(x1)·Y(x2) から u = (∂x2 ψ, −∂x1 ψ) を作る

    X, Y は s -> (値, 1 階微分, 2 階微分) を返す。
    """

    def __init__(self, x_factor: Callable, y_factor: Callable, amplitude: float = 1.0):
        self.x_factor = x_factor
        self.y_factor = y_factor
        self.amplitude = amplitude

    def stream(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.amplitude * self.x_factor(x[..., 0])[0] * self.y_factor(x[..., 1])[0]

    def velocity(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        fx, dfx, _ = self.x_factor(x[..., 0])
        fy, dfy, _ = self.y_factor(x[..., 1])
        return self.amplitude * np.stack([fx * dfy, -dfx * fy], axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        fx, dfx, ddfx = self.x_factor(x[..., 0])
        fy, dfy, ddfy = self.y_factor(x[..., 1])
        a = self.amplitude
        row1 = np.stack([dfx * dfy, fx * ddfy], axis=-1)
        row2 = np.stack([-ddfx * fy, -dfx * dfy], axis=-1)
        return a * np.stack([row1, row2], axis=-2)


def lattice_initial_velocity(x: np.ndarray) -> np.ndarray:
    """u₀ = (sin2πx1 sin2πx2, cos2πx1 cos2πx2)"""
    x = np.asarray(x, dtype=float)
    s1, c1 = np.sin(TWO_PI * x[..., 0]), np.cos(TWO_PI * x[..., 0])
    s2, c2 = np.sin(TWO_PI * x[..., 1]), np.cos(TWO_PI * x[..., 1])
    return np.stack([s1 * s2, c1 * c2], axis=-1)


def _lattice_initial_gradient(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    s1, c1 = np.sin(TWO_PI * x[..., 0]), np.cos(TWO_PI * x[..., 0])
    s2, c2 = np.sin(TWO_PI * x[..., 1]), np.cos(TWO_PI * x[..., 1])
    row1 = np.stack([c1 * s2, s1 * c2], axis=-1)
    row2 = np.stack([-s1 * c2, -c1 * s2], axis=-1)
    return TWO_PI * np.stack([row1, row2], axis=-2)


def lattice_flow_solution(nu: float = LATTICE_NU, problem: str = "navier_stokes") -> ExactSolution:
    """
    平面格子流の厳密解

    u(t) = u₀ e^{−8π²νt}、p = ¼(cos4πx1 − cos4πx2) e^{−16π²νt}、f = 0。
    Stokes 問題では対流項がないので圧力は 0。
    """
    if nu < 0.0:
        raise ValueError(f"粘性係数が負です: {nu}")
    rate = 8.0 * math.pi ** 2 * nu

    def velocity(t, x):
        return lattice_initial_velocity(x) * math.exp(-rate * t)

    def gradient(t, x):
        return _lattice_initial_gradient(x) * math.exp(-rate * t)

    def pressure(t, x):
        x = np.asarray(x, dtype=float)
        if problem == "stokes":
            return np.zeros(x.shape[:-1])
        return 0.25 * (np.cos(2.0 * TWO_PI * x[..., 0]) - np.cos(2.0 * TWO_PI * x[..., 1])) * math.exp(-2.0 * rate * t)

    return ExactSolution(
        velocity=velocity,
        gradient=gradient,
        pressure=pressure,
        kinetic_energy=lambda t: 0.25 * math.exp(-2.0 * rate * t),
        enstrophy=lambda t: 2.0 * math.pi ** 2 * math.exp(-2.0 * rate * t),
    )


def lattice_flow_residual(nu: float, t: float, x: np.ndarray) -> np.ndarray:
    """厳密解を ∂t u − νΔu + (u·∇)u + ∇p に代入した残差（0 になるはず）"""
    x = np.asarray(x, dtype=float)
    solution = lattice_flow_solution(nu)
    decay = math.exp(-8.0 * math.pi ** 2 * nu * t)
    u = solution.velocity(t, x)
    gradient = solution.gradient(t, x)
    time_derivative = -8.0 * math.pi ** 2 * nu * u
    laplacian = -8.0 * math.pi ** 2 * u
    convection = np.einsum("...ij,...j->...i", gradient, u)
    pressure_gradient = math.pi * np.stack([-np.sin(2.0 * TWO_PI * x[..., 0]), np.sin(2.0 * TWO_PI * x[..., 1])], axis=-1)
    return time_derivative - nu * laplacian + convection + pressure_gradient * decay ** 2


def lattice_flow_case(nu: float = LATTICE_NU, mesh: str = "structured:8", k: int = 2, dt: float = 0.01,
                      T: float = 0.1, **overrides) -> Tuple[CaseConfig, ExactSolution]:
    """平面格子流のケース（全周期、f = 0）と厳密解"""
    case = CaseConfig(case="lattice", nu=nu, mesh=str(mesh), k=k, dt=dt, T=T, **overrides)
    return case, lattice_flow_solution(nu, case.resolved_problem)


def _kh_x_factor(s):
    a, b = 4.0 * TWO_PI, 10.0 * TWO_PI
    value = np.cos(a * s) + np.cos(b * s)
    first = -a * np.sin(a * s) - b * np.sin(b * s)
    second = -a ** 2 * np.cos(a * s) - b ** 2 * np.cos(b * s)
    return value, first, second


def _kh_y_factor(s):
    r = s - 0.5
    value = np.exp(-r ** 2 / KH_DELTA0 ** 2)
    first = -2.0 * r / KH_DELTA0 ** 2 * value
    second = (4.0 * r ** 2 / KH_DELTA0 ** 4 - 2.0 / KH_DELTA0 ** 2) * value
    return value, first, second


KH_PERTURBATION = SeparableStream(_kh_x_factor, _kh_y_factor, KH_NOISE * KH_U_INF)


def kelvin_helmholtz_initial(x: np.ndarray) -> np.ndarray:
    """tanh 型せん断層 + 流れ関数による摂動"""
    x = np.asarray(x, dtype=float)
    u = KH_PERTURBATION.velocity(x)
    u[..., 0] += KH_U_INF * np.tanh((2.0 * x[..., 1] - 1.0) / KH_DELTA0)
    return u


def kelvin_helmholtz_initial_gradient(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    gradient = KH_PERTURBATION.gradient(x)
    s = (2.0 * x[..., 1] - 1.0) / KH_DELTA0
    gradient[..., 0, 1] += KH_U_INF * (2.0 / KH_DELTA0) / np.cosh(s) ** 2
    return gradient


def kelvin_helmholtz_case(mesh: str = "structured:28", k: int = 3, dt: float = KH_TIME_UNIT / 4.0,
                          T: Optional[float] = None, **overrides) -> CaseConfig:
    """
    Kelvin–Helmholtz 混合層（x1 周期、x2 壁は free-slip、f = 0）

    T の既定は 50 t̄（t̄ = δ₀/u∞）。
    """
    T = 50.0 * KH_TIME_UNIT if T is None else T
    return CaseConfig(case="kelvin_helmholtz", nu=KH_NU, mesh=str(mesh), k=k, dt=dt, T=T, **overrides)


def _alternating_gaussians(n_v: int):
    centres = np.arange(1, n_v + 1) / (n_v + 1)
    signs = (-1.0) ** np.arange(1, n_v + 1)

    def factor(s):
        r = np.asarray(s, dtype=float)[..., None] - centres
        g = signs * np.exp(-TURBULENCE_SHARPNESS * r ** 2)
        first = -2.0 * TURBULENCE_SHARPNESS * r * g
        second = (4.0 * TURBULENCE_SHARPNESS ** 2 * r ** 2 - 2.0 * TURBULENCE_SHARPNESS) * g
        return g.sum(axis=-1), first.sum(axis=-1), second.sum(axis=-1)

    return factor


def turbulence_stream(n_v: int) -> SeparableStream:
    """
    n_v × n_v 個の逆回転渦の流れ関数

    ψ = a Σ_{k,j} (−1)^{k+j} exp(−s[(x1 − k/(n_v+1))² + (x2 − j/(n_v+1))²]) は
    x1 と x2 の因子の積に分解できる。
    """
    if n_v < 2:
        raise ValueError(f"渦の数 n_v は 2 以上である必要があります: {n_v}")
    factor = _alternating_gaussians(n_v)
    return SeparableStream(factor, factor, TURBULENCE_AMPLITUDE)


def decaying_turbulence_case(nu: float = 5e-5, n_v: int = 8, mesh: str = "structured:32", k: int = 2,
                             dt: float = 0.01, T: float = 2.0, **overrides) -> CaseConfig:
    """減衰 2 次元乱流（全周期、f = 0）"""
    overrides.setdefault("spectrum_times", [T])
    return CaseConfig(case="decaying_turbulence", nu=nu, n_v=n_v, mesh=str(mesh), k=k, dt=dt, T=T, **overrides)


_BUMP = Polynomial([0.0, 0.0, 1.0, -2.0, 1.0])


def manufactured_stokes_solution(nu: float = 1.0) -> ExactSolution:
    """
    no-slip 壁の定常 Stokes 製造解

    ψ = g(x1) g(x2)、g(s) = s²(1−s)²、u = (∂x2 ψ, −∂x1 ψ)、p = x1³ + x2³ − ½、
    f = −νΔu + ∇p。
    """
    g = [_BUMP.deriv(m) if m else _BUMP for m in range(4)]
    stream = SeparableStream(lambda s: (g[0](s), g[1](s), g[2](s)), lambda s: (g[0](s), g[1](s), g[2](s)))

    def forcing(t, x):
        x = np.asarray(x, dtype=float)
        a, b = x[..., 0], x[..., 1]
        laplacian1 = g[2](a) * g[1](b) + g[0](a) * g[3](b)
        laplacian2 = -(g[3](a) * g[0](b) + g[1](a) * g[2](b))
        return np.stack([-nu * laplacian1 + 3.0 * a ** 2, -nu * laplacian2 + 3.0 * b ** 2], axis=-1)

    def pressure(t, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] ** 3 + x[..., 1] ** 3 - 0.5

    return ExactSolution(
        velocity=lambda t, x: stream.velocity(x),
        gradient=lambda t, x: stream.gradient(x),
        pressure=pressure,
        forcing=forcing,
    )


# ----------------------------------------------------------------------
# 実行時のケース構成
# ----------------------------------------------------------------------
def initial_flow_state(spaces, velocity: Callable, gradient: Optional[Callable], mode: str, params: FormParams,
                       pressure: Optional[Callable] = None) -> FlowState:
    """
    t = 0 の状態を作る

    Args:
        spaces: (速度空間, 圧力空間)
        velocity: 初期速度 u₀(x)
        gradient: ∇u₀(x)（Stokes 射影に必要）
        mode: "interpolate"（j_h u₀）または "stokes_projection"（π_s u₀）
        params: ペナルティを取り出す形式パラメータ
        pressure: 初期圧力 p₀(x)（None なら 0）
    """
    velocity_space, pressure_space = spaces
    if mode == "stokes_projection":
        if gradient is None:
            raise ConfigError("勾配が与えられていないため Stokes 射影の初期条件を使えません")
        velocity_h = stokes_projection(velocity, spaces, grad_w=gradient, sigma=params.sigma,
                                       sigma_wall=params.sigma_wall)
    else:
        velocity_h = interpolate_velocity(velocity, velocity_space)
    pressure_h = project_pressure(pressure, pressure_space) if pressure is not None else DiscreteField(pressure_space)
    return FlowState(0.0, velocity_h, pressure_h)


class CaseSetup:
    """
    run_transient から使うケースの構成（空間、形式パラメータ、初期場、観測）
    """

    def __init__(self, case: CaseConfig, spaces, problem: str, params: FormParams,
                 initial_velocity: Callable, initial_gradient: Optional[Callable] = None,
                 exact: Optional[ExactSolution] = None):
        self.case = case
        self.spaces = spaces
        self.problem = problem
        self.params = params
        self.initial_velocity = initial_velocity
        self.initial_gradient = initial_gradient
        self.exact = exact
        self.forcing = exact.forcing if exact is not None else None
        self._last_energy: Optional[float] = None
        self._pending_spectra = sorted(case.spectrum_times)

    def initial_state(self) -> FlowState:
        """初期条件（既定は標準補間、設定により Stokes 射影）"""
        pressure = self.exact.pressure_at(0.0) if self.exact is not None else None
        return initial_flow_state(self.spaces, self.initial_velocity, self.initial_gradient, self.case.initial,
                                  self.params, pressure)

    def error_row(self, state: FlowState) -> Dict[str, float]:
        """厳密解との誤差 1 行"""
        t = state.t
        beta = self.exact.velocity_at(t) if self.problem != "stokes" else None
        norms = error_norms(state.velocity, self.exact.velocity_at(t), self.exact.gradient_at(t),
                            sigma=self.params.sigma, beta=beta, gamma=self.params.gamma,
                            sigma_wall=self.params.sigma_wall)
        nan = float("nan")
        return {
            "t": t,
            "l2_error": norms["l2"],
            "energy_error": norms["energy"],
            "upwind_error": norms["upwind"],
            "K_error": abs(kinetic_energy(state.velocity) - self.exact.kinetic_energy(t)) if self.exact.kinetic_energy else nan,
            "E_error": abs(enstrophy(state.velocity) - self.exact.enstrophy(t)) if self.exact.enstrophy else nan,
            "p_error": pressure_error(state.pressure, self.exact.pressure_at(t)),
        }

    def observe(self, record: RunRecord, state: FlowState, step: int, out_dir: Optional[Path] = None,
                final: bool = False) -> None:
        """
        受理された状態の診断量を記録

        Raises:
            EnergyStabilityError: 外力なしの問題で K が前ステップの (1 + ENERGY_SLACK) 倍を超えた場合
        """
        case = self.case
        energy = kinetic_energy(state.velocity)
        if self._last_energy is not None and self.forcing is None \
                and energy > self._last_energy * (1.0 + Config.ENERGY_SLACK):
            record.energy_increases += 1
            logger.error(f"t={state.t:.6g}: 運動エネルギーが増加しました ({self._last_energy:.12e} -> {energy:.12e})")
            raise EnergyStabilityError(f"t={state.t:.6g} で運動エネルギーが増加しました "
                                       f"({self._last_energy:.12e} -> {energy:.12e})", self._last_energy, energy)
        self._last_energy = energy

        if step == 0 or final or step % case.output_every == 0:
            delta_ratio = float("nan")
            if case.case == "kelvin_helmholtz":
                delta = vorticity_thickness(state.velocity, KH_U_INF, Config.VORTICITY_LINES, Config.LINE_SAMPLES)
                delta_ratio = delta / KH_DELTA0
            record.add_row(state.t, energy, enstrophy(state.velocity), divergence_sup(state.velocity), delta_ratio)
            if self.exact is not None:
                record.error_rows.append(self.error_row(state))

        while self._pending_spectra and state.t >= self._pending_spectra[0] - 0.5 * case.dt:
            target = self._pending_spectra.pop(0)
            spectrum = energy_spectrum(state.velocity, case.grid_n)
            record.spectra[target] = spectrum
            logger.info(f"t={state.t:.6g}: スペクトルを計算 (Parseval 誤差 {spectrum.parseval_error:.2e})")
            if out_dir is not None:
                slope = fit_spectrum_slope(spectrum, case.kappa_min, case.kappa_max)
                write_spectrum(spectrum, out_dir / f"spectrum_t{target:g}.csv", slope)
                record.checkpoints.append(str(save_checkpoint(out_dir / f"checkpoint_t{target:g}", state, case.header())))

        if out_dir is not None and case.snapshot_every and case.export_format != "none" \
                and step % case.snapshot_every == 0:
            path = export_fields(state, out_dir / f"snapshot_{step:06d}", case.export_format)
            record.snapshots.append(str(path))


def case_setup(case: CaseConfig) -> CaseSetup:
    """
    CaseConfig から実行用の構成を作る

    Raises:
        ConfigError: 全周期でないケースにスペクトル時刻が指定された場合
    """
    if case.spectrum_times and not case.fully_periodic:
        raise ConfigError(f"スペクトルは全周期のケースでのみ計算できます: {case.case}")
    spaces = build_spaces(case)
    params = FormParams(nu=case.nu, sigma=case.sigma, gamma=case.gamma)
    velocity, gradient, exact = _initial_fields(case)
    if case.resolved_problem == "oseen":
        params.beta = exact.velocity
    return CaseSetup(case, spaces, case.resolved_problem, params, velocity, gradient, exact)


def _initial_fields(case: CaseConfig) -> Tuple[Callable, Callable, Optional[ExactSolution]]:
    """ケースの初期速度、その勾配、厳密解（ない場合は None）"""
    if case.case in ("lattice", "manufactured_oseen"):
        exact = lattice_flow_solution(case.nu, case.resolved_problem)
    elif case.case == "kelvin_helmholtz":
        return kelvin_helmholtz_initial, kelvin_helmholtz_initial_gradient, None
    elif case.case == "decaying_turbulence":
        stream = turbulence_stream(case.n_v)
        return stream.velocity, stream.gradient, None
    else:
        exact = manufactured_stokes_solution(case.nu)
    return exact.velocity_at(0.0), exact.gradient_at(0.0), exact


def projection_study(case: CaseConfig) -> Dict[str, Any]:
    """
    ケースの初期速度 w に対する Stokes 射影 π_s w の誤差と冪等性

    各メッシュで ‖w − π_s w‖ と |||w − π_s w|||_e、その比、π_s(π_s w) と π_s w の
    相対差を求め、比の log-log 傾き（1 次多く収束するなら約 1）を返す。

    Returns:
        "rows"（メッシュごと）と "ratio_slope"
    """
    velocity, gradient, _ = _initial_fields(case)
    params = FormParams(nu=case.nu, sigma=case.sigma, gamma=case.gamma)
    rows = []
    for spec in case.meshes or [case.mesh]:
        spaces = build_spaces(SimpleNamespace(mesh=spec, k=case.k, bc=case.bc))
        projected = stokes_projection(velocity, spaces, grad_w=gradient, sigma=params.sigma)
        norms = error_norms(projected, velocity, gradient, sigma=params.sigma)
        again = stokes_projection(projected, spaces, sigma=params.sigma)
        scale = max(float(np.max(np.abs(projected.coefficients))), 1e-300)
        rows.append({
            "h": mesh_statistics(spaces[0].mesh)["h_max"],
            "num_dofs": spaces[0].num_dofs,
            "l2": norms["l2"],
            "energy": norms["energy"],
            "ratio": norms["l2"] / norms["energy"] if norms["energy"] > 0.0 else float("nan"),
            "idempotence": float(np.max(np.abs(again.coefficients - projected.coefficients))) / scale,
        })
        logger.info(f"Stokes 射影 {spec}: L² {norms['l2']:.4e}, エネルギー {norms['energy']:.4e}")
    slope = calculate_loglog_slope([row["h"] for row in rows], [row["ratio"] for row in rows])
    return {"rows": rows, "ratio_slope": slope}


# ----------------------------------------------------------------------
# 収束次数調査
# ----------------------------------------------------------------------
@dataclass
class ConvergenceTable:
    """
    収束表

    Attributes:
        kind: "stokes" または "oseen"
        k: 多項式次数
        rows: メッシュごとの誤差と観測次数
        key: 合否判定に使う列（stokes は l2、oseen は combined）
        expected_order: 期待次数
        tolerance: 許容幅
    """
    kind: str
    k: int
    rows: List[Dict[str, Any]]
    key: str
    expected_order: float
    tolerance: float

    @property
    def final_order(self) -> Optional[float]:
        return self.rows[-1].get(f"{self.key}_order") if self.rows else None

    @property
    def passed(self) -> bool:
        return check_order(self.final_order, self.expected_order, self.tolerance)


def _stokes_row(mesh_spec: str, k: int, nu: float, sigma: Optional[float]) -> Dict[str, Any]:
    spaces = build_spaces(SimpleNamespace(mesh=mesh_spec, k=k, bc="noslip"))
    exact = manufactured_stokes_solution(nu)
    state = solve_stationary_stokes(spaces, nu, exact.forcing_at(0.0), sigma=sigma)
    norms = error_norms(state.velocity, exact.velocity_at(0.0), exact.gradient_at(0.0), sigma=sigma)
    return {"h": mesh_statistics(spaces[0].mesh)["h_max"], "num_dofs": spaces[0].num_dofs,
            "l2": norms["l2"], "energy": norms["energy"], "upwind": norms["upwind"], "combined": float("nan"),
            "pressure": pressure_error(state.pressure, exact.pressure_at(0.0))}


def _oseen_row(mesh_spec: str, k: int, nu: float, sigma: Optional[float], gamma: float, dt: float, T: float,
               h_reference: Optional[float], problem: str, initial: str) -> Dict[str, Any]:
    spaces = build_spaces(SimpleNamespace(mesh=mesh_spec, k=k, bc="periodic"))
    velocity_space, pressure_space = spaces
    h = mesh_statistics(velocity_space.mesh)["h_max"]
    exact = lattice_flow_solution(nu, problem)
    params = FormParams(nu=nu, sigma=sigma, gamma=gamma, beta=exact.velocity if problem == "oseen" else None)

    # 時間誤差が空間誤差に埋もれるよう Δt ∝ h^{(k+1)/2}
    scaled = dt if h_reference is None else dt * (h / h_reference) ** ((k + 1) / 2.0)
    steps = int(math.ceil(T / scaled - 1e-9)) if T > 0.0 else 0
    step_size = T / steps if steps else scaled

    history = [initial_flow_state(spaces, exact.velocity_at(0.0), exact.gradient_at(0.0), initial, params,
                                  exact.pressure_at(0.0))]
    times, l2_squared, integrand = [], [], []
    upwind_max = 0.0
    for step in range(steps + 1):
        if step:
            history = [history[-1], step_transient(history[-2:], step_size, problem, params)]
        state = history[-1]
        norms = error_norms(state.velocity, exact.velocity_at(state.t), exact.gradient_at(state.t), sigma=sigma,
                            beta=exact.velocity_at(state.t), gamma=gamma)
        times.append(state.t)
        l2_squared.append(norms["l2"] ** 2)
        integrand.append(nu * norms["energy"] ** 2 + norms["upwind"] ** 2)
        upwind_max = max(upwind_max, norms["upwind"])

    combined = math.sqrt(max(l2_squared) + (trapezoid(integrand, times) if len(times) > 1 else 0.0))
    logger.info(f"Oseen 収束: {mesh_spec} h={h:.4g} ステップ {steps} (dt={step_size:.4g}) 複合誤差 {combined:.4e}")
    return {"h": h, "num_dofs": velocity_space.num_dofs, "l2": math.sqrt(l2_squared[-1]),
            "energy": norms["energy"], "upwind": upwind_max, "combined": combined,
            "pressure": pressure_error(history[-1].pressure, exact.pressure_at(history[-1].t))}


def manufactured_cases(kind: str, meshes: Sequence[str], k: int, nu: Optional[float] = None,
                       sigma: Optional[float] = None, gamma: float = Config.DEFAULT_GAMMA,
                       dt: float = 0.05, T: float = 0.2, expected_order: Optional[float] = None,
                       tolerance: Optional[float] = None, problem: Optional[str] = None,
                       initial: str = "interpolate") -> ConvergenceTable:
    """
    製造解によるメッシュ収束表

    stokes は no-slip 壁の定常 Stokes 製造解、oseen は β = u の平面格子流
    （problem="navier_stokes" なら完全非線形）。メッシュは HDIVFLOW_THREADS に
    応じて並列に計算する。

    Args:
        kind: "stokes" または "oseen"
        meshes: メッシュ指定の列（粗い順）
        k: 多項式次数
        nu: 粘性係数（既定は stokes 1、oseen 4e-6）
        sigma, gamma: 形式パラメータ
        dt, T: oseen の最粗メッシュでの時間刻みと終了時刻
        expected_order: 期待次数（既定は stokes k+1、oseen k）
        tolerance: 許容幅（既定は stokes 0.2、oseen 0.3）

    Raises:
        ConfigError: メッシュが 2 つ未満、または未知の kind
    """
    if kind not in ("stokes", "oseen"):
        raise ConfigError(f"未知の収束調査の種類です: {kind}")
    if len(meshes) < 2:
        raise ConfigError(f"収束次数の計算には 2 つ以上のメッシュが必要です: {len(meshes)}")
    meshes = [str(spec) for spec in meshes]

    if kind == "stokes":
        nu = 1.0 if nu is None else nu
        tasks = [lambda spec=spec: _stokes_row(spec, k, nu, sigma) for spec in meshes]
        key, default_order, default_tolerance = "l2", k + 1.0, 0.2
    else:
        nu = LATTICE_NU if nu is None else nu
        problem = problem or "oseen"
        h_reference = mesh_statistics(build_spaces(SimpleNamespace(mesh=meshes[0], k=k, bc="periodic"))[0].mesh)["h_max"]
        tasks = [lambda spec=spec: _oseen_row(spec, k, nu, sigma, gamma, dt, T, h_reference, problem, initial)
                 for spec in meshes]
        key, default_order, default_tolerance = "combined", float(k), 0.3

    with ThreadPoolExecutor(max_workers=worker_count(len(tasks))) as executor:
        rows = list(executor.map(lambda task: task(), tasks))

    for column in ("l2", "energy", "combined"):
        for row, order in zip(rows, calculate_observed_orders(rows, column)):
            row[f"{column}_order"] = order

    table = ConvergenceTable(kind=kind, k=k, rows=rows, key=key,
                             expected_order=default_order if expected_order is None else expected_order,
                             tolerance=default_tolerance if tolerance is None else tolerance)
    logger.info(f"収束調査 {kind} k={k}: 最終次数 {table.final_order} (期待 {table.expected_order:g}±{table.tolerance:g})")
    return table


def convergence_study(case: CaseConfig) -> ConvergenceTable:
    """ケース設定から収束調査を実行（manufactured_stokes / manufactured_oseen / lattice）"""
    if case.case == "manufactured_stokes":
        kind = "stokes"
    elif case.case in ("manufactured_oseen", "lattice"):
        kind = "oseen"
    else:
        raise ConfigError(f"ケース {case.case} は収束調査に対応していません")
    meshes = case.meshes or [case.mesh]
    problem = case.resolved_problem if kind == "oseen" else None
    if problem == "stokes":
        raise ConfigError("Oseen 型の収束調査に stokes は指定できません")
    return manufactured_cases(kind, meshes, case.k, nu=case.nu, sigma=case.sigma, gamma=case.gamma,
                              dt=case.dt, T=case.T, expected_order=case.expected_order,
                              tolerance=case.order_tolerance, problem=problem, initial=case.initial)


def write_convergence_table(table: ConvergenceTable, path: Union[str, Path]) -> None:
    """収束表 CSV を書き出す（合否はコメント行に記録）"""
    with open(path, "w", newline="", encoding="utf-8") as stream:
        stream.write(f"# kind={table.kind} k={table.k} key={table.key} expected={table.expected_order:g} "
                     f"tolerance={table.tolerance:g} passed={str(table.passed).lower()}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CONVERGENCE_HEADER)
        for row in table.rows:
            writer.writerow(["nan" if row.get(key) is None or (isinstance(row.get(key), float) and math.isnan(row[key]))
                             else f"{row[key]:.17g}" for key in CONVERGENCE_HEADER])


def read_convergence_table(path: Union[str, Path]) -> List[Dict[str, float]]:
    """write_convergence_table の出力行を読み込む"""
    with open(path, "r", encoding="utf-8") as stream:
        lines = [line for line in stream if not line.startswith("#")]
    return [{key: float(value) for key, value in row.items()} for row in csv.DictReader(lines)]
