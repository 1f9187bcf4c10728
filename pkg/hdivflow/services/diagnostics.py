"""診断量モジュール

運動エネルギー、エンストロフィー、発散、渦度厚さ、離散誤差ノルム、
エネルギースペクトルの計算と、時系列・スペクトル・場の入出力。
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
from scipy.integrate import trapezoid

from hdivflow.services.assembly import (
    ConvectiveField,
    assemble_mass,
    default_sigma,
    facet_blocks,
    upwind_seminorm_squared,
    viscous_facets,
)
from hdivflow.services.function_space import DiscreteField
from hdivflow.services.reference_element import triangle_quadrature
from hdivflow.services.utils import calculate_loglog_slope

logger = logging.getLogger(__name__)

TIME_SERIES_HEADER = ["t", "K", "E", "div_max", "delta_ratio"]
SPECTRUM_HEADER = ["kappa", "E"]
ERROR_SERIES_HEADER = ["t", "l2_error", "energy_error", "upwind_error", "K_error", "E_error", "p_error"]
FIELD_HEADER = ["x1", "x2", "u1", "u2", "vorticity"]

CENTROID = np.array([[1.0 / 3.0, 1.0 / 3.0]])

PathLike = Union[str, Path]


def _error_degree(k: int) -> int:
    return min(2 * k + 6, 20)


def _volume(field_: DiscreteField, degree: int):
    rule = triangle_quadrature(degree)
    weights = rule.weights[None, :] * field_.space.mesh.determinants[:, None]
    return rule, weights


def kinetic_energy(u_h: DiscreteField) -> float:
    """K = ½‖u_h‖²（½ uᵀMu）"""
    c = u_h.coefficients
    return 0.5 * float(c @ (assemble_mass(u_h.space) @ c))


def enstrophy(u_h: DiscreteField) -> float:
    """E = ½‖∇_h × u_h‖²（要素ごとの回転）"""
    rule, weights = _volume(u_h, 2 * u_h.space.degree)
    curl = u_h.element_values(rule.points)["curl"]
    return 0.5 * float(np.sum(weights * curl ** 2))


def divergence_sup(u_h: DiscreteField) -> float:
    """全要素の体積求積点での max |∇·u_h|"""
    rule = triangle_quadrature(2 * u_h.space.degree + 2)
    divergence = u_h.element_values(rule.points)["divergence"]
    return float(np.max(np.abs(divergence))) if divergence.size else 0.0


def velocity_sup(u_h: DiscreteField) -> float:
    """体積求積点での max |u_h|"""
    rule = triangle_quadrature(2 * u_h.space.degree + 2)
    value = u_h.element_values(rule.points)["value"]
    return float(np.max(np.linalg.norm(value, axis=-1))) if value.size else 0.0


def vorticity_thickness(u_h: DiscreteField, u_inf: float, n_lines: int = 64, n_samples: int = 1024) -> float:
    """
    渦度厚さ δ = 2 u_∞ / max_{x2} |∫₀¹ ω dx1|

    水平線 x2 = j / n_lines (j = 0..n_lines-1) 上で、n_samples 点の台形則で
    渦度の線積分を近似する。

    Args:
        u_h: 速度場
        u_inf: 自由流速度
        n_lines: 水平線の本数
        n_samples: 1 本あたりのサンプル点数

    Raises:
        ValueError: すべての線積分が 0 の場合
    """
    if n_lines < 1 or n_samples < 2:
        raise ValueError(f"線の本数 {n_lines} またはサンプル数 {n_samples} が不正です")
    x1 = np.linspace(0.0, 1.0, n_samples)
    x2 = np.arange(n_lines) / n_lines
    xx, yy = np.meshgrid(x1, x2, indexing="xy")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    curl = u_h.values_at(points)["curl"].reshape(n_lines, n_samples)
    averages = trapezoid(curl, x1, axis=1)
    peak = float(np.max(np.abs(averages)))
    if peak == 0.0:
        logger.error("渦度の線積分がすべて 0 のため渦度厚さを計算できません")
        raise ValueError("渦度の線積分がすべて 0 です")
    return 2.0 * u_inf / peak


def error_norms(u_h: DiscreteField,
                exact: Callable[[np.ndarray], np.ndarray],
                exact_gradient: Callable[[np.ndarray], np.ndarray],
                sigma: Optional[float] = None,
                beta: ConvectiveField = None,
                gamma: float = 1.5,
                sigma_wall: Optional[float] = None) -> Dict[str, float]:
    """
    e = u − u_h の離散誤差ノルム

    l2: ‖e‖、energy: (‖∇_h e‖² + Σ σ/h_F ‖[[e]]‖²)^½、upwind: (Σ ∫(γ/2)|β·n||[[e]]|²)^½。
    u は滑らかなので内部・周期ファセットでは [[e]] = −[[u_h]]。

    Args:
        u_h: 離散速度
        exact: 厳密解 u(x)
        exact_gradient: ∇u(x)、[i, j] = ∂u_i/∂x_j
        sigma: SIP ペナルティ（None なら既定値）
        beta: 風上半ノルムの対流場（None なら 0）
        gamma: 風上パラメータ
        sigma_wall: no-slip 壁上のペナルティ
    """
    space = u_h.space
    mesh = space.mesh
    k = space.degree
    sigma = default_sigma(k) if sigma is None else float(sigma)
    sigma_wall = sigma if sigma_wall is None else float(sigma_wall)

    rule, weights = _volume(u_h, _error_degree(k))
    points = mesh.map_to_physical(np.arange(mesh.num_triangles)[:, None], rule.points[None, :, :])
    flat = points.reshape(-1, 2)
    values = u_h.element_values(rule.points)
    u = np.asarray(exact(flat), dtype=float).reshape(points.shape)
    grad = np.asarray(exact_gradient(flat), dtype=float).reshape(points.shape[:2] + (2, 2))
    l2 = float(np.sum(weights * np.sum((u - values["value"]) ** 2, axis=-1)))
    energy = float(np.sum(weights * np.sum((grad - values["gradient"]) ** 2, axis=(-2, -1))))

    local = space.local_coefficients(u_h.coefficients)
    for block in facet_blocks(space, viscous_facets(space), _error_degree(k), with_gradients=False):
        minus = np.where(block.two_sided, block.minus, block.plus)
        coefficients = np.concatenate([local[block.plus], local[minus]], axis=1)
        jump = -np.einsum("fqbi,fb->fqi", block.jump, coefficients)
        wall = ~block.two_sided
        if np.any(wall):
            exact_trace = np.asarray(exact(block.points.reshape(-1, 2)), dtype=float).reshape(block.points.shape)
            jump += exact_trace * wall[:, None, None]
        penalty = np.where(wall, sigma_wall, sigma) / block.lengths
        energy += float(np.sum(block.weights * penalty[:, None] * np.sum(jump ** 2, axis=-1)))

    upwind = upwind_seminorm_squared(space, u_h.coefficients, beta, gamma)
    return {"l2": math.sqrt(max(l2, 0.0)), "energy": math.sqrt(max(energy, 0.0)), "upwind": math.sqrt(max(upwind, 0.0))}


def pressure_error(p_h: DiscreteField, exact: Callable[[np.ndarray], np.ndarray]) -> float:
    """平均を除いた圧力の L² 誤差"""
    space = p_h.space
    mesh = space.mesh
    rule, weights = _volume(p_h, _error_degree(space.degree))
    points = mesh.map_to_physical(np.arange(mesh.num_triangles)[:, None], rule.points[None, :, :])
    p = np.asarray(exact(points.reshape(-1, 2)), dtype=float).reshape(points.shape[:2])
    p_discrete = p_h.element_values(rule.points)["value"]
    area = float(np.sum(weights))
    difference = (p - np.sum(weights * p) / area) - (p_discrete - np.sum(weights * p_discrete) / area)
    return math.sqrt(float(np.sum(weights * difference ** 2)))


@dataclass
class Spectrum:
    """
    半径方向に積算したエネルギースペクトル

    Attributes:
        kappa: 波数ビン 1..κ_max
        energy: 各ビンのエネルギー
        mean_flow_energy: κ = 0（平均流）のエネルギー
        grid_energy: 格子上の ½ mean|u|²
    """
    kappa: np.ndarray
    energy: np.ndarray
    mean_flow_energy: float = 0.0
    grid_energy: float = 0.0

    @property
    def parseval_error(self) -> float:
        """Σ E(κ)（κ = 0 を含む）と格子平均エネルギーの相対差"""
        total = float(np.sum(self.energy)) + self.mean_flow_energy
        if self.grid_energy == 0.0:
            return abs(total)
        return abs(total - self.grid_energy) / self.grid_energy


def sample_on_grid(u_h: DiscreteField, grid_n: int) -> np.ndarray:
    """セル中心 ((i+½)/N, (j+½)/N) で速度をサンプル、形状 (N, N, 2) で [j, i] = (x2, x1)"""
    centers = (np.arange(grid_n) + 0.5) / grid_n
    xx, yy = np.meshgrid(centers, centers, indexing="xy")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    return u_h.values_at(points)["value"].reshape(grid_n, grid_n, 2)


def spectrum_from_samples(samples: np.ndarray) -> Spectrum:
    """
    格子サンプル (N, N, 2) からスペクトルを計算

    モード k のエネルギー ½(|û₁|²+|û₂|²) を κ−½ ≤ |k| < κ+½ の環に積算する。
    û は 1/N² で正規化するので Σ_k ½|û|² = ½ mean|u|²。
    """
    grid_n = samples.shape[0]
    transformed = np.fft.fft2(samples, axes=(0, 1)) / grid_n ** 2
    mode_energy = 0.5 * np.sum(np.abs(transformed) ** 2, axis=-1)
    wavenumbers = np.fft.fftfreq(grid_n) * grid_n
    kx, ky = np.meshgrid(wavenumbers, wavenumbers, indexing="xy")
    bins = np.floor(np.sqrt(kx ** 2 + ky ** 2) + 0.5).astype(np.int64)
    totals = np.bincount(bins.ravel(), weights=mode_energy.ravel())
    grid_energy = 0.5 * float(np.mean(np.sum(samples ** 2, axis=-1)))
    return Spectrum(kappa=np.arange(1, len(totals)), energy=totals[1:],
                    mean_flow_energy=float(totals[0]), grid_energy=grid_energy)


def energy_spectrum(u_h: DiscreteField, grid_n: int = 256) -> Spectrum:
    """
    全周期の速度場のエネルギースペクトル

    Raises:
        ValueError: 両軸とも周期でない場合
    """
    if u_h.space.mesh.periodic_axes != frozenset({"x1", "x2"}):
        raise ValueError("エネルギースペクトルは全周期のケースでのみ計算できます")
    spectrum = spectrum_from_samples(sample_on_grid(u_h, grid_n))
    logger.debug(f"スペクトル計算: 格子 {grid_n}, Parseval 誤差 {spectrum.parseval_error:.2e}")
    return spectrum


def fit_spectrum_slope(spectrum: Spectrum, kappa_min: float, kappa_max: float) -> Optional[float]:
    """
    log E と log κ の一次フィットの傾き

    Returns:
        傾き（範囲内の正のビンが 2 個未満なら None）
    """
    mask = (spectrum.kappa >= kappa_min) & (spectrum.kappa <= kappa_max)
    return calculate_loglog_slope(spectrum.kappa[mask], spectrum.energy[mask])


@dataclass
class RunRecord:
    """1 回の実行で得られた診断量の記録"""
    case: Dict[str, Any]
    rows: List[Dict[str, float]] = field(default_factory=list)
    error_rows: List[Dict[str, float]] = field(default_factory=list)
    spectra: Dict[float, Spectrum] = field(default_factory=dict)
    snapshots: List[str] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    newton_iterations: List[int] = field(default_factory=list)
    energy_increases: int = 0
    complete: bool = True
    failure: Optional[str] = None
    wall_time: float = 0.0
    final_state: Any = None

    def add_row(self, t: float, kinetic: float, enstrophy_value: float, div_max: float,
                delta_ratio: float = float("nan")) -> None:
        """時系列に 1 行追加（時刻は狭義単調増加）"""
        if self.rows and t <= self.rows[-1]["t"]:
            raise ValueError(f"時刻が単調増加していません: {t} <= {self.rows[-1]['t']}")
        if kinetic < 0.0 or enstrophy_value < 0.0:
            raise ValueError("運動エネルギーとエンストロフィーは非負です")
        self.rows.append({"t": t, "K": kinetic, "E": enstrophy_value, "div_max": div_max, "delta_ratio": delta_ratio})

    def summary(self) -> Dict[str, Any]:
        """最終値と実行情報の要約"""
        last = self.rows[-1] if self.rows else {}
        return {
            "case": self.case.get("case"),
            "complete": self.complete,
            "failure": self.failure,
            "final_t": last.get("t"),
            "final_K": last.get("K"),
            "final_E": last.get("E"),
            "final_div_max": last.get("div_max"),
            "energy_increases": self.energy_increases,
            "newton_iterations": int(sum(self.newton_iterations)),
            "wall_time": self.wall_time,
        }


def _format(value: float) -> str:
    return "nan" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.17g}"


def write_time_series(rows: List[Dict[str, float]], path: PathLike) -> None:
    """時系列 CSV（t,K,E,div_max,delta_ratio）を書き出す"""
    _write_rows(rows, TIME_SERIES_HEADER, path)


def write_error_series(rows: List[Dict[str, float]], path: PathLike) -> None:
    """誤差時系列 CSV を書き出す"""
    _write_rows(rows, ERROR_SERIES_HEADER, path)


def _write_rows(rows: List[Dict[str, float]], header: List[str], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(row.get(key)) for key in header])


def read_time_series(path: PathLike) -> List[Dict[str, float]]:
    """write_time_series / write_error_series の出力を読み込む"""
    with open(path, "r", encoding="utf-8") as stream:
        lines = [line for line in stream if not line.startswith("#")]
    reader = csv.DictReader(lines)
    return [{key: float(value) for key, value in row.items()} for row in reader]


def write_spectrum(spectrum: Spectrum, path: PathLike, slope: Optional[float] = None) -> None:
    """スペクトル CSV（kappa,E）を書き出す。平均流エネルギー等はコメント行に記録"""
    with open(path, "w", newline="", encoding="utf-8") as stream:
        stream.write(f"# mean_flow_energy={_format(spectrum.mean_flow_energy)} "
                     f"grid_energy={_format(spectrum.grid_energy)} "
                     f"parseval_error={_format(spectrum.parseval_error)} "
                     f"slope={'undefined' if slope is None else _format(slope)}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(SPECTRUM_HEADER)
        for kappa, energy in zip(spectrum.kappa, spectrum.energy):
            writer.writerow([int(kappa), _format(float(energy))])


def read_spectrum(path: PathLike) -> Spectrum:
    """write_spectrum の出力を読み込む"""
    meta: Dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as stream:
        lines = stream.readlines()
    for line in lines:
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                if key in ("mean_flow_energy", "grid_energy"):
                    meta[key] = float(value)
    rows = list(csv.DictReader([line for line in lines if not line.startswith("#")]))
    return Spectrum(kappa=np.array([int(row["kappa"]) for row in rows], dtype=np.int64),
                    energy=np.array([float(row["E"]) for row in rows]),
                    mean_flow_energy=meta.get("mean_flow_energy", 0.0),
                    grid_energy=meta.get("grid_energy", 0.0))


def cell_samples(u_h: DiscreteField) -> Dict[str, np.ndarray]:
    """要素重心での座標・速度・渦度"""
    values = u_h.element_values(CENTROID)
    return {
        "points": u_h.space.mesh.centroids,
        "velocity": values["value"][:, 0, :],
        "vorticity": values["curl"][:, 0],
    }


def export_fields(state, path: PathLike, format: str = "vtk") -> Path:
    """
    速度と渦度を要素重心でサンプルして書き出す

    ヘッダーに時刻と渦度の最小・最大を記録する。

    Args:
        state: FlowState（t と velocity を持つ）
        path: 出力ファイル（拡張子は format に合わせて付け替える）
        format: "vtk"（レガシー ASCII）または "csv"

    Returns:
        書き出したパス
    """
    samples = cell_samples(state.velocity)
    vorticity = samples["vorticity"]
    low = float(vorticity.min()) if vorticity.size else 0.0
    high = float(vorticity.max()) if vorticity.size else 0.0
    path = Path(path)
    if format == "vtk":
        path = path.with_suffix(".vtk")
        _write_vtk(state, samples, low, high, path)
    elif format == "csv":
        path = path.with_suffix(".csv")
        _write_field_csv(state.t, samples, low, high, path)
    else:
        raise ValueError(f"未知の出力形式です: {format}")
    logger.debug(f"場を書き出し: {path} (渦度 {low:.4g} .. {high:.4g})")
    return path


def _write_vtk(state, samples: Dict[str, np.ndarray], low: float, high: float, path: Path) -> None:
    mesh = state.velocity.space.mesh
    with open(path, "w", encoding="utf-8") as stream:
        stream.write("# vtk DataFile Version 3.0\n")
        stream.write(f"hdivflow t={state.t:.17g} vorticity_min={low:.17g} vorticity_max={high:.17g}\n")
        stream.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        stream.write(f"POINTS {mesh.num_vertices} double\n")
        for x, y in mesh.vertices:
            stream.write(f"{x:.17g} {y:.17g} 0\n")
        stream.write(f"CELLS {mesh.num_triangles} {4 * mesh.num_triangles}\n")
        for a, b, c in mesh.triangles:
            stream.write(f"3 {a} {b} {c}\n")
        stream.write(f"CELL_TYPES {mesh.num_triangles}\n")
        stream.write("5\n" * mesh.num_triangles)
        stream.write(f"CELL_DATA {mesh.num_triangles}\n")
        stream.write("SCALARS vorticity double 1\nLOOKUP_TABLE default\n")
        for value in samples["vorticity"]:
            stream.write(f"{value:.17g}\n")
        stream.write("VECTORS velocity double\n")
        for u1, u2 in samples["velocity"]:
            stream.write(f"{u1:.17g} {u2:.17g} 0\n")


def _write_field_csv(t: float, samples: Dict[str, np.ndarray], low: float, high: float, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as stream:
        stream.write(f"# t={t:.17g} vorticity_min={low:.17g} vorticity_max={high:.17g}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(FIELD_HEADER)
        for (x1, x2), (u1, u2), omega in zip(samples["points"], samples["velocity"], samples["vorticity"]):
            writer.writerow([f"{x1:.17g}", f"{x2:.17g}", f"{u1:.17g}", f"{u2:.17g}", f"{omega:.17g}"])


def read_field_csv(path: PathLike) -> Dict[str, Any]:
    """
    CSV の場出力を読み込む

    Returns:
        "t", "vorticity_min", "vorticity_max" と各列の配列
    """
    meta: Dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as stream:
        lines = stream.readlines()
    for line in lines:
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, value = token.partition("=")
                meta[key] = float(value)
    rows = list(csv.reader([line for line in lines if not line.startswith("#")]))
    header, body = rows[0], rows[1:]
    data = np.array([[float(value) for value in row] for row in body]).reshape(-1, len(header))
    for index, name in enumerate(header):
        meta[name] = data[:, index]
    return meta
