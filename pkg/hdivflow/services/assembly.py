"""離散形式の組み立てモジュール

質量行列、SIP 粘性形式 a_h、風上安定化付き対流形式 c_h(β;·,·)、
速度と圧力の結合 b、荷重ベクトルを scipy.sparse の CSR 行列として組み立てる。

要素・ファセットのループはチャンク単位でベクトル化し、COO の三つ組を
固定順序で連結してから CSR に変換する（同じ入力なら結果はビット単位で一致）。

ファセット上の記号:
    [[v]] = v+ - v-,  {{v}} = (v+ + v-)/2
    境界ファセットでは [[v]] = {{v}} = v+
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from hdivflow.config import Config
from hdivflow.services.cache import reference_cache, table_cache
from hdivflow.services.function_space import DiscreteField, PressureSpace, VelocitySpace
from hdivflow.services.reference_element import build_rt_basis, edge_points, edge_quadrature, piola_map, triangle_quadrature

logger = logging.getLogger(__name__)

# 1 チャンクあたりの配列要素数の目安
CHUNK_ENTRIES = 2 ** 22

VectorFunction = Callable[[np.ndarray], np.ndarray]
GradientFunction = Callable[[np.ndarray], np.ndarray]
ConvectiveField = Union[None, VectorFunction, DiscreteField]


def default_sigma(k: int) -> float:
    """SIP ペナルティの既定値 σ = 6(k+1)(k+d)/d (d = 2)"""
    return 6.0 * (k + 1) * (k + 2) / 2.0


@dataclass
class FormParams:
    """
    離散形式のパラメータ

    Attributes:
        nu: 動粘性係数 (>= 0)
        sigma: SIP ペナルティ（None なら default_sigma(k)）
        gamma: 風上パラメータ (>= 0)
        beta: 対流場（解析関数、離散場、または None）
        sigma_wall: no-slip 壁上のペナルティ（None なら sigma）
    """
    nu: float = 0.0
    sigma: Optional[float] = None
    gamma: float = Config.DEFAULT_GAMMA
    beta: ConvectiveField = None
    sigma_wall: Optional[float] = None

    def __post_init__(self):
        if self.nu < 0.0:
            raise ValueError(f"粘性係数が負です: {self.nu}")
        if self.gamma < 0.0:
            raise ValueError(f"風上パラメータが負です: {self.gamma}")

    def penalty(self, k: int) -> float:
        return default_sigma(k) if self.sigma is None else float(self.sigma)

    def wall_penalty(self, k: int) -> float:
        return self.penalty(k) if self.sigma_wall is None else float(self.sigma_wall)


# ----------------------------------------------------------------------
# 参照テーブル
# ----------------------------------------------------------------------
def _volume_table(k: int, degree: int) -> Dict[str, np.ndarray]:
    def build():
        rule = triangle_quadrature(degree)
        table = build_rt_basis(k).tabulate(rule.points)
        table["points"] = rule.points
        table["weights"] = rule.weights
        return table

    return reference_cache.get_or_build(("rt_volume_table", k, degree), build)


def _edge_table(k: int, degree: int) -> Dict[str, np.ndarray]:
    """参照辺 (3) × 向き (2: 順, 逆) ごとの基底値"""
    def build():
        rule = edge_quadrature(degree)
        basis = build_rt_basis(k)
        points = np.stack([np.stack([edge_points(e, rule.points, flip) for flip in (False, True)])
                           for e in range(3)])
        table = basis.tabulate(points)
        table["points"] = points
        table["weights"] = rule.weights
        return table

    return reference_cache.get_or_build(("rt_edge_table", k, degree), build)


def _chunks(count: int, per_item: int) -> Iterator[slice]:
    size = max(1, CHUNK_ENTRIES // max(1, per_item))
    for start in range(0, count, size):
        yield slice(start, min(count, start + size))


class _Triplets:
    """COO 三つ組の蓄積（拘束自由度 -1 は捨てる）"""

    def __init__(self, shape):
        self.shape = shape
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.values: List[np.ndarray] = []

    def add(self, row_dofs: np.ndarray, col_dofs: np.ndarray, local: np.ndarray) -> None:
        rows = np.broadcast_to(row_dofs[:, :, None], local.shape)
        cols = np.broadcast_to(col_dofs[:, None, :], local.shape)
        mask = (rows >= 0) & (cols >= 0)
        self.rows.append(rows[mask])
        self.cols.append(cols[mask])
        self.values.append(local[mask])

    def tocsr(self) -> sparse.csr_matrix:
        if not self.rows:
            return sparse.csr_matrix(self.shape)
        matrix = sparse.coo_matrix((np.concatenate(self.values),
                                    (np.concatenate(self.rows), np.concatenate(self.cols))),
                                   shape=self.shape).tocsr()
        matrix.sum_duplicates()
        return matrix


def _scatter_vector(size: int, dofs: np.ndarray, local: np.ndarray) -> np.ndarray:
    mask = dofs >= 0
    return np.bincount(dofs[mask], weights=local[mask], minlength=size)


def _physical_gradients(space: VelocitySpace, elements: slice, reference_gradients: np.ndarray) -> np.ndarray:
    mesh = space.mesh
    J = mesh.jacobians[elements]
    grad = np.einsum("tij,qbjk,tkl->tqbil", J, reference_gradients, mesh.inverse_jacobians[elements], optimize=True)
    grad /= mesh.determinants[elements, None, None, None, None]
    return grad * space.cell_signs[elements, None, :, None, None]


def _physical_values(space: VelocitySpace, elements: slice, reference_values: np.ndarray) -> np.ndarray:
    mesh = space.mesh
    values = np.einsum("tij,qbj->tqbi", mesh.jacobians[elements], reference_values, optimize=True)
    values /= mesh.determinants[elements, None, None, None]
    return values * space.cell_signs[elements, None, :, None]


def _quadrature_points(space: VelocitySpace, elements: slice, reference_points: np.ndarray) -> np.ndarray:
    indices = np.arange(space.mesh.num_triangles)[elements]
    return space.mesh.map_to_physical(indices[:, None], reference_points[None, :, :])


def _evaluate_convective(beta: ConvectiveField, points: np.ndarray) -> np.ndarray:
    flat = points.reshape(-1, 2)
    if isinstance(beta, DiscreteField):
        values = beta.values_at(flat)["value"]
    else:
        values = np.asarray(beta(flat), dtype=float)
    return np.broadcast_to(values, flat.shape).reshape(points.shape)


# ----------------------------------------------------------------------
# ファセットブロック
# ----------------------------------------------------------------------
@dataclass
class FacetBlock:
    """
    ファセット群の求積点での基底トレース

    局所基底は K+ 側の nb 個の後に K- 側の nb 個を並べた 2nb 個。
    片側ファセットでは K- 側の自由度は -1、値は 0。
    """
    facets: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    two_sided: np.ndarray
    normals: np.ndarray
    lengths: np.ndarray
    points: np.ndarray
    plus_reference: np.ndarray
    minus_reference: np.ndarray
    weights: np.ndarray
    dofs: np.ndarray
    jump: np.ndarray
    average: np.ndarray
    average_normal_gradient: np.ndarray
    plus_values: np.ndarray


def facet_blocks(space: VelocitySpace, facets: Sequence[int], degree: int,
                 with_gradients: bool = True) -> Iterator[FacetBlock]:
    """
    指定したファセットをチャンクに分けて FacetBlock を生成

    Args:
        space: 速度空間
        facets: ファセット番号
        degree: 辺の求積次数
        with_gradients: 法線方向微分の平均を計算するか
    """
    mesh = space.mesh
    facets = np.asarray(facets, dtype=np.int64)
    table = _edge_table(space.degree, degree)
    nb = space.reference.num_dofs
    nq = len(table["weights"])
    per_item = nq * 2 * nb * 2 * (6 if with_gradients else 3)

    for chunk in _chunks(len(facets), per_item):
        idx = facets[chunk]
        count = len(idx)
        plus = mesh.facet_elements[idx, 0]
        minus = mesh.facet_elements[idx, 1]
        two_sided = minus >= 0
        minus_safe = np.where(two_sided, minus, plus)
        plus_edge = mesh.facet_local_edges[idx, 0]
        minus_edge = np.where(two_sided, mesh.facet_local_edges[idx, 1], plus_edge)

        plus_ref_points = table["points"][plus_edge, 0]
        minus_ref_points = table["points"][minus_edge, 1]
        plus_map = piola_map(mesh.jacobians[plus], ref_values=table["values"][plus_edge, 0],
                             ref_gradients=table["gradients"][plus_edge, 0] if with_gradients else None)
        minus_map = piola_map(mesh.jacobians[minus_safe], ref_values=table["values"][minus_edge, 1],
                              ref_gradients=table["gradients"][minus_edge, 1] if with_gradients else None)

        plus_sign = space.cell_signs[plus][:, None, :, None]
        minus_sign = space.cell_signs[minus_safe][:, None, :, None] * two_sided[:, None, None, None]
        v_plus = plus_map["values"] * plus_sign
        v_minus = minus_map["values"] * minus_sign

        half = np.where(two_sided, 0.5, 1.0)[:, None, None, None]
        jump = np.concatenate([v_plus, -v_minus], axis=2)
        average = np.concatenate([half * v_plus, half * v_minus], axis=2)

        normals = mesh.facet_normals[idx]
        if with_gradients:
            g_plus = np.einsum("fqbij,fj->fqbi", plus_map["gradients"], normals) * plus_sign
            g_minus = np.einsum("fqbij,fj->fqbi", minus_map["gradients"], normals) * minus_sign
            average_normal_gradient = np.concatenate([half * g_plus, half * g_minus], axis=2)
        else:
            average_normal_gradient = np.zeros((count, nq, 0, 2))

        dofs = np.concatenate([space.cell_dofs[plus],
                               np.where(two_sided[:, None], space.cell_dofs[minus_safe], -1)], axis=1)
        points = mesh.map_to_physical(plus[:, None], plus_ref_points)
        yield FacetBlock(
            facets=idx, plus=plus, minus=np.where(two_sided, minus, -1), two_sided=two_sided,
            normals=normals, lengths=mesh.facet_lengths[idx], points=points,
            plus_reference=plus_ref_points, minus_reference=minus_ref_points,
            weights=table["weights"][None, :] * mesh.facet_lengths[idx, None],
            dofs=dofs, jump=jump, average=average,
            average_normal_gradient=average_normal_gradient, plus_values=v_plus,
        )


def facets_with_condition(space: VelocitySpace, conditions: Sequence[str]) -> np.ndarray:
    """境界条件の種類でファセットを選ぶ（"interior", "periodic", "noslip" など）"""
    return np.flatnonzero(np.isin(space.facet_conditions.astype(str), list(conditions)))


def viscous_facets(space: VelocitySpace) -> np.ndarray:
    """a_h の面積分を持つファセット（内部・周期・no-slip 境界）"""
    return facets_with_condition(space, ("interior", "periodic", "noslip"))


def transport_facets(space: VelocitySpace) -> np.ndarray:
    """c_h の面積分を持つファセット（内部・周期）"""
    return facets_with_condition(space, ("interior", "periodic"))


# ----------------------------------------------------------------------
# 行列
# ----------------------------------------------------------------------
def assemble_mass(space: VelocitySpace) -> sparse.csr_matrix:
    """
    速度の質量行列 M_ab = ∫φ_a·φ_b

    Returns:
        対称正定値の CSR 行列（空間ごとにキャッシュ）
    """
    def build():
        mesh = space.mesh
        table = _volume_table(space.degree, 2 * space.degree + 2)
        weights = table["weights"]
        nb = space.reference.num_dofs
        triplets = _Triplets((space.num_dofs, space.num_dofs))
        metric = np.einsum("tji,tjk->tik", mesh.jacobians, mesh.jacobians) / mesh.determinants[:, None, None]
        for chunk in _chunks(mesh.num_triangles, nb * nb):
            local = np.einsum("q,qai,tij,qbj->tab", weights, table["values"], metric[chunk], table["values"], optimize=True)
            signs = space.cell_signs[chunk]
            local *= signs[:, :, None] * signs[:, None, :]
            dofs = space.cell_dofs[chunk]
            triplets.add(dofs, dofs, local)
        return triplets.tocsr()

    return table_cache.get_or_build((space.uid, "mass"), build)


def assemble_sip(space: VelocitySpace, nu: float = 1.0, sigma: Optional[float] = None,
                 sigma_wall: Optional[float] = None) -> sparse.csr_matrix:
    """
    SIP 粘性形式 ν·a_h を組み立てる

    a_h(w, v) = Σ_K ∫∇w:∇v − Σ_F ∫({{∇w}}n)·[[v]] − Σ_F ∫[[w]]·({{∇v}}n) + Σ_F σ/h_F ∫[[w]]·[[v]]

    面積分は内部・周期・no-slip 境界ファセットのみ。free-slip と open の
    境界ファセットでは面積分をすべて省く。

    Args:
        space: 速度空間
        nu: 粘性係数
        sigma: ペナルティ（None なら default_sigma(k)）
        sigma_wall: no-slip 壁上のペナルティ（None なら sigma）

    Raises:
        ValueError: σ <= 0
    """
    k = space.degree
    sigma = default_sigma(k) if sigma is None else float(sigma)
    sigma_wall = sigma if sigma_wall is None else float(sigma_wall)
    if sigma <= 0.0 or sigma_wall <= 0.0:
        raise ValueError(f"SIP ペナルティは正である必要があります: σ={sigma}, σ_wall={sigma_wall}")

    def build():
        mesh = space.mesh
        degree = 2 * k + 2
        table = _volume_table(k, degree)
        weights = table["weights"]
        nb = space.reference.num_dofs
        triplets = _Triplets((space.num_dofs, space.num_dofs))

        for chunk in _chunks(mesh.num_triangles, len(weights) * nb * 4):
            grads = _physical_gradients(space, chunk, table["gradients"])
            local = np.einsum("q,tqail,tqbil->tab", weights, grads, grads, optimize=True)
            local *= mesh.determinants[chunk, None, None]
            dofs = space.cell_dofs[chunk]
            triplets.add(dofs, dofs, local)

        for block in facet_blocks(space, viscous_facets(space), degree):
            wall = ~block.two_sided
            penalty = np.where(wall, sigma_wall, sigma) / block.lengths
            consistency = np.einsum("fq,fqbi,fqai->fab", block.weights, block.average_normal_gradient, block.jump)
            stabilisation = np.einsum("fq,fqbi,fqai->fab", block.weights, block.jump, block.jump)
            local = -consistency - consistency.transpose(0, 2, 1) + penalty[:, None, None] * stabilisation
            triplets.add(block.dofs, block.dofs, local)
        return triplets.tocsr()

    matrix = table_cache.get_or_build((space.uid, "sip", sigma, sigma_wall), build)
    return nu * matrix


def assemble_convection(space: VelocitySpace, beta: ConvectiveField, gamma: float = Config.DEFAULT_GAMMA) -> sparse.csr_matrix:
    """
    風上安定化付き対流形式 c_h(β; w, v) の行列 N(β)

    c_h(β; w, v) = Σ_K ∫(β·∇w)·v − Σ_F ∫(β·n)[[w]]·{{v}} + Σ_F ∫(γ/2)|β·n| [[w]]·[[v]]

    面積分は内部・周期ファセットのみ（境界ファセットでは β·n = 0）。
    β·n は K+ 側から評価する。

    Args:
        space: 速度空間
        beta: 対流場（解析関数、離散場、または None = 0）
        gamma: 風上パラメータ
    """
    if gamma < 0.0:
        raise ValueError(f"風上パラメータが負です: {gamma}")
    triplets = _Triplets((space.num_dofs, space.num_dofs))
    if beta is None:
        return triplets.tocsr()

    mesh = space.mesh
    degree = min(3 * space.degree + 2, 20)
    table = _volume_table(space.degree, degree)
    weights = table["weights"]
    nb = space.reference.num_dofs
    beta_volume = _convective_at_volume(space, beta, table["points"])

    for chunk in _chunks(mesh.num_triangles, len(weights) * nb * 6):
        values = _physical_values(space, chunk, table["values"])
        grads = _physical_gradients(space, chunk, table["gradients"])
        transported = np.einsum("tqbil,tql->tqbi", grads, beta_volume[chunk])
        local = np.einsum("q,tqai,tqbi->tab", weights, values, transported, optimize=True)
        local *= mesh.determinants[chunk, None, None]
        dofs = space.cell_dofs[chunk]
        triplets.add(dofs, dofs, local)

    for block in facet_blocks(space, transport_facets(space), degree, with_gradients=False):
        flux = np.einsum("fqi,fi->fq", _convective_on_facets(beta, block), block.normals)
        upwind = 0.5 * gamma * np.abs(flux)
        central = np.einsum("fq,fqbi,fqai->fab", block.weights * flux, block.jump, block.average)
        penalty = np.einsum("fq,fqbi,fqai->fab", block.weights * upwind, block.jump, block.jump)
        triplets.add(block.dofs, block.dofs, penalty - central)
    return triplets.tocsr()


def assemble_convection_derivative(space: VelocitySpace, velocity: DiscreteField,
                                   gamma: float = Config.DEFAULT_GAMMA) -> sparse.csr_matrix:
    """
    対流形式の β スロットに関する微分 D(u)δ = d/dβ c_h(β; u, ·)|_{β=u} [δ]

    Newton 法のヤコビアンで N(u) + D(u) として使う。
    δ·n は法線トレースが連続なので K+ 側の基底だけで評価する。

    Args:
        space: 速度空間
        velocity: 線形化点 u（同じ空間の離散場）
        gamma: 風上パラメータ
    """
    mesh = space.mesh
    degree = min(3 * space.degree + 2, 20)
    table = _volume_table(space.degree, degree)
    weights = table["weights"]
    nb = space.reference.num_dofs
    triplets = _Triplets((space.num_dofs, space.num_dofs))
    gradient_u = velocity.element_values(table["points"])["gradient"]

    for chunk in _chunks(mesh.num_triangles, len(weights) * nb * 4):
        values = _physical_values(space, chunk, table["values"])
        transported = np.einsum("tqil,tqbl->tqbi", gradient_u[chunk], values)
        local = np.einsum("q,tqai,tqbi->tab", weights, values, transported, optimize=True)
        local *= mesh.determinants[chunk, None, None]
        dofs = space.cell_dofs[chunk]
        triplets.add(dofs, dofs, local)

    local_u = space.local_coefficients(velocity.coefficients)
    for block in facet_blocks(space, transport_facets(space), degree, with_gradients=False):
        u_local = np.concatenate([local_u[block.plus], local_u[np.where(block.two_sided, block.minus, block.plus)]], axis=1)
        u_jump = np.einsum("fqbi,fb->fqi", block.jump, u_local)
        u_flux = np.einsum("fqbi,fb,fi->fq", block.plus_values, local_u[block.plus], block.normals)
        trial_flux = np.einsum("fqbi,fi->fqb", block.plus_values, block.normals)
        central = np.einsum("fq,fqb,fqi,fqai->fab", block.weights, trial_flux, u_jump, block.average)
        penalty = np.einsum("fq,fqb,fqi,fqai->fab", block.weights * 0.5 * gamma * np.sign(u_flux),
                            trial_flux, u_jump, block.jump)
        triplets.add(block.dofs, block.dofs[:, :nb], penalty - central)
    return triplets.tocsr()


def _convective_at_volume(space: VelocitySpace, beta: ConvectiveField, reference_points: np.ndarray) -> np.ndarray:
    if isinstance(beta, DiscreteField):
        if beta.space.mesh.num_triangles != space.mesh.num_triangles:
            raise ValueError("対流場は同じメッシュ上の離散場である必要があります")
        return beta.element_values(reference_points)["value"]
    points = _quadrature_points(space, slice(None), reference_points)
    return _evaluate_convective(beta, points)


def _convective_on_facets(beta: ConvectiveField, block: FacetBlock) -> np.ndarray:
    if isinstance(beta, DiscreteField):
        count, nq = block.plus_reference.shape[:2]
        elements = np.repeat(block.plus, nq)
        values = beta.space.point_values(beta.coefficients, elements, block.plus_reference.reshape(-1, 2))["value"]
        return values.reshape(count, nq, 2)
    return _evaluate_convective(beta, block.points)


def assemble_div_coupling(velocity_space: VelocitySpace, pressure_space: PressureSpace) -> sparse.csr_matrix:
    """
    結合行列 B_ij = b(φ_j, ψ_i) = −∫ψ_i ∇·φ_j

    アフィン写像で det J が相殺するため局所行列は参照行列に符号を掛けたもの。

    Returns:
        (圧力自由度) × (速度自由度) の CSR 行列
    """
    if pressure_space.mesh.num_triangles != velocity_space.mesh.num_triangles:
        raise ValueError("速度空間と圧力空間のメッシュが一致しません")

    def build():
        k = velocity_space.degree
        table = _volume_table(k, 2 * k + 2)
        psi = pressure_space.basis.values(table["points"])
        reference = -np.einsum("q,qi,qj->ij", table["weights"], psi, table["divergence"])
        triplets = _Triplets((pressure_space.num_dofs, velocity_space.num_dofs))
        local = reference[None, :, :] * velocity_space.cell_signs[:, None, :]
        triplets.add(pressure_space.cell_dofs, velocity_space.cell_dofs, local)
        return triplets.tocsr()

    return table_cache.get_or_build((velocity_space.uid, pressure_space.uid, "coupling"), build)


def assemble_load(f: Optional[VectorFunction], space: VelocitySpace, degree: Optional[int] = None) -> np.ndarray:
    """
    荷重ベクトル F_a = ∫f·φ_a

    Args:
        f: 点 (N, 2) -> 値 (N, 2) の外力（None なら 0）
        space: 速度空間
        degree: 求積次数（既定は Config.INTERPOLATION_DEGREE）
    """
    if f is None:
        return np.zeros(space.num_dofs)
    degree = Config.INTERPOLATION_DEGREE if degree is None else degree
    mesh = space.mesh
    rule = triangle_quadrature(degree)
    values = space.reference.values(rule.points)
    result = np.zeros(space.num_dofs)
    nb = space.reference.num_dofs
    for chunk in _chunks(mesh.num_triangles, rule.num_points * nb):
        forcing = _evaluate_convective(f, _quadrature_points(space, chunk, rule.points))
        # Piola の det J と求積の det J が相殺する
        local = np.einsum("q,tqi,tij,qbj->tb", rule.weights, forcing, mesh.jacobians[chunk], values, optimize=True)
        local *= space.cell_signs[chunk]
        result += _scatter_vector(space.num_dofs, space.cell_dofs[chunk], local)
    return result


def assemble_sip_rhs(space: VelocitySpace, w: VectorFunction, grad_w: GradientFunction,
                     sigma: Optional[float] = None, sigma_wall: Optional[float] = None,
                     degree: Optional[int] = None) -> np.ndarray:
    """
    解析関数 w に対する a_h(w, φ_a) を計算

    w は滑らかで周期境界上で周期的とし、内部・周期ファセットでは [[w]] = 0。
    no-slip 境界ファセットでは [[w]] = w として全項を評価する。

    Args:
        space: 速度空間
        w: 点 (N, 2) -> 値 (N, 2)
        grad_w: 点 (N, 2) -> 勾配 (N, 2, 2)、[i, j] = ∂w_i/∂x_j
        sigma, sigma_wall: assemble_sip と同じ
        degree: 体積求積次数（既定は Config.INTERPOLATION_DEGREE）
    """
    k = space.degree
    sigma = default_sigma(k) if sigma is None else float(sigma)
    sigma_wall = sigma if sigma_wall is None else float(sigma_wall)
    if sigma <= 0.0 or sigma_wall <= 0.0:
        raise ValueError(f"SIP ペナルティは正である必要があります: σ={sigma}, σ_wall={sigma_wall}")
    degree = Config.INTERPOLATION_DEGREE if degree is None else degree
    mesh = space.mesh
    table = _volume_table(k, degree)
    weights = table["weights"]
    nb = space.reference.num_dofs
    result = np.zeros(space.num_dofs)

    for chunk in _chunks(mesh.num_triangles, len(weights) * nb * 4):
        points = _quadrature_points(space, chunk, table["points"])
        gradient = np.asarray(grad_w(points.reshape(-1, 2)), dtype=float).reshape(points.shape[:2] + (2, 2))
        grads = _physical_gradients(space, chunk, table["gradients"])
        local = np.einsum("q,tqil,tqbil->tb", weights, gradient, grads, optimize=True)
        local *= mesh.determinants[chunk, None]
        result += _scatter_vector(space.num_dofs, space.cell_dofs[chunk], local)

    edge_degree = min(2 * k + 6, 20)
    for block in facet_blocks(space, viscous_facets(space), edge_degree):
        flat = block.points.reshape(-1, 2)
        gradient = np.asarray(grad_w(flat), dtype=float).reshape(block.points.shape[:2] + (2, 2))
        flux = np.einsum("fqij,fj->fqi", gradient, block.normals)
        local = -np.einsum("fq,fqi,fqai->fa", block.weights, flux, block.jump)

        wall = ~block.two_sided
        if np.any(wall):
            values = np.asarray(w(flat), dtype=float).reshape(block.points.shape)
            values = values * wall[:, None, None]
            local -= np.einsum("fq,fqi,fqai->fa", block.weights, values, block.average_normal_gradient)
            local += np.einsum("fq,fqi,fqai->fa", block.weights * (sigma_wall / block.lengths)[:, None], values, block.jump)
        result += _scatter_vector(space.num_dofs, block.dofs, local)
    return result


def upwind_seminorm_squared(space: VelocitySpace, coefficients: np.ndarray, beta: ConvectiveField,
                            gamma: float = Config.DEFAULT_GAMMA) -> float:
    """
    |v|²_{β,upw} = Σ_F ∫(γ/2)|β·n| |[[v]]|² をファセットごとの求積で直接計算

    assemble_convection とは独立に評価する。
    """
    if beta is None or gamma == 0.0:
        return 0.0
    degree = min(3 * space.degree + 2, 20)
    local_v = space.local_coefficients(coefficients)
    total = 0.0
    for block in facet_blocks(space, transport_facets(space), degree, with_gradients=False):
        flux = np.einsum("fqi,fi->fq", _convective_on_facets(beta, block), block.normals)
        v_local = np.concatenate([local_v[block.plus], local_v[np.where(block.two_sided, block.minus, block.plus)]], axis=1)
        jump = np.einsum("fqbi,fb->fqi", block.jump, v_local)
        total += float(np.sum(block.weights * 0.5 * gamma * np.abs(flux) * np.einsum("fqi,fqi->fq", jump, jump)))
    return total
