"""有限要素空間モジュール

速度空間 V_h（RT_k、法線成分が連続）と圧力空間 Q_h（不連続 P_k、平均 0）の
大域自由度番号付け、境界条件の分類、離散場の評価、標準補間と L² 射影を提供する。
"""

import itertools
import logging
from typing import Callable, Dict, List, Mapping, Optional, Union

import numpy as np

from hdivflow.config import Config
from hdivflow.exceptions import ConfigError, MeshError
from hdivflow.services.mesh import BOUNDARY, PERIODIC, PERIODIC_WALLS, WALLS, Mesh, apply_periodic_identification
from hdivflow.services.reference_element import (
    build_rt_basis,
    build_scalar_basis,
    edge_moment_polynomials,
    edge_quadrature,
    piola_map,
    triangle_quadrature,
)

logger = logging.getLogger(__name__)

BC_KINDS = ("noslip", "freeslip", "periodic", "open")
# 法線成分を強く 0 に拘束する境界条件
CONSTRAINED_KINDS = ("noslip", "freeslip")

VectorFunction = Callable[[np.ndarray], np.ndarray]
ScalarFunction = Callable[[np.ndarray], np.ndarray]

_space_ids = itertools.count()


def normalize_bc(bc: Union[str, Mapping[str, str]]) -> Dict[str, str]:
    """
    境界条件指定を壁名 -> 種類の辞書に正規化

    Args:
        bc: 全壁共通の種類、または {"left": ..., "right": ..., "bottom": ..., "top": ...}

    Raises:
        ConfigError: 未知の壁名・種類、または片側だけの周期指定
    """
    if isinstance(bc, str):
        bc = {wall: bc for wall in WALLS}
    result = {}
    for wall, kind in bc.items():
        if wall not in WALLS:
            raise ConfigError(f"未知の壁名です: {wall}")
        if kind not in BC_KINDS:
            raise ConfigError(f"未知の境界条件です: {wall}={kind}")
        result[wall] = kind
    for axis, (first, second) in PERIODIC_WALLS.items():
        if (result.get(first) == "periodic") != (result.get(second) == "periodic"):
            raise ConfigError(f"周期境界は {first} と {second} の両方に指定する必要があります")
    return result


def periodic_axes_of(bc: Mapping[str, str]) -> List[str]:
    """境界条件から周期軸の一覧を返す"""
    return [axis for axis, (first, _) in PERIODIC_WALLS.items() if bc.get(first) == "periodic"]


def _inside_reference(points: np.ndarray, tolerance: float = 1e-12) -> np.ndarray:
    x = points[..., 0]
    y = points[..., 1]
    return (x >= -tolerance) & (y >= -tolerance) & (x + y <= 1.0 + tolerance)


class VelocitySpace:
    """
    RT_k 速度空間

    大域自由度はファセット自由度（ファセット順、各 k+1 個）の後に
    要素内部自由度（要素順、各 k(k+1) 個）を並べる。
    法線成分を拘束した境界ファセットの自由度は番号を持たない（-1）。
    """

    def __init__(self, mesh: Mesh, k: int, bc: Union[str, Mapping[str, str]]):
        self.uid = next(_space_ids)
        self.degree = k
        self.reference = build_rt_basis(k)
        self.bc = normalize_bc(bc)
        axes = periodic_axes_of(self.bc)
        if axes:
            mesh = apply_periodic_identification(mesh, axes)
        self.mesh = mesh

        self.facet_conditions = self._classify_facets()
        self._number_dofs()
        logger.info(f"速度空間 RT{k}: 自由度 {self.num_dofs} (ファセット {self.num_facet_dofs}, 内部 {self.num_dofs - self.num_facet_dofs})")

    def _classify_facets(self) -> np.ndarray:
        mesh = self.mesh
        conditions = np.where(mesh.facet_kinds == PERIODIC, "periodic", "interior").astype(object)
        for f in mesh.boundary_facets():
            wall = mesh.wall_of_facet(f)
            if not wall:
                logger.error(f"壁に属さない境界ファセット: {f}")
                raise MeshError(f"境界ファセット {f} に境界条件を割り当てられません (中点 {mesh.facet_midpoints[f]})")
            if wall not in self.bc:
                raise ConfigError(f"壁 {wall} の境界条件が指定されていません")
            kind = self.bc[wall]
            if kind == "periodic":
                raise MeshError(f"壁 {wall} は周期境界として結合されていません")
            conditions[f] = kind
        return conditions

    def _number_dofs(self) -> None:
        mesh = self.mesh
        k = self.degree
        per_facet = k + 1
        free = np.array([c not in CONSTRAINED_KINDS for c in self.facet_conditions], dtype=bool)
        offsets = np.full(mesh.num_facets, -1, dtype=np.int64)
        offsets[free] = np.arange(int(free.sum())) * per_facet
        self.facet_offsets = offsets
        self.num_facet_dofs = int(free.sum()) * per_facet

        num_local = self.reference.num_dofs
        num_interior = self.reference.num_interior_dofs
        cell_dofs = np.full((mesh.num_triangles, num_local), -1, dtype=np.int64)
        signs = np.ones((mesh.num_triangles, num_local))
        elements = np.arange(mesh.num_triangles)
        # t_F = (−n₂, n₁) は K+ の局所辺 (v_{e+1} → v_{e+2}) の向きに一致する。
        # K+ では flip = +1、K- では辺の向きが t_F と逆なら奇数次のモーメントの符号が反転する
        facet_tangents = np.column_stack([-mesh.facet_normals[:, 1], mesh.facet_normals[:, 0]])

        for edge in range(3):
            facets = mesh.element_facets[:, edge]
            owner = (mesh.facet_elements[facets, 0] == elements) & (mesh.facet_local_edges[facets, 0] == edge)
            orient = np.where(owner, 1.0, -1.0)
            start = mesh.vertices[mesh.triangles[:, (edge + 1) % 3]]
            end = mesh.vertices[mesh.triangles[:, (edge + 2) % 3]]
            flip = np.sign(np.einsum("ti,ti->t", end - start, facet_tangents[facets]))
            base = offsets[facets]
            for j in range(per_facet):
                column = edge * per_facet + j
                cell_dofs[:, column] = np.where(base >= 0, base + j, -1)
                signs[:, column] = orient * flip ** j

        cell_dofs[:, 3 * per_facet:] = self.num_facet_dofs + np.arange(mesh.num_triangles * num_interior).reshape(-1, num_interior)
        self.cell_dofs = cell_dofs
        self.cell_signs = signs
        self.num_dofs = self.num_facet_dofs + mesh.num_triangles * num_interior

        kinds = np.empty(self.num_dofs, dtype=object)
        kinds[self.num_facet_dofs:] = "interior"
        for f in np.flatnonzero(free):
            kinds[offsets[f]:offsets[f] + per_facet] = "periodic" if self.facet_conditions[f] == "periodic" else "facet"
        self.dof_kinds = kinds
        for array in (self.cell_dofs, self.cell_signs, self.facet_offsets):
            array.flags.writeable = False

    @property
    def dofs_per_facet(self) -> int:
        return self.degree + 1

    def facet_dofs(self, facet: int) -> np.ndarray:
        """ファセットの大域自由度番号（拘束されていれば空）"""
        offset = self.facet_offsets[facet]
        if offset < 0:
            return np.empty(0, dtype=np.int64)
        return np.arange(offset, offset + self.dofs_per_facet)

    def local_coefficients(self, coefficients: np.ndarray) -> np.ndarray:
        """大域係数を要素ごとの局所係数 (T, nb) に展開（符号込み、拘束自由度は 0）"""
        padded = np.append(np.asarray(coefficients, dtype=float), 0.0)
        return padded[self.cell_dofs] * self.cell_signs

    def element_values(self, coefficients: np.ndarray, reference_points: np.ndarray) -> Dict[str, np.ndarray]:
        """
        全要素の共通参照点で場を評価

        Returns:
            "value" (T, nq, 2), "gradient" (T, nq, 2, 2), "divergence" (T, nq), "curl" (T, nq)
        """
        mesh = self.mesh
        local = self.local_coefficients(coefficients)
        table = self.reference.tabulate(reference_points)
        det = mesh.determinants
        value = np.einsum("tb,tij,qbj->tqi", local, mesh.jacobians, table["values"], optimize=True) / det[:, None, None]
        grad_ref = np.einsum("tb,qbjk->tqjk", local, table["gradients"], optimize=True)
        gradient = np.einsum("tij,tqjk,tkl->tqil", mesh.jacobians, grad_ref, mesh.inverse_jacobians,
                             optimize=True) / det[:, None, None, None]
        divergence = (local @ table["divergence"].T) / det[:, None]
        curl = gradient[..., 1, 0] - gradient[..., 0, 1]
        return {"value": value, "gradient": gradient, "divergence": divergence, "curl": curl}

    def point_values(self, coefficients: np.ndarray, elements: np.ndarray, reference_points: np.ndarray) -> Dict[str, np.ndarray]:
        """点ごとに要素と参照座標を指定して評価（各配列の先頭軸は点）"""
        elements = np.asarray(elements, dtype=np.int64).reshape(-1)
        reference_points = np.asarray(reference_points, dtype=float).reshape(-1, 2)
        local = self.local_coefficients(coefficients)[elements]
        table = self.reference.tabulate(reference_points)
        mapped = piola_map(self.mesh.jacobians[elements], ref_values=table["values"],
                           ref_divergence=table["divergence"], ref_gradients=table["gradients"])
        value = np.einsum("nb,nbi->ni", local, mapped["values"])
        gradient = np.einsum("nb,nbij->nij", local, mapped["gradients"])
        divergence = np.einsum("nb,nb->n", local, mapped["divergence"])
        return {"value": value, "gradient": gradient, "divergence": divergence,
                "curl": gradient[:, 1, 0] - gradient[:, 0, 1]}


class PressureSpace:
    """不連続 P_l 圧力空間（要素ごとに正規直交基底、平均 0 は解法時の乗数で課す）"""

    def __init__(self, mesh: Mesh, degree: int):
        self.uid = next(_space_ids)
        self.mesh = mesh
        self.degree = degree
        self.basis = build_scalar_basis(degree)
        self.num_local = self.basis.num_dofs
        self.num_dofs = mesh.num_triangles * self.num_local
        self.cell_dofs = np.arange(self.num_dofs, dtype=np.int64).reshape(mesh.num_triangles, self.num_local)
        rule = triangle_quadrature(degree)
        # 参照要素上の ∫ψ̂_m
        self.reference_integrals = rule.weights @ self.basis.values(rule.points)
        logger.info(f"圧力空間 P{degree}: 自由度 {self.num_dofs}")

    def mean_functional(self) -> np.ndarray:
        """q ↦ ∫q dx を与えるベクトル"""
        return (self.mesh.determinants[:, None] * self.reference_integrals[None, :]).ravel()

    def constant_coefficients(self) -> np.ndarray:
        """定数関数 1 の係数"""
        return np.tile(self.reference_integrals, self.mesh.num_triangles)

    def local_coefficients(self, coefficients: np.ndarray) -> np.ndarray:
        return np.asarray(coefficients, dtype=float).reshape(self.mesh.num_triangles, self.num_local)

    def element_values(self, coefficients: np.ndarray, reference_points: np.ndarray) -> Dict[str, np.ndarray]:
        """全要素の共通参照点で評価: "value" (T, nq), "gradient" (T, nq, 2)"""
        local = self.local_coefficients(coefficients)
        value = local @ self.basis.values(reference_points).T
        grad_ref = np.einsum("tb,qbj->tqj", local, self.basis.gradients(reference_points))
        gradient = np.einsum("tqj,tji->tqi", grad_ref, self.mesh.inverse_jacobians)
        return {"value": value, "gradient": gradient}

    def point_values(self, coefficients: np.ndarray, elements: np.ndarray, reference_points: np.ndarray) -> Dict[str, np.ndarray]:
        elements = np.asarray(elements, dtype=np.int64).reshape(-1)
        reference_points = np.asarray(reference_points, dtype=float).reshape(-1, 2)
        local = self.local_coefficients(coefficients)[elements]
        value = np.einsum("nb,nb->n", local, self.basis.values(reference_points))
        grad_ref = np.einsum("nb,nbj->nj", local, self.basis.gradients(reference_points))
        gradient = np.einsum("nj,nji->ni", grad_ref, self.mesh.inverse_jacobians[elements])
        return {"value": value, "gradient": gradient}


Space = Union[VelocitySpace, PressureSpace]


class DiscreteField:
    """空間上の係数ベクトル"""

    def __init__(self, space: Space, coefficients: Optional[np.ndarray] = None):
        self.space = space
        if coefficients is None:
            coefficients = np.zeros(space.num_dofs)
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (space.num_dofs,):
            raise ValueError(f"係数の長さ {coefficients.shape} が自由度数 {space.num_dofs} と一致しません")
        self.coefficients = coefficients

    def copy(self) -> "DiscreteField":
        return DiscreteField(self.space, self.coefficients.copy())

    def _check_same_space(self, other: "DiscreteField") -> None:
        if other.space is not self.space:
            raise ValueError("異なる空間の離散場は演算できません")

    def __add__(self, other: "DiscreteField") -> "DiscreteField":
        self._check_same_space(other)
        return DiscreteField(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other: "DiscreteField") -> "DiscreteField":
        self._check_same_space(other)
        return DiscreteField(self.space, self.coefficients - other.coefficients)

    def __mul__(self, factor: float) -> "DiscreteField":
        return DiscreteField(self.space, factor * self.coefficients)

    __rmul__ = __mul__

    def evaluate(self, element: int, reference_point) -> Dict[str, np.ndarray]:
        """
        1 要素 1 点で値・勾配・発散・回転を評価

        Args:
            element: 要素番号
            reference_point: 参照三角形内の点

        Raises:
            ValueError: 要素番号が範囲外、または参照点が参照三角形の外
        """
        point = np.asarray(reference_point, dtype=float).reshape(2)
        if not 0 <= element < self.space.mesh.num_triangles:
            raise ValueError(f"要素番号 {element} が範囲外です")
        if not _inside_reference(point):
            raise ValueError(f"参照点 {point} は参照三角形の外にあります")
        values = self.space.point_values(self.coefficients, np.array([element]), point[None, :])
        return {key: value[0] for key, value in values.items()}

    def element_values(self, reference_points: np.ndarray) -> Dict[str, np.ndarray]:
        return self.space.element_values(self.coefficients, reference_points)

    def values_at(self, points: np.ndarray) -> Dict[str, np.ndarray]:
        """物理座標の点列で評価（点を含む要素を探索する）"""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        elements, reference = self.space.mesh.locate_points(points)
        return self.space.point_values(self.coefficients, elements, reference)


def build_velocity_space(mesh: Mesh, k: int, bc: Union[str, Mapping[str, str]]) -> VelocitySpace:
    """
    速度空間を構築

    周期境界が指定された軸はメッシュに周期対応付けを適用してから番号付けする。

    Args:
        mesh: メッシュ
        k: RT 次数 (1〜4)
        bc: 壁ごとの境界条件 (noslip | freeslip | periodic | open)
    """
    return VelocitySpace(mesh, k, bc)


def build_pressure_space(mesh: Mesh, k: int) -> PressureSpace:
    """圧力空間 P_k を構築（速度空間と同じメッシュを渡すこと）"""
    return PressureSpace(mesh, k)


def _evaluate_vector(function: VectorFunction, points: np.ndarray) -> np.ndarray:
    flat = points.reshape(-1, 2)
    values = np.asarray(function(flat), dtype=float)
    return np.broadcast_to(values, flat.shape).reshape(points.shape)


def _evaluate_scalar(function: ScalarFunction, points: np.ndarray) -> np.ndarray:
    flat = points.reshape(-1, 2)
    values = np.asarray(function(flat), dtype=float)
    return np.broadcast_to(values, (len(flat),)).reshape(points.shape[:-1])


def interpolate_velocity(w: VectorFunction, space: VelocitySpace, degree: Optional[int] = None) -> DiscreteField:
    """
    標準 RT 補間 j_h w

    ファセット自由度は ∫_F w·n_F q_j ds、内部自由度は Piola 逆変換した w の
    内部モーメント。拘束されたファセットでは w·n = 0 を仮定して値を捨てる。

    Args:
        w: 点 (N, 2) -> 値 (N, 2) のベクトル場
        space: 速度空間
        degree: 求積次数（既定は Config.INTERPOLATION_DEGREE）
    """
    degree = Config.INTERPOLATION_DEGREE if degree is None else degree
    mesh = space.mesh
    k = space.degree
    coefficients = np.zeros(space.num_dofs)

    free = np.flatnonzero(space.facet_offsets >= 0)
    if len(free):
        rule = edge_quadrature(degree)
        a = mesh.vertices[mesh.facet_vertices[free, 0]]
        b = mesh.vertices[mesh.facet_vertices[free, 1]]
        points = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
        values = _evaluate_vector(w, points)
        normal_flux = np.einsum("fqi,fi->fq", values, mesh.facet_normals[free]) * mesh.facet_lengths[free, None]
        moments = (normal_flux * rule.weights) @ edge_moment_polynomials(k, rule.points)
        indices = space.facet_offsets[free][:, None] + np.arange(k + 1)
        coefficients[indices] = moments

    rule = triangle_quadrature(degree)
    points = mesh.map_to_physical(np.arange(mesh.num_triangles)[:, None], rule.points[None, :, :])
    values = _evaluate_vector(w, points)
    # Piola 逆変換: ŵ = det J · J^{-1} w
    pulled = np.einsum("tij,tqj->tqi", mesh.inverse_jacobians, values) * mesh.determinants[:, None, None]
    p = space.reference.interior_basis.values(rule.points)
    interior = np.concatenate([np.einsum("q,tq,qm->tm", rule.weights, pulled[..., c], p) for c in (0, 1)], axis=1)
    coefficients[space.cell_dofs[:, 3 * (k + 1):]] = interior
    return DiscreteField(space, coefficients)


def project_pressure(q: ScalarFunction, space: PressureSpace, degree: Optional[int] = None,
                     remove_mean: bool = True) -> DiscreteField:
    """
    要素ごとの L² 射影 π_0 q（既定で平均を除去して L²_0 に入れる）

    Args:
        q: 点 (N, 2) -> 値 (N,) のスカラー場
        space: 圧力空間
        degree: 求積次数（既定は Config.INTERPOLATION_DEGREE）
        remove_mean: 平均を除去するか
    """
    degree = Config.INTERPOLATION_DEGREE if degree is None else degree
    mesh = space.mesh
    rule = triangle_quadrature(degree)
    points = mesh.map_to_physical(np.arange(mesh.num_triangles)[:, None], rule.points[None, :, :])
    values = _evaluate_scalar(q, points)
    # 参照要素で正規直交なので係数は参照求積のみで決まる
    local = (values * rule.weights) @ space.basis.values(rule.points)
    coefficients = local.ravel()
    if remove_mean:
        coefficients = coefficients - (space.mean_functional() @ coefficients) * space.constant_coefficients()
    return DiscreteField(space, coefficients)


def evaluate_field(field: DiscreteField, element: int, reference_point) -> Dict[str, np.ndarray]:
    """離散場を 1 要素 1 点で評価（value, gradient, divergence, curl）"""
    return field.evaluate(element, reference_point)


def constant_velocity_kernel(space: VelocitySpace, viscous_matrix) -> List[np.ndarray]:
    """
    粘性形式の核に入る定数速度場の係数ベクトルを返す

    全周期や周期×free-slip のとき、定数場 e_d は a_h(e_d, ·) = 0 となり
    定常問題の解が一意に定まらない。

    Args:
        space: 速度空間
        viscous_matrix: a_h の行列

    Returns:
        浮いている方向ごとの係数ベクトル
    """
    result = []
    scale = float(np.max(np.abs(viscous_matrix.diagonal()))) if space.num_dofs else 0.0
    for direction in (0, 1):
        vector = np.zeros(2)
        vector[direction] = 1.0
        field = interpolate_velocity(lambda x, v=vector: np.broadcast_to(v, x.shape), space, degree=2)
        c = field.coefficients
        energy = float(c @ (viscous_matrix @ c))
        norm = float(c @ c)
        if norm > 0.0 and energy <= 1e-9 * scale * norm:
            # 拘束された壁があると e_d は表現できない
            check = field.element_values(np.array([[1.0 / 3.0, 1.0 / 3.0]]))["value"]
            if np.allclose(check, vector, atol=1e-10):
                result.append(c)
    if result:
        logger.debug(f"粘性形式の核に定数速度場 {len(result)} 方向")
    return result
