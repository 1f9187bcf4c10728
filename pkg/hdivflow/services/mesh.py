"""三角形メッシュ管理モジュール

単位正方形 (0,1)² の適合三角形分割を構築・読み込みし、辺（ファセット）の
トポロジー、法線の向き、周期境界の対応付けを提供する。

規約:
    - 三角形の頂点は反時計回り。局所辺 i は頂点 i の対辺。
    - ファセットの K+ は隣接要素のうち番号の小さい方、n_F は K+ の外向き法線。
    - 周期対のファセットは内部ファセットと同様に扱い、K- 側の点は
      K+ 側の点に shift を足した位置にある。
"""

import copy
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, TextIO, Tuple

import numpy as np
from scipy.spatial import cKDTree

from hdivflow.exceptions import MeshError, MeshFormatError, PeriodicIdentificationError

logger = logging.getLogger(__name__)

MESH_HEADER = "hdivmesh 1"
GEOMETRY_TOLERANCE = 1e-12
PERIODIC_TOLERANCE = 1e-12

WALLS = ("left", "right", "bottom", "top")
# 軸ごとの (K+ 側候補の壁, 対向する壁)
PERIODIC_WALLS = {"x1": ("left", "right"), "x2": ("bottom", "top")}

INTERIOR = "interior"
BOUNDARY = "boundary"
PERIODIC = "periodic"


@dataclass(frozen=True)
class Facet:
    """ファセット 1 本の情報（参照用のビュー）"""
    vertices: Tuple[int, int]
    plus: int
    minus: Optional[int]
    normal: Tuple[float, float]
    length: float
    kind: str
    wall: str
    shift: Tuple[float, float]


class Mesh:
    """
    三角形メッシュ

    構築後は不変。配列はすべて書き込み禁止にしてある。
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray, name: str = "mesh"):
        """
        頂点と三角形からファセットトポロジーを構築

        Args:
            vertices: (V, 2) 頂点座標
            triangles: (T, 3) 反時計回りの頂点番号
            name: チェックポイント等に記録する識別名
        """
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) == 0 or len(vertices) == 0:
            raise MeshError("空のメッシュです")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("三角形が存在しない頂点を参照しています")

        self.name = name
        self.vertices = vertices
        self.triangles = triangles
        self.periodic_axes: FrozenSet[str] = frozenset()

        self._compute_element_geometry()
        self._build_facets()
        self._freeze()
        logger.debug(f"メッシュ構築: {name} (三角形 {self.num_triangles}, ファセット {self.num_facets})")

    # ------------------------------------------------------------------
    # 構築
    # ------------------------------------------------------------------
    def _compute_element_geometry(self) -> None:
        v = self.vertices[self.triangles]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        self.jacobians = np.stack([e1, e2], axis=-1)
        self.determinants = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(self.determinants <= 0.0):
            bad = int(np.argmin(self.determinants))
            raise MeshError(f"三角形 {bad} の符号付き面積が正ではありません")
        self.inverse_jacobians = np.linalg.inv(self.jacobians)
        self.areas = 0.5 * self.determinants
        edges = np.stack([v[:, 2] - v[:, 1], v[:, 0] - v[:, 2], v[:, 1] - v[:, 0]], axis=1)
        self.element_diameters = np.linalg.norm(edges, axis=2).max(axis=1)
        self.centroids = v.mean(axis=1)

        total = float(self.areas.sum())
        if abs(total - 1.0) > GEOMETRY_TOLERANCE * max(1, len(self.triangles)):
            raise MeshError(f"三角形の面積の合計が 1 ではありません: {total:.15g}")

    def _build_facets(self) -> None:
        num_triangles = len(self.triangles)
        local = self.triangles[:, [[1, 2], [2, 0], [0, 1]]]
        keys = np.sort(local, axis=2).reshape(-1, 2)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("3 つ以上の三角形に共有される辺があります")

        order = np.argsort(inverse, kind="stable")
        starts = np.searchsorted(inverse[order], np.arange(len(counts)))
        plus_flat = order[starts]
        minus_flat = np.where(counts == 2, order[np.minimum(starts + 1, len(order) - 1)], -1)

        self.element_facets = inverse.reshape(num_triangles, 3)
        self.facet_elements = np.column_stack([plus_flat // 3, np.where(minus_flat >= 0, minus_flat // 3, -1)])
        self.facet_local_edges = np.column_stack([plus_flat % 3, np.where(minus_flat >= 0, minus_flat % 3, -1)])
        self.facet_vertices = local.reshape(-1, 2)[plus_flat]
        self.facet_kinds = np.where(counts == 2, INTERIOR, BOUNDARY).astype(object)
        self.facet_shifts = np.zeros((len(counts), 2))
        self._compute_facet_geometry()
        self.facet_walls = self._tag_walls()

    def _compute_facet_geometry(self) -> None:
        a = self.vertices[self.facet_vertices[:, 0]]
        b = self.vertices[self.facet_vertices[:, 1]]
        tangent = b - a
        self.facet_lengths = np.linalg.norm(tangent, axis=1)
        self.facet_normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / self.facet_lengths[:, None]
        self.facet_midpoints = 0.5 * (a + b)

    def _tag_walls(self) -> np.ndarray:
        walls = np.full(len(self.facet_lengths), "", dtype=object)
        boundary = self.facet_kinds == BOUNDARY
        a = self.vertices[self.facet_vertices[:, 0]]
        b = self.vertices[self.facet_vertices[:, 1]]
        tests = {
            "left": (np.abs(a[:, 0]) <= GEOMETRY_TOLERANCE) & (np.abs(b[:, 0]) <= GEOMETRY_TOLERANCE),
            "right": (np.abs(a[:, 0] - 1.0) <= GEOMETRY_TOLERANCE) & (np.abs(b[:, 0] - 1.0) <= GEOMETRY_TOLERANCE),
            "bottom": (np.abs(a[:, 1]) <= GEOMETRY_TOLERANCE) & (np.abs(b[:, 1]) <= GEOMETRY_TOLERANCE),
            "top": (np.abs(a[:, 1] - 1.0) <= GEOMETRY_TOLERANCE) & (np.abs(b[:, 1] - 1.0) <= GEOMETRY_TOLERANCE),
        }
        for wall, mask in tests.items():
            walls[boundary & mask] = wall
        return walls

    def _freeze(self) -> None:
        for value in vars(self).values():
            if isinstance(value, np.ndarray):
                value.flags.writeable = False

    # ------------------------------------------------------------------
    # 問い合わせ
    # ------------------------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @property
    def num_facets(self) -> int:
        return len(self.facet_lengths)

    def interior_facets(self) -> np.ndarray:
        """内部ファセットと周期対ファセットの番号（両側に要素を持つもの）"""
        return np.flatnonzero(self.facet_kinds != BOUNDARY)

    def boundary_facets(self) -> np.ndarray:
        """真の境界ファセットの番号"""
        return np.flatnonzero(self.facet_kinds == BOUNDARY)

    def wall_of_facet(self, facet: int) -> str:
        """境界ファセットの壁名（内部・周期ファセットは空文字）"""
        return str(self.facet_walls[facet])

    @property
    def facets(self) -> List[Facet]:
        result = []
        for f in range(self.num_facets):
            plus, minus = (int(x) for x in self.facet_elements[f])
            result.append(Facet(
                vertices=(int(self.facet_vertices[f, 0]), int(self.facet_vertices[f, 1])),
                plus=plus,
                minus=None if minus < 0 else minus,
                normal=(float(self.facet_normals[f, 0]), float(self.facet_normals[f, 1])),
                length=float(self.facet_lengths[f]),
                kind=str(self.facet_kinds[f]),
                wall=str(self.facet_walls[f]),
                shift=(float(self.facet_shifts[f, 0]), float(self.facet_shifts[f, 1])),
            ))
        return result

    def map_to_physical(self, elements: np.ndarray, reference_points: np.ndarray) -> np.ndarray:
        """参照座標 (..., 2) を要素 elements の物理座標に写す"""
        elements = np.asarray(elements)
        origin = self.vertices[self.triangles[elements, 0]]
        return origin + np.einsum("...ij,...j->...i", self.jacobians[elements], reference_points)

    def map_to_reference(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        """物理座標 (..., 2) を要素 elements の参照座標に写す"""
        elements = np.asarray(elements)
        origin = self.vertices[self.triangles[elements, 0]]
        return np.einsum("...ij,...j->...i", self.inverse_jacobians[elements], points - origin)

    def locate_points(self, points: np.ndarray, tolerance: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
        """
        点を含む要素と参照座標を求める

        重心の k-d 木で候補を絞り、見つからない点だけ全要素を調べる。
        辺上の点は候補のうち最初に見つかった要素に割り当てる。

        Args:
            points: (N, 2) 物理座標
            tolerance: 重心座標の許容誤差

        Returns:
            (要素番号 (N,), 参照座標 (N, 2))

        Raises:
            MeshError: メッシュ外の点がある場合
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        tree = self._centroid_tree()
        k = min(12, self.num_triangles)
        _, candidates = tree.query(points, k=k)
        candidates = np.asarray(candidates).reshape(len(points), k)

        reference = self.map_to_reference(candidates, points[:, None, :])
        barycentric = np.min(np.stack([1.0 - reference[..., 0] - reference[..., 1],
                                       reference[..., 0], reference[..., 1]], axis=-1), axis=-1)
        inside = barycentric >= -tolerance
        found = inside.any(axis=1)
        choice = np.argmax(inside, axis=1)
        elements = candidates[np.arange(len(points)), choice]
        result = reference[np.arange(len(points)), choice]

        for index in np.flatnonzero(~found):
            all_elements = np.arange(self.num_triangles)
            ref = self.map_to_reference(all_elements, points[index][None, :])
            bary = np.minimum(np.minimum(1.0 - ref[:, 0] - ref[:, 1], ref[:, 0]), ref[:, 1])
            best = int(np.argmax(bary))
            if bary[best] < -tolerance:
                logger.error(f"メッシュ外の点: {points[index]}")
                raise MeshError(f"点 ({points[index, 0]:.6g}, {points[index, 1]:.6g}) はメッシュ外です")
            elements[index] = best
            result[index] = ref[best]
        return elements, result

    def _centroid_tree(self) -> cKDTree:
        tree = self.__dict__.get("_tree")
        if tree is None:
            tree = cKDTree(self.centroids)
            self.__dict__["_tree"] = tree
        return tree


def structured_triangulation(n: int) -> Mesh:
    """
    n × n の正方形格子を対角線で分割した構造格子を生成

    頂点番号は j*(n+1)+i（x=i/n, y=j/n）。各正方形は (i,j)-(i+1,j+1) の対角線で
    2 つの三角形に分割する。

    Args:
        n: 1 辺の分割数 (>= 1)

    Returns:
        (n+1)² 頂点、2n² 三角形のメッシュ
    """
    if n < 1:
        raise ValueError(f"分割数 n={n} は 1 以上である必要があります")
    coordinates = np.arange(n + 1) / n
    xx, yy = np.meshgrid(coordinates, coordinates, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return Mesh(vertices, triangles, name=f"structured:{n}")


def _content_lines(stream: TextIO) -> Iterable[Tuple[int, str]]:
    for number, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line


def load_mesh(stream: TextIO, name: str = "mesh") -> Mesh:
    """
    ASCII メッシュファイルを読み込む

    書式: 1 行目 "hdivmesh 1"、頂点数 V、V 行の "x1 x2"、三角形数 T、
    T 行の "i j k"（0 始まり）。空行と "#" 以降は無視する。
    時計回りの三角形は反時計回りに並べ替える。

    Args:
        stream: テキストストリーム
        name: メッシュ識別名

    Returns:
        検証済みのメッシュ

    Raises:
        MeshFormatError: 書式エラー（行番号付き）
        MeshError: 幾何的な検証エラー
    """
    lines = iter(_content_lines(stream))

    def next_line(what: str) -> Tuple[int, str]:
        try:
            return next(lines)
        except StopIteration:
            raise MeshFormatError(f"{what} の前にファイルが終了しました") from None

    def parse_count(what: str) -> int:
        number, text = next_line(what)
        try:
            value = int(text)
        except ValueError:
            raise MeshFormatError(f"{what} が整数ではありません: '{text}'", number) from None
        if value < 1:
            raise MeshFormatError(f"{what} が正ではありません: {value}", number)
        return value

    number, header = next_line("ヘッダー")
    if " ".join(header.split()) != MESH_HEADER:
        raise MeshFormatError(f"ヘッダーが '{MESH_HEADER}' ではありません: '{header}'", number)

    num_vertices = parse_count("頂点数")
    vertices = np.empty((num_vertices, 2))
    for index in range(num_vertices):
        number, text = next_line("頂点座標")
        tokens = text.split()
        if len(tokens) != 2:
            raise MeshFormatError(f"頂点行には 2 つの座標が必要です: '{text}'", number)
        try:
            vertices[index] = [float(t) for t in tokens]
        except ValueError:
            raise MeshFormatError(f"座標を解釈できません: '{text}'", number) from None

    num_triangles = parse_count("三角形数")
    triangles = np.empty((num_triangles, 3), dtype=np.int64)
    reoriented = 0
    for index in range(num_triangles):
        number, text = next_line("三角形")
        tokens = text.split()
        if len(tokens) != 3:
            raise MeshFormatError(f"三角形行には 3 つの頂点番号が必要です: '{text}'", number)
        try:
            tri = [int(t) for t in tokens]
        except ValueError:
            raise MeshFormatError(f"頂点番号を解釈できません: '{text}'", number) from None
        for vertex in tri:
            if not 0 <= vertex < num_vertices:
                raise MeshFormatError(f"頂点番号 {vertex} が範囲外です (頂点数 {num_vertices})", number)
        p0, p1, p2 = vertices[tri]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) <= GEOMETRY_TOLERANCE:
            raise MeshFormatError("面積が 0 の三角形です", number)
        if area < 0.0:
            tri = [tri[0], tri[2], tri[1]]
            reoriented += 1
        triangles[index] = tri

    for number, text in lines:
        raise MeshFormatError(f"余分な行があります: '{text}'", number)

    if reoriented:
        logger.info(f"時計回りの三角形 {reoriented} 個を反時計回りに並べ替えました")
    return Mesh(vertices, triangles, name=name)


def write_mesh(mesh: Mesh, stream: TextIO) -> None:
    """メッシュを load_mesh で再読込できる ASCII 形式で書き出す"""
    stream.write(f"{MESH_HEADER}\n")
    stream.write(f"# {mesh.name}\n")
    stream.write(f"{mesh.num_vertices}\n")
    for x, y in mesh.vertices:
        stream.write(f"{x:.17g} {y:.17g}\n")
    stream.write(f"{mesh.num_triangles}\n")
    for a, b, c in mesh.triangles:
        stream.write(f"{a} {b} {c}\n")


def _match_walls(mesh: Mesh, axis: str) -> List[Tuple[int, int]]:
    first_wall, second_wall = PERIODIC_WALLS[axis]
    coordinate = 1 if axis == "x1" else 0
    first = np.flatnonzero((mesh.facet_kinds == BOUNDARY) & (mesh.facet_walls == first_wall))
    second = np.flatnonzero((mesh.facet_kinds == BOUNDARY) & (mesh.facet_walls == second_wall))

    first = first[np.argsort(mesh.facet_midpoints[first, coordinate], kind="stable")]
    second = second[np.argsort(mesh.facet_midpoints[second, coordinate], kind="stable")]
    second_positions = mesh.facet_midpoints[second, coordinate]

    pairs = []
    used = np.zeros(len(second), dtype=bool)
    for f in first:
        position = mesh.facet_midpoints[f, coordinate]
        index = int(np.searchsorted(second_positions, position - PERIODIC_TOLERANCE))
        if (index >= len(second) or used[index]
                or abs(second_positions[index] - position) > PERIODIC_TOLERANCE
                or abs(mesh.facet_lengths[second[index]] - mesh.facet_lengths[f]) > PERIODIC_TOLERANCE):
            logger.error(f"周期境界の対応付けに失敗: 軸 {axis}, ファセット {f}")
            raise PeriodicIdentificationError(f"{first_wall} 側のファセットに対応する {second_wall} 側のファセットがありません",
                                              mesh.facet_midpoints[f])
        used[index] = True
        pairs.append((int(f), int(second[index])))
    if not used.all():
        unmatched = second[np.flatnonzero(~used)[0]]
        logger.error(f"周期境界の対応付けに失敗: 軸 {axis}, ファセット {unmatched}")
        raise PeriodicIdentificationError(f"{second_wall} 側のファセットに対応する {first_wall} 側のファセットがありません",
                                          mesh.facet_midpoints[unmatched])
    return pairs


def apply_periodic_identification(mesh: Mesh, axes: Iterable[str]) -> Mesh:
    """
    対向する壁の境界ファセットを周期対として結合した新しいメッシュを返す

    結合したファセットの K+ は要素番号の小さい方で、幾何情報（頂点・法線・長さ）は
    K+ 側のものを保持する。既に結合済みの軸は無視するため冪等。

    Args:
        mesh: 元のメッシュ
        axes: "x1"（左右の壁）と "x2"（上下の壁）の部分集合

    Raises:
        PeriodicIdentificationError: 対応するファセットが見つからない場合
    """
    axes = [axis for axis in sorted(set(axes)) if axis not in mesh.periodic_axes]
    for axis in axes:
        if axis not in PERIODIC_WALLS:
            raise ValueError(f"未知の周期軸です: {axis}")
    if not axes:
        return mesh

    result = copy.copy(mesh)
    result.__dict__.pop("_tree", None)
    elements = mesh.facet_elements.copy()
    local_edges = mesh.facet_local_edges.copy()
    vertices = mesh.facet_vertices.copy()
    kinds = mesh.facet_kinds.copy()
    walls = mesh.facet_walls.copy()
    shifts = mesh.facet_shifts.copy()
    normals = mesh.facet_normals.copy()
    lengths = mesh.facet_lengths.copy()
    midpoints = mesh.facet_midpoints.copy()
    removed = np.zeros(mesh.num_facets, dtype=bool)
    redirect = np.arange(mesh.num_facets)

    for axis in axes:
        translation = np.array([1.0, 0.0]) if axis == "x1" else np.array([0.0, 1.0])
        for f, g in _match_walls(mesh, axis):
            keep, drop, shift = f, g, translation
            if elements[g, 0] < elements[f, 0]:
                keep, drop, shift = g, f, -translation
            elements[keep, 1] = elements[drop, 0]
            local_edges[keep, 1] = local_edges[drop, 0]
            kinds[keep] = PERIODIC
            walls[keep] = ""
            shifts[keep] = shift
            removed[drop] = True
            # 削除する側を参照していた要素は残す側を参照する
            redirect[drop] = keep

    renumber = np.cumsum(~removed) - 1
    element_facets = renumber[redirect[mesh.element_facets]]

    keep_mask = ~removed
    result.element_facets = element_facets
    result.facet_elements = elements[keep_mask]
    result.facet_local_edges = local_edges[keep_mask]
    result.facet_vertices = vertices[keep_mask]
    result.facet_kinds = kinds[keep_mask]
    result.facet_walls = walls[keep_mask]
    result.facet_shifts = shifts[keep_mask]
    result.facet_normals = normals[keep_mask]
    result.facet_lengths = lengths[keep_mask]
    result.facet_midpoints = midpoints[keep_mask]
    result.periodic_axes = frozenset(mesh.periodic_axes | set(axes))
    result.name = mesh.name
    result._freeze()
    logger.info(f"周期境界を適用: 軸 {sorted(result.periodic_axes)}, ファセット {mesh.num_facets} -> {result.num_facets}")
    return result


def mesh_from_spec(spec) -> Mesh:
    """
    メッシュ指定を解決

    Args:
        spec: 整数 n または "structured:n"（構造格子）、それ以外はメッシュファイルのパス

    Raises:
        OSError: ファイルを開けない場合
    """
    text = str(spec).strip()
    if text.startswith("structured:"):
        text = text.split(":", 1)[1]
    if text.isdigit():
        return structured_triangulation(int(text))
    with open(text, "r", encoding="utf-8") as stream:
        return load_mesh(stream, name=text)


def mesh_statistics(mesh: Mesh) -> Dict[str, float]:
    """
    メッシュの統計量

    Returns:
        num_triangles, num_facets, h_max, h_min と補助的な件数
    """
    if mesh is None or mesh.num_triangles == 0:
        raise MeshError("空のメッシュです")
    return {
        "num_triangles": mesh.num_triangles,
        "num_facets": mesh.num_facets,
        "h_max": float(mesh.element_diameters.max()),
        "h_min": float(mesh.element_diameters.min()),
        "num_vertices": mesh.num_vertices,
        "num_interior_facets": int(np.sum(mesh.facet_kinds == INTERIOR)),
        "num_periodic_facets": int(np.sum(mesh.facet_kinds == PERIODIC)),
        "num_boundary_facets": int(np.sum(mesh.facet_kinds == BOUNDARY)),
    }
