"""参照三角形上の有限要素モジュール

Raviart–Thomas (RT_k) ベクトル基底、不連続 P_k スカラー基底、求積則、
および参照要素から物理要素への Piola 変換を提供する。

参照三角形は頂点 (0,0), (1,0), (0,1)。辺 i は頂点 i の対辺で、
頂点 (i+1)%3 から (i+2)%3 へ向かう（反時計回り）。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial import legendre

from hdivflow.config import Config
from hdivflow.services.cache import reference_cache

logger = logging.getLogger(__name__)

MAX_QUADRATURE_DEGREE = 20

REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
EDGE_VERTICES = ((1, 2), (2, 0), (0, 1))


def _edge_geometry(edge: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """参照辺の始点・終点と長さ付き外向き法線 (t_y, -t_x) を返す"""
    start = REFERENCE_VERTICES[EDGE_VERTICES[edge][0]]
    end = REFERENCE_VERTICES[EDGE_VERTICES[edge][1]]
    tangent = end - start
    return start, end, np.array([tangent[1], -tangent[0]])


@dataclass(frozen=True)
class QuadratureRule:
    """求積則（三角形: 参照座標 (n, 2)、辺: [0,1] 上のパラメータ (n,)）"""
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def num_points(self) -> int:
        return len(self.weights)


def _check_degree(degree: int) -> None:
    if not 0 <= degree <= MAX_QUADRATURE_DEGREE:
        raise ValueError(f"求積次数 {degree} は未対応です (0〜{MAX_QUADRATURE_DEGREE})")


def _gauss_01(n: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = legendre.leggauss(n)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def triangle_quadrature(degree: int) -> QuadratureRule:
    """
    参照三角形上の求積則を取得

    次数 1 以下は重心公式、それ以上は Duffy 変換した Gauss–Legendre 積。

    Args:
        degree: 厳密に積分する多項式の次数 (0〜20)

    Returns:
        重みの和が 1/2 の求積則
    """
    _check_degree(degree)

    def build() -> QuadratureRule:
        if degree <= 1:
            return QuadratureRule(np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]), degree)
        n = int(math.ceil((degree + 2) / 2))
        u, wu = _gauss_01(n)
        v, wv = _gauss_01(n)
        uu, vv = np.meshgrid(u, v, indexing="ij")
        ww = np.outer(wu, wv) * (1.0 - vv)
        points = np.column_stack([(uu * (1.0 - vv)).ravel(), vv.ravel()])
        return QuadratureRule(points, ww.ravel(), degree)

    return reference_cache.get_or_build(("triangle_quadrature", degree), build)


def edge_quadrature(degree: int) -> QuadratureRule:
    """[0,1] 上の Gauss–Legendre 求積則を取得（重みの和は 1）"""
    _check_degree(degree)

    def build() -> QuadratureRule:
        n = max(1, int(math.ceil((degree + 1) / 2)))
        s, w = _gauss_01(n)
        return QuadratureRule(s, w, degree)

    return reference_cache.get_or_build(("edge_quadrature", degree), build)


def edge_moment_polynomials(k: int, s: np.ndarray) -> np.ndarray:
    """
    辺上の正規直交 Legendre 多項式 sqrt(2j+1) P_j(2s-1), j = 0..k

    向きを反転すると q_j(1-s) = (-1)^j q_j(s) となる。

    Returns:
        形状 (..., k+1) の値
    """
    s = np.asarray(s, dtype=float)
    values = np.empty(s.shape + (k + 1,))
    for j in range(k + 1):
        coefficients = np.zeros(j + 1)
        coefficients[j] = 1.0
        values[..., j] = math.sqrt(2 * j + 1) * legendre.legval(2.0 * s - 1.0, coefficients)
    return values


def _scalar_exponents(degree: int) -> List[Tuple[int, int]]:
    return [(d - b, b) for d in range(degree + 1) for b in range(d + 1)]


def _monomials(points: np.ndarray, exponents: List[Tuple[int, int]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """単項式 x^a y^b の値と x, y 微分を返す（各形状 (..., m)）"""
    x = points[..., 0]
    y = points[..., 1]
    shape = x.shape + (len(exponents),)
    values = np.empty(shape)
    dx = np.zeros(shape)
    dy = np.zeros(shape)
    for m, (a, b) in enumerate(exponents):
        values[..., m] = x ** a * y ** b
        if a > 0:
            dx[..., m] = a * x ** (a - 1) * y ** b
        if b > 0:
            dy[..., m] = b * x ** a * y ** (b - 1)
    return values, dx, dy


class ReferenceScalarBasis:
    """参照三角形上で正規直交な P_l 基底"""

    def __init__(self, degree: int):
        if degree < 0:
            raise ValueError(f"スカラー基底の次数 {degree} が負です")
        self.degree = degree
        self.exponents = _scalar_exponents(degree)
        self.num_dofs = (degree + 1) * (degree + 2) // 2
        rule = triangle_quadrature(min(2 * degree, MAX_QUADRATURE_DEGREE))
        values, _, _ = _monomials(rule.points, self.exponents)
        gram = values.T @ (rule.weights[:, None] * values)
        lower = np.linalg.cholesky(gram)
        # 行 i が基底関数 i の単項式係数
        self.coefficients = np.linalg.inv(lower)

    def values(self, points: np.ndarray) -> np.ndarray:
        """基底関数の値 (..., n)"""
        mono, _, _ = _monomials(np.asarray(points, dtype=float), self.exponents)
        return mono @ self.coefficients.T

    def gradients(self, points: np.ndarray) -> np.ndarray:
        """基底関数の参照勾配 (..., n, 2)"""
        _, dx, dy = _monomials(np.asarray(points, dtype=float), self.exponents)
        return np.stack([dx @ self.coefficients.T, dy @ self.coefficients.T], axis=-1)


def build_scalar_basis(degree: int) -> ReferenceScalarBasis:
    """正規直交スカラー基底を取得（キャッシュ付き）"""
    return reference_cache.get_or_build(("scalar_basis", degree), lambda: ReferenceScalarBasis(degree))


class ReferenceRTBasis:
    """
    参照三角形上の RT_k = P_k^2 ⊕ x P̃_k 基底

    自由度の並び:
        辺 0, 1, 2 の法線モーメント（各 k+1 個、正規直交 Legendre 多項式に対して）
        内部モーメント（P_{k-1}^2 の正規直交基底に対して k(k+1) 個、成分 x1 が先）
    """

    def __init__(self, k: int):
        if not 1 <= k <= Config.MAX_DEGREE:
            raise ValueError(f"RT 次数 k={k} は未対応です (1〜{Config.MAX_DEGREE})")
        self.degree = k
        self.num_dofs = (k + 1) * (k + 3)
        self.num_edge_dofs = k + 1
        self.num_interior_dofs = k * (k + 1)
        self.interior_basis = build_scalar_basis(k - 1)

        # ベクトル単項式: e_c x^a y^b (a+b <= k) と (x, y) x^a y^b (a+b = k)
        self._terms: List[List[Tuple[int, int, int]]] = []
        for component in (0, 1):
            for a, b in _scalar_exponents(k):
                self._terms.append([(component, a, b)])
        for b in range(k + 1):
            a = k - b
            self._terms.append([(0, a + 1, b), (1, a, b + 1)])
        assert len(self._terms) == self.num_dofs

        exponents = sorted({(a, b) for terms in self._terms for _, a, b in terms})
        self._exponent_index = {e: i for i, e in enumerate(exponents)}
        self._exponents = exponents

        duality = self.apply_functionals(self._monomial_values)
        self.coefficients = np.linalg.solve(duality, np.eye(self.num_dofs))
        logger.debug(f"RT{k} 参照基底を構築: 自由度 {self.num_dofs}, 条件数 {np.linalg.cond(duality):.3e}")

    def _monomial_tables(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        mono, dx, dy = _monomials(points, self._exponents)
        shape = mono.shape[:-1] + (len(self._terms), 2)
        values = np.zeros(shape)
        gradients = np.zeros(shape + (2,))
        for m, terms in enumerate(self._terms):
            for component, a, b in terms:
                e = self._exponent_index[(a, b)]
                values[..., m, component] += mono[..., e]
                gradients[..., m, component, 0] += dx[..., e]
                gradients[..., m, component, 1] += dy[..., e]
        return values, gradients, np.trace(gradients, axis1=-2, axis2=-1)

    def _monomial_values(self, points: np.ndarray) -> np.ndarray:
        return self._monomial_tables(points)[0]

    def apply_functionals(self, function) -> np.ndarray:
        """
        参照要素上のベクトル関数に自由度汎関数を適用

        Args:
            function: 参照点 (..., 2) -> 値 (..., [m,] 2) の関数

        Returns:
            形状 (num_dofs, [m]) の汎関数値
        """
        k = self.degree
        edge_rule = edge_quadrature(2 * k + 2)
        q = edge_moment_polynomials(k, edge_rule.points)
        rows = []
        for edge in range(3):
            start, end, scaled_normal = _edge_geometry(edge)
            points = start + edge_rule.points[:, None] * (end - start)
            values = np.asarray(function(points))
            normal = values @ scaled_normal
            weighted = edge_rule.weights.reshape((-1,) + (1,) * (normal.ndim - 1)) * normal
            rows.append(np.tensordot(q, weighted, axes=(0, 0)))
        rule = triangle_quadrature(2 * k + 2)
        p = self.interior_basis.values(rule.points)
        values = np.asarray(function(rule.points))
        for component in (0, 1):
            weighted = rule.weights.reshape((-1,) + (1,) * (values.ndim - 2)) * values[..., component]
            rows.append(np.tensordot(p, weighted, axes=(0, 0)))
        return np.concatenate(rows, axis=0)

    def values(self, points: np.ndarray) -> np.ndarray:
        """形状関数の値 (..., num_dofs, 2)"""
        mono = self._monomial_tables(np.asarray(points, dtype=float))[0]
        return np.einsum("...mc,mj->...jc", mono, self.coefficients)

    def gradients(self, points: np.ndarray) -> np.ndarray:
        """形状関数の参照勾配 (..., num_dofs, 2, 2)、[i, j] = d v_i / d x_j"""
        grad = self._monomial_tables(np.asarray(points, dtype=float))[1]
        return np.einsum("...mcd,mj->...jcd", grad, self.coefficients)

    def divergence(self, points: np.ndarray) -> np.ndarray:
        """形状関数の参照発散 (..., num_dofs)"""
        div = self._monomial_tables(np.asarray(points, dtype=float))[2]
        return div @ self.coefficients

    def tabulate(self, points: np.ndarray) -> Dict[str, np.ndarray]:
        """値・勾配・発散をまとめて評価"""
        mono, grad, div = self._monomial_tables(np.asarray(points, dtype=float))
        return {
            "values": np.einsum("...mc,mj->...jc", mono, self.coefficients),
            "gradients": np.einsum("...mcd,mj->...jcd", grad, self.coefficients),
            "divergence": div @ self.coefficients,
        }

    def edge_dofs(self, edge: int) -> range:
        """指定した辺の自由度番号"""
        return range(edge * self.num_edge_dofs, (edge + 1) * self.num_edge_dofs)


def build_rt_basis(k: int) -> ReferenceRTBasis:
    """RT_k 参照基底を取得（キャッシュ付き）"""
    if not 1 <= k <= Config.MAX_DEGREE:
        raise ValueError(f"RT 次数 k={k} は未対応です (1〜{Config.MAX_DEGREE})")
    return reference_cache.get_or_build(("rt_basis", k), lambda: ReferenceRTBasis(k))


def edge_points(edge: int, s: np.ndarray, flip: bool = False) -> np.ndarray:
    """
    参照辺上のパラメータ s を参照座標に写す

    Args:
        edge: 参照辺番号
        s: [0,1] 上のパラメータ
        flip: True の場合は終点から始点へ向かう
    """
    start, end, _ = _edge_geometry(edge)
    s = np.asarray(s, dtype=float)
    if flip:
        s = 1.0 - s
    return start + s[..., None] * (end - start)


def piola_map(jacobian: np.ndarray,
              ref_values: Optional[np.ndarray] = None,
              ref_divergence: Optional[np.ndarray] = None,
              ref_gradients: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    反変 Piola 変換で参照値を物理値に写す

    v = J v̂ / det J,  div v = div̂ v̂ / det J,  ∇v = J ∇̂v̂ J^{-1} / det J。
    法線成分は辺長比 / det J 倍になり、辺上の v·n ds は変換で不変。

    Args:
        jacobian: (2, 2) または要素ごとの (E, 2, 2)
        ref_values: (E, ..., 2)（単一要素なら (..., 2)）
        ref_divergence: (E, ...)
        ref_gradients: (E, ..., 2, 2)

    Returns:
        "values", "divergence", "gradients" のうち与えたものの物理値
    """
    J = np.asarray(jacobian, dtype=float)
    single = J.ndim == 2
    if single:
        J = J[None]
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 0.0):
        raise ValueError("ヤコビアンの行列式が正ではありません（退化または裏返った要素）")

    def lift(array):
        array = np.asarray(array, dtype=float)
        return array[None] if single else array

    def scale(array):
        return det.reshape((-1,) + (1,) * (array.ndim - 1))

    result = {}
    if ref_values is not None:
        v = lift(ref_values)
        mapped = np.einsum("eij,e...j->e...i", J, v)
        result["values"] = mapped / scale(mapped)
    if ref_divergence is not None:
        d = lift(ref_divergence)
        result["divergence"] = d / scale(d)
    if ref_gradients is not None:
        g = lift(ref_gradients)
        inverse = np.linalg.inv(J)
        mapped = np.einsum("eij,e...jk,ekl->e...il", J, g, inverse)
        result["gradients"] = mapped / scale(mapped)
    if single:
        result = {key: value[0] for key, value in result.items()}
    return result
