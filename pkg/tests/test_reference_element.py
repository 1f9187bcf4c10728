import math

import numpy as np
import pytest

from hdivflow.services.reference_element import (
    build_rt_basis,
    build_scalar_basis,
    edge_moment_polynomials,
    edge_points,
    edge_quadrature,
    piola_map,
    triangle_quadrature,
)


def monomial_integral(a, b):
    """参照三角形上の ∫ x^a y^b = a! b! / (a+b+2)!"""
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


class TestQuadrature:
    @pytest.mark.parametrize("degree", [0, 1, 2, 5, 9, 14, 20])
    def test_triangle_rule_is_exact(self, degree):
        rule = triangle_quadrature(degree)
        x, y = rule.points[:, 0], rule.points[:, 1]
        for total in range(degree + 1):
            for b in range(total + 1):
                a = total - b
                assert rule.weights @ (x ** a * y ** b) == pytest.approx(monomial_integral(a, b), rel=1e-12, abs=1e-15)

    def test_triangle_weights_sum(self):
        assert triangle_quadrature(7).weights.sum() == pytest.approx(0.5)

    @pytest.mark.parametrize("degree", [1, 4, 11, 20])
    def test_edge_rule_is_exact(self, degree):
        rule = edge_quadrature(degree)
        for m in range(degree + 1):
            assert rule.weights @ rule.points ** m == pytest.approx(1.0 / (m + 1), rel=1e-12)

    @pytest.mark.parametrize("degree", [-1, 21])
    def test_unsupported_degree(self, degree):
        with pytest.raises(ValueError):
            triangle_quadrature(degree)
        with pytest.raises(ValueError):
            edge_quadrature(degree)

    def test_rules_are_cached(self):
        assert triangle_quadrature(6) is triangle_quadrature(6)


class TestEdgeMoments:
    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_orthonormal(self, k):
        rule = edge_quadrature(2 * k)
        q = edge_moment_polynomials(k, rule.points)
        gram = q.T @ (rule.weights[:, None] * q)
        assert np.allclose(gram, np.eye(k + 1), atol=1e-12)

    def test_reversal_parity(self):
        s = np.linspace(0.0, 1.0, 7)
        forward = edge_moment_polynomials(3, s)
        backward = edge_moment_polynomials(3, 1.0 - s)
        assert np.allclose(backward, forward * (-1.0) ** np.arange(4))

    def test_edge_points(self):
        assert np.allclose(edge_points(0, [0.0, 1.0]), [[1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(edge_points(0, [0.0], flip=True), [[0.0, 1.0]])


class TestRaviartThomasBasis:
    @pytest.mark.parametrize("k, count", [(1, 8), (2, 15), (3, 24), (4, 35)])
    def test_dimension(self, k, count):
        basis = build_rt_basis(k)
        assert basis.num_dofs == count
        assert basis.num_interior_dofs == k * (k + 1)

    @pytest.mark.parametrize("k", [0, 5])
    def test_unsupported_degree(self, k):
        with pytest.raises(ValueError):
            build_rt_basis(k)

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_duality(self, k):
        basis = build_rt_basis(k)
        functionals = basis.apply_functionals(basis.values)
        assert np.allclose(functionals, np.eye(basis.num_dofs), atol=1e-9)

    @pytest.mark.parametrize("k", [1, 3])
    def test_divergence_matches_gradient_trace(self, k, rng):
        basis = build_rt_basis(k)
        points = rng.dirichlet(np.ones(3), size=10)[:, 1:]
        table = basis.tabulate(points)
        assert np.allclose(table["divergence"], np.trace(table["gradients"], axis1=-2, axis2=-1))

    def test_edge_dofs_do_not_see_other_edges(self):
        basis = build_rt_basis(2)
        rule = edge_quadrature(6)
        for edge in range(3):
            points = edge_points(edge, rule.points)
            start, end = points[0], points[-1]
            tangent = end - start
            normal = np.array([tangent[1], -tangent[0]])
            flux = basis.values(points) @ normal
            others = [j for j in range(basis.num_dofs) if j not in basis.edge_dofs(edge)]
            assert np.allclose(flux[:, others], 0.0, atol=1e-10)

    def test_scalar_basis_is_orthonormal(self):
        basis = build_scalar_basis(3)
        rule = triangle_quadrature(6)
        values = basis.values(rule.points)
        assert np.allclose(values.T @ (rule.weights[:, None] * values), np.eye(10), atol=1e-10)


class TestPiolaMap:
    JACOBIAN = np.array([[2.0, 0.5], [0.0, 1.0]])

    def test_constant_divergence(self):
        mapped = piola_map(self.JACOBIAN, ref_divergence=np.full(4, 3.0))
        assert np.allclose(mapped["divergence"], 1.5)

    def test_edge_flux_is_preserved(self):
        # 参照辺 2（(0,0) -> (1,0)）上の一定場 (0, −1) の流束
        J = self.JACOBIAN
        mapped = piola_map(J, ref_values=np.array([0.0, -1.0]))["values"]
        a, b = np.zeros(2), J @ np.array([1.0, 0.0])
        tangent = b - a
        scaled_normal = np.array([tangent[1], -tangent[0]])
        assert mapped @ scaled_normal == pytest.approx(1.0)

    def test_rejects_inverted_element(self):
        with pytest.raises(ValueError):
            piola_map(np.array([[0.0, 1.0], [1.0, 0.0]]), ref_values=np.zeros(2))
