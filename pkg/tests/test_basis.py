import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowbench import basis


def monomial_integral(k: int) -> float:
    # exact integral of x^k over [-1, 1]
    return 0.0 if k % 2 else 2.0 / (k + 1)


class TestGaussLobatto:
    def test_n4_matches_monomial_oracle(self):
        x, w = basis.gauss_lobatto_nodes(4)
        # degree of exactness 2n-3 = 5
        for k in range(6):
            assert w @ x**k == pytest.approx(monomial_integral(k), abs=1e-14)
        assert x[0] == -1.0 and x[-1] == 1.0
        # known closed form for n=4: interior nodes at +-1/sqrt(5)
        assert np.allclose(x[1:3], [-1 / np.sqrt(5), 1 / np.sqrt(5)], atol=1e-14)
        assert np.allclose(w, [1 / 6, 5 / 6, 5 / 6, 1 / 6], atol=1e-14)

    @pytest.mark.parametrize("n", [2, 3, 5, 8, 13, 21])
    def test_exactness_and_structure(self, n):
        x, w = basis.gauss_lobatto_nodes(n)
        assert x[0] == -1.0 and x[-1] == 1.0
        assert np.all(np.diff(x) > 0)
        assert np.allclose(x, -x[::-1], atol=0)
        assert np.all(w > 0)
        assert w @ np.ones(n) == pytest.approx(2.0, abs=1e-14)
        for k in range(2 * n - 2):
            assert w @ x**k == pytest.approx(monomial_integral(k), abs=1e-13)

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            basis.gauss_lobatto_nodes(1)


class TestGaussLegendre:
    @pytest.mark.parametrize("n", [1, 2, 4, 9, 16])
    def test_exactness(self, n):
        x, w = basis.gauss_legendre_rule(n)
        for k in range(2 * n):
            assert w @ x**k == pytest.approx(monomial_integral(k), abs=1e-13)

    def test_interior_and_ordered(self):
        x, _ = basis.gauss_legendre_rule(7)
        assert np.all(np.diff(x) > 0)
        assert x[0] > -1.0 and x[-1] < 1.0


class TestEvalMatrices:
    def test_partition_of_unity_and_derivative(self):
        b = basis.make_basis(5)
        ones = b.B @ np.ones(6)
        zeros = b.D @ np.ones(6)
        assert np.allclose(ones, 1.0, atol=1e-13)
        assert np.allclose(zeros, 0.0, atol=1e-12)

    @pytest.mark.parametrize("p", [1, 2, 4, 7, 11])
    def test_reproduces_polynomials(self, p):
        # oracle: interpolation of x^k is exact for k <= p, so B applied to
        # nodal values of x^k must give x^k at the quadrature points
        b = basis.make_basis(p)
        for k in range(p + 1):
            vals = b.nodes**k
            assert np.allclose(b.B @ vals, b.quad.points**k, atol=1e-12)
            dk = k * b.quad.points ** (k - 1) if k > 0 else np.zeros(b.quad.n)
            assert np.allclose(b.D @ vals, dk, atol=1e-11)

    def test_collocated_rule_gives_identity(self):
        b = basis.make_basis(4, n_q=5, quad_kind=basis.GAUSS_LOBATTO)
        assert np.allclose(b.B, np.eye(5), atol=0)

    def test_d_equals_b_times_nodal_differentiation(self):
        b = basis.make_basis(7)
        Dn = basis.nodal_differentiation_matrix(b.nodes)
        assert np.allclose(b.D, b.B @ Dn, atol=1e-12)

    def test_default_rule_size(self):
        b = basis.make_basis(6)
        assert b.quad.n == 8
        assert b.quad.kind == basis.GAUSS_LEGENDRE

    @settings(max_examples=25, deadline=None)
    @given(p=st.integers(min_value=1, max_value=12), nq=st.integers(min_value=1, max_value=16))
    def test_row_sums_property(self, p, nq):
        # partition of unity holds for any degree/rule combination
        b = basis.make_basis(p, n_q=nq)
        assert np.allclose(b.B.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(b.D.sum(axis=1), 0.0, atol=1e-11)

    def test_nodal_weights_are_lobatto(self):
        b = basis.make_basis(3)
        _, w = basis.gauss_lobatto_nodes(4)
        assert np.allclose(b.node_weights, w, atol=0)
