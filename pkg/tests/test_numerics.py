import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from evanskit.numerics import (StepSizeUnderflow, gauss_legendre, hermitian_sqrt_psd,
                               integrate_linear_ode, lagrange_integrals, lagrange_values,
                               lu_det, lu_slogdet, matrix_exp, quadrature_grid)


def cofactor_det(M):
    n = M.shape[0]
    if n == 1:
        return M[0, 0]
    return sum((-1) ** j * M[0, j] * cofactor_det(np.delete(M[1:], j, axis=1)) for j in range(n))


def random_complex(rng, n):
    return rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))


class TestDeterminant:
    def test_identity(self):
        assert lu_det(np.eye(3)) == 1

    def test_diagonal(self):
        assert lu_det(np.diag([-2.0, -1.0, 1.0])) == 2

    def test_matches_cofactor_expansion(self):
        M = random_complex(np.random.default_rng(42), 4)
        assert abs(lu_det(M) - cofactor_det(M)) < 1e-12 * max(1, abs(cofactor_det(M)))

    def test_singular_gives_zero(self):
        M = np.ones((3, 3))
        assert abs(lu_det(M)) < 1e-14
        assert lu_slogdet(np.zeros((2, 2)))[0] == 0

    def test_triangular_is_exact_product(self):
        T = np.triu(random_complex(np.random.default_rng(1), 5))
        assert lu_det(T) == np.prod(np.diag(T))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_multiplicative(self, n, seed):
        rng = np.random.default_rng(seed)
        M, N = random_complex(rng, n), random_complex(rng, n)
        lhs, rhs = lu_det(M @ N), lu_det(M) * lu_det(N)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(rhs), 1e-300) + 1e-12


class TestHermitianSqrt:
    def test_diagonal(self):
        assert np.allclose(hermitian_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    def test_zero(self):
        assert np.all(hermitian_sqrt_psd(np.zeros((3, 3))) == 0)

    def test_rank_one(self):
        v = np.array([1.0, 1j, 1.0, -1.0])
        v = 2 * v / np.linalg.norm(v)
        H = np.outer(v, v.conj())
        assert np.allclose(hermitian_sqrt_psd(H), H / 2, atol=1e-12)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            hermitian_sqrt_psd(np.diag([1.0, -0.5]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_square_reproduces(self, n, seed):
        B = random_complex(np.random.default_rng(seed), n)
        H = B @ B.conj().T
        S = hermitian_sqrt_psd(H)
        assert np.allclose(S, S.conj().T, atol=1e-12 * np.linalg.norm(H))
        assert np.linalg.norm(S @ S - H) <= 1e-10 * np.linalg.norm(H)


class TestMatrixExp:
    def test_nilpotent_block(self):
        assert np.allclose(matrix_exp(np.array([[0.0, 1.0], [0.0, 0.0]]), 1.0), [[1, 1], [0, 1]])

    def test_diagonal(self):
        x = 0.7
        E = matrix_exp(np.diag([-2.0, -1.0, 1.0]), x)
        assert np.allclose(E, np.diag(np.exp([-2 * x, -x, x])), rtol=1e-14)

    def test_schrodinger_closed_form(self):
        k = 2j
        A = np.array([[0, 1], [-k * k, 0]])
        want = np.array([[np.cos(k), np.sin(k) / k], [-k * np.sin(k), np.cos(k)]])
        assert np.allclose(matrix_exp(A, 1.0), want, rtol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 10_000), st.floats(-1, 1), st.floats(-1, 1))
    def test_group_property(self, n, seed, x, y):
        A = random_complex(np.random.default_rng(seed), n)
        lhs = matrix_exp(A, x) @ matrix_exp(A, y)
        rhs = matrix_exp(A, x + y)
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(1.0, np.linalg.norm(rhs))

    def test_derivative_first_order(self):
        A = random_complex(np.random.default_rng(5), 3)
        x = 0.3
        exact = A @ matrix_exp(A, x)
        errs = [np.linalg.norm((matrix_exp(A, x + h) - matrix_exp(A, x)) / h - exact)
                for h in (1e-3, 1e-4, 1e-5)]
        assert errs[0] > errs[1] > errs[2]
        assert 5 < errs[0] / errs[1] < 20

    def test_overflow_reported(self):
        with pytest.raises(OverflowError):
            matrix_exp(np.eye(2), 1e4)


class TestQuadrature:
    def test_two_point_rule(self):
        g = quadrature_grid(0, 1, 1, 2)
        assert np.allclose(g.nodes, [(1 - 1 / math.sqrt(3)) / 2, (1 + 1 / math.sqrt(3)) / 2])
        assert np.allclose(g.weights, [0.5, 0.5])

    def test_exactness(self):
        g = quadrature_grid(0, 1, 1, 2)
        assert abs(g.integrate(g.nodes ** 3) - 0.25) < 1e-15

    def test_exponential(self):
        exact = 1 - math.exp(-20)
        g = quadrature_grid(0, 20, 40, 4)
        err = exact - g.integrate(np.exp(-g.nodes))
        # composite Gauss remainder h^9 (4!)^4 / (9 (8!)^3) sum_m f^(8)(xi_m), xi_m near panel centres
        h, mids = 0.5, np.arange(40) * 0.5 + 0.25
        remainder = h ** 9 * math.factorial(4) ** 4 / (9 * math.factorial(8) ** 3) * np.exp(-mids).sum()
        assert err > 0 and abs(err / remainder - 1) < 0.05
        assert err < 3e-12
        g5 = quadrature_grid(0, 20, 40, 5)
        assert abs(g5.integrate(np.exp(-g5.nodes)) - exact) < 1e-14

    @pytest.mark.parametrize("p", range(1, 13))
    def test_weights_and_order(self, p):
        g = quadrature_grid(-1.5, 2.0, 3, p)
        assert abs(g.weights.sum() - 3.5) < 1e-12 * 3.5
        assert np.all(np.diff(g.nodes) > 0)
        deg = 2 * p - 1
        exact = (2.0 ** (deg + 1) - (-1.5) ** (deg + 1)) / (deg + 1)
        assert abs(g.integrate(g.nodes ** deg) - exact) < 1e-11 * max(1, abs(exact))

    def test_rejects_bad_points(self):
        with pytest.raises(ValueError):
            quadrature_grid(0, 1, 1, 13)

    def test_lagrange_rows(self):
        p = 7
        s, _ = gauss_legendre(p)
        t = np.linspace(-1, 1, 9)
        # partial integrals of x^4 and values of x^5 are exact for degree < p
        assert np.allclose(lagrange_integrals(p, t) @ s ** 4, (t ** 5 + 1) / 5, atol=1e-14)
        assert np.allclose(lagrange_values(p, t) @ s ** 5, t ** 5, atol=1e-13)


class TestLinearOde:
    def test_zero_coefficient(self):
        Y0 = np.array([[1.0, 2.0], [3.0, 4.0]])
        sol = integrate_linear_ode(lambda x: np.zeros((2, 2)), 0.0, 2.0, Y0)
        assert np.allclose(sol(1.3), Y0, atol=1e-14)

    def test_constant_matches_exponential(self):
        rng = np.random.default_rng(11)
        A = random_complex(rng, 3) * 0.5
        sol = integrate_linear_ode(lambda x: A, 0.0, 3.0, np.eye(3), tol=1e-10)
        for x in rng.uniform(0, 3, 20):
            want = scipy.linalg.expm(x * A)
            assert np.linalg.norm(sol(x) - want) <= 1e-9 * np.linalg.norm(want)

    def test_scalar_closed_form(self):
        sol = integrate_linear_ode(lambda x: np.array([[x]]), 0.5, 2.0, np.eye(1), tol=1e-10)
        for x in (0.7, 1.4, 2.0):
            want = math.exp((x * x - 0.25) / 2)
            assert abs(sol(x)[0, 0] - want) <= 10 * 1e-10 * want

    def test_backward_and_breakpoints(self):
        coeff = lambda x: np.array([[-1.0 if x < 1 else -2.0]])
        sol = integrate_linear_ode(coeff, 0.0, 3.0, np.eye(1), breakpoints=(1.0,))
        assert abs(sol(3.0)[0, 0] - math.exp(-1 - 4)) < 1e-9 * math.exp(-5)
        left, right = sol(1.0 - 1e-12), sol(1.0)
        assert abs(left - right).max() < 1e-10
        back = integrate_linear_ode(lambda x: np.array([[1.0]]), 0.0, -2.0, np.eye(1))
        assert abs(back(-2.0)[0, 0] - math.exp(-2)) < 1e-10

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_underflow_reported(self):
        coeff = lambda x: np.array([[1.0 / (1.0 - x) ** 2]])
        with pytest.raises(StepSizeUnderflow) as info:
            integrate_linear_ode(coeff, 0.0, 2.0, np.eye(1))
        assert 0.5 < info.value.x <= 1.0
