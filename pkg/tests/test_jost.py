import math

import numpy as np
import pytest
import scipy.linalg

from evanskit.jost import (ConvergenceFailure, HypothesisViolation, SolverSettings,
                           perturbed_range_projection, solution_exponents, solve_jost_mixed,
                           solve_jost_volterra, solve_jost_weighted, truncate_perturbation)
from evanskit.system import ProblemDefinition, compact, dichotomy_projection, spectral_splitting

from conftest import make_three_mode, make_sech2_system, make_staircase

Q_EX = np.diag([1.0, 1.0, 0.0])


@pytest.fixture(scope="module")
def staircase():
    pb = make_staircase()
    return pb, spectral_splitting(pb.A)


def column_residual(Y, B):
    """Relative part of the columns of Y outside the column span of B."""
    U, s, _ = np.linalg.svd(B)
    U = U[:, : int(np.sum(s > 1e-10 * s[0]))]
    return np.linalg.norm(Y - U @ (U.conj().T @ Y)) / np.linalg.norm(Y)


class TestVolterra:
    def test_zero_perturbation(self, zero_problem):
        sol = solve_jost_volterra(zero_problem, Q_EX)
        assert sol.iterations == 1 and sol.converged
        xs = np.array([0.0, 0.7, 3.0])
        want = np.exp(np.array([-2.0, -1.0, 1.0])[None, :] * xs[:, None])[:, None, :] * Q_EX
        assert np.allclose(sol(xs), want, atol=1e-13)

    @pytest.mark.parametrize("n", [2.0, 5.0, 10.0])
    def test_example_truncated(self, n):
        sol = solve_jost_volterra(truncate_perturbation(make_three_mode(), n), Q_EX)
        want = np.array([[1, -math.sin(n), 0], [0, 1, 0], [0, 0, 0]])
        assert np.allclose(sol.initial, want, atol=1e-10)

    def test_square_well_outside_support(self):
        k = 1.5j
        A = np.array([[0, 1], [-k * k, 0]])
        V = lambda xs: np.where(np.abs(np.asarray(xs)) <= 1.0, -1.0, 0.0)

        def R(xs):
            out = np.zeros((np.size(xs), 2, 2), dtype=complex)
            out[:, 1, 0] = V(xs)
            return out

        pb = ProblemDefinition(2, A, R, compact(1.0), "well", (-1.0, 1.0))
        Q = dichotomy_projection(spectral_splitting(A))
        sol = solve_jost_volterra(pb, Q)
        for x in (1.0, 2.5, 4.0):
            assert np.allclose(sol(x), scipy.linalg.expm(x * A) @ Q, atol=1e-12)
        minus = solve_jost_volterra(pb, Q, side="minus")
        for x in (-1.0, -3.0):
            assert np.allclose(minus(x), scipy.linalg.expm(x * A) @ (np.eye(2) - Q), atol=1e-12)

    def test_quadrature_independence(self, staircase):
        pb, sp = staircase
        Q = sp.projections[0] + sp.projections[1]
        a = solve_jost_volterra(pb, Q, settings=SolverSettings(points_per_panel=8))
        b = solve_jost_volterra(pb, Q, settings=SolverSettings(panel_width=0.25))
        assert np.abs(a.initial - b.initial).max() < 10 * 1e-12 * 2

    def test_minus_side(self, staircase):
        pb, sp = staircase
        Q = sp.projections[0] + sp.projections[1]
        sol = solve_jost_volterra(pb, Q, side="minus")
        P = np.eye(4) - Q
        assert np.allclose(sol.initial @ P, sol.initial, atol=1e-9)
        assert sol.ode_residual(pb, [-0.8, -2.0, -4.0]) < 1e-7
        assert sol.defect_ratio() >= 10

    def test_decay_hypothesis_checked(self):
        with pytest.raises(HypothesisViolation):
            solve_jost_volterra(make_sech2_system(), np.array([[0.5, -0.25], [-1, 0.5]]))

    def test_nonconvergence_reported(self, staircase):
        pb, sp = staircase
        with pytest.raises(ConvergenceFailure) as err:
            solve_jost_volterra(pb, sp.projections[0], settings=SolverSettings(max_iterations=2))
        assert err.value.condition == "picard"


class TestWeighted:
    def test_zero_gives_free_solution(self, zero_problem):
        sol = solve_jost_weighted(zero_problem, Q_EX)
        assert np.allclose(sol.initial, Q_EX) and sol.iterations == 1

    def test_sech2_first_column(self):
        k = 2j
        pb = make_sech2_system(k)
        Q = dichotomy_projection(spectral_splitting(pb.A))
        sol = solve_jost_weighted(pb, Q)
        # f_+(k, x) = e^{ikx}(k + i tanh x)/(k + i) is the decaying solution
        y = sol.initial @ np.array([1.0, 0.0])
        f0 = k / (k + 1j)
        fp0 = (1j * k * k + 1j) / (k + 1j)
        ratio = y[1] / y[0]
        assert abs(ratio - fp0 / f0) < 1e-10

    def test_example_violates_gap(self):
        with pytest.raises(HypothesisViolation) as err:
            solve_jost_weighted(make_three_mode(), Q_EX)
        assert err.value.condition == "exponential_gap"

    def test_weight_monotonicity(self, zero_problem):
        with pytest.raises(ValueError):
            solve_jost_weighted(zero_problem, Q_EX, weight=lambda x: np.exp(-np.asarray(x)))


class TestMixed:
    def test_zero(self, zero_problem):
        sp = spectral_splitting(zero_problem.A)
        for j in (1, 2):
            sol = solve_jost_mixed(zero_problem, sp, j)
            assert np.allclose(sol.initial, sp.projections[j - 1]) and sol.iterations == 1

    def test_example_second_mode_converges(self):
        ex = make_three_mode()
        sol = solve_jost_mixed(ex, spectral_splitting(ex.A), 2)
        assert sol.converged
        assert np.allclose(sol.initial @ np.diag([0, 1.0, 0]), sol.initial, atol=1e-12)
        assert abs(sol.initial[1, 1] - 1) < 1e-10

    def test_sech2_agrees_with_weighted(self):
        pb = make_sech2_system()
        sp = spectral_splitting(pb.A)
        a = solve_jost_mixed(pb, sp, 1)
        b = solve_jost_weighted(pb, dichotomy_projection(sp))
        assert np.abs(a.initial - b.initial).max() < 1e-8

    def test_side_checks(self, staircase):
        pb, sp = staircase
        with pytest.raises(ValueError):
            solve_jost_mixed(pb, sp, 3, side="plus")
        with pytest.raises(ValueError):
            solve_jost_mixed(pb, sp, 2, side="minus")

    @pytest.mark.parametrize("side,j", [("plus", 1), ("plus", 2), ("minus", 3), ("minus", 4)])
    def test_solution_properties(self, staircase, side, j):
        pb, sp = staircase
        sol = solve_jost_mixed(pb, sp, j, side=side, settings=SolverSettings(panel_width=0.25))
        Qj = sp.projections[j - 1]
        assert np.allclose(sol.initial @ Qj, sol.initial, atol=1e-9)
        sign = 1 if side == "plus" else -1
        assert sol.ode_residual(pb, [sign * x for x in (0.3, 0.9, 2.0, 5.0)]) < 1e-7
        assert sol.defect_ratio() >= 10

    def test_range_filtration(self, staircase):
        pb, sp = staircase
        P1 = solve_jost_volterra(pb, sp.projections[0]).initial
        P12 = solve_jost_volterra(pb, sp.projections[0] + sp.projections[1]).initial
        y1 = solve_jost_mixed(pb, sp, 1).initial
        y2 = solve_jost_mixed(pb, sp, 2).initial
        assert column_residual(y1, P1) < 1e-6
        assert column_residual(y2, P12) < 1e-6
        assert column_residual(y2, P1) > 1e-2

    def test_lower_mode_uniqueness(self, staircase):
        pb, sp = staircase
        P1 = solve_jost_volterra(pb, sp.projections[0]).initial
        a = solve_jost_mixed(pb, sp, 2, settings=SolverSettings(tau=0.0)).initial
        b = solve_jost_mixed(pb, sp, 2, settings=SolverSettings(tau=3.0)).initial
        assert np.abs(a - b).max() > 1e-3
        assert column_residual(a - b, P1) < 1e-6

    @pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
    def test_example_tau_dependence(self, tau):
        ex = make_three_mode()
        sol = solve_jost_mixed(ex, spectral_splitting(ex.A), 2, settings=SolverSettings(tau=tau))
        assert abs(sol.initial[0, 1] + math.sin(sol.tau)) < 1e-9


class TestTruncation:
    def test_larger_than_support(self):
        pb = ProblemDefinition(2, np.diag([-1.0, 1.0]),
                               lambda xs: np.ones((np.size(xs), 2, 2)), compact(1.0))
        assert truncate_perturbation(pb, 3.0) is pb

    def test_example_vanishes_beyond(self):
        tr = truncate_perturbation(make_three_mode(), 2.0)
        assert np.all(tr.R(np.array([2.01, 3.0, 10.0])) == 0)
        assert tr.R(np.array([1.5]))[0, 0, 1] == pytest.approx(math.exp(-1.5) * math.cos(1.5))

    def test_monotone_mass(self):
        ex = make_three_mode()
        xs = np.linspace(0, 40, 40001)
        masses = []
        for n in (1.0, 2.0, 5.0, 10.0):
            Rn = np.linalg.norm(truncate_perturbation(ex, n).R(xs), axis=(1, 2))
            masses.append(np.trapezoid(Rn, xs))
        full = np.trapezoid(np.linalg.norm(ex.R(xs), axis=(1, 2)), xs)
        assert all(a < b for a, b in zip(masses, masses[1:]))
        assert masses[-1] < full and full - masses[-1] < 1e-4

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            truncate_perturbation(make_three_mode(), 0.0)


class TestRangeProjection:
    def test_zero_gives_q(self, zero_problem):
        sp = spectral_splitting(zero_problem.A)
        sols = [solve_jost_mixed(zero_problem, sp, j) for j in (1, 2)]
        assert np.allclose(perturbed_range_projection(sols, Q_EX), Q_EX)

    @pytest.mark.parametrize("n", [2.0, 5.0])
    def test_example_rank(self, n):
        tr = truncate_perturbation(make_three_mode(), n)
        sp = spectral_splitting(tr.A)
        sols = [solve_jost_mixed(tr, sp, j) for j in (1, 2)]
        P = perturbed_range_projection(sols, Q_EX)
        assert np.linalg.matrix_rank(P, tol=1e-8) == 2
        assert np.allclose(P @ P, P, atol=1e-9)
        assert np.allclose(P @ (np.eye(3) - Q_EX), 0, atol=1e-12)

    def test_sech2_rank_and_rate(self):
        pb = make_sech2_system()
        sp = spectral_splitting(pb.A)
        Q = dichotomy_projection(sp)
        sol = solve_jost_mixed(pb, sp, 1, settings=SolverSettings(X=20.0))
        P = perturbed_range_projection([sol], Q)
        assert np.linalg.matrix_rank(P, tol=1e-8) == 1
        upper, lower = solution_exponents(sol, (5.0, 20.0))
        assert abs(upper + 2) < 5e-2 and abs(lower + 2) < 5e-2

    def test_rank_deficiency(self, zero_problem):
        sp = spectral_splitting(zero_problem.A)
        sols = [solve_jost_mixed(zero_problem, sp, 1)]
        from evanskit.jost import RankDeficiency
        with pytest.raises(RankDeficiency):
            perturbed_range_projection(sols, Q_EX)
