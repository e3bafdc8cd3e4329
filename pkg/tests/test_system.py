import math
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from evanskit.system import (DegenerateDichotomy, NoDichotomy, ProblemDefinition, Propagator,
                             Support, compact, dichotomy_projection, estimate_bohl_exponents,
                             exponential, factorize_perturbation, groups_of, polynomial,
                             spectral_splitting, suggest_truncation, validate_decay)

from conftest import make_sech2_system, schrodinger_A


def constant_R(M):
    M = np.asarray(M, dtype=complex)
    return lambda xs: np.broadcast_to(M, (np.size(xs),) + M.shape).copy()


class TestSplitting:
    def test_diagonal_three_modes(self):
        sp = spectral_splitting(np.diag([-2.0, -1.0, 1.0]))
        assert sp.count == 3 and sp.k0 == 2
        for j, want in enumerate(np.eye(3)):
            assert np.allclose(sp.projections[j], np.diag(want), atol=1e-14)
        assert sp.lower == sp.upper == (-2.0, -1.0, 1.0)
        assert sp.jordan_degrees == (0, 0, 0)

    def test_schrodinger_projection(self):
        sp = spectral_splitting(schrodinger_A(2j))
        assert sp.k0 == 1 and np.allclose(sp.lower, (-2, 2))
        assert np.allclose(sp.projections[0], [[0.5, -0.25], [-1, 0.5]], atol=1e-12)
        assert np.allclose(dichotomy_projection(sp), [[0.5, -0.25], [-1, 0.5]], atol=1e-12)

    def test_jordan_block(self):
        sp = spectral_splitting(np.array([[-1.0, 1.0], [0.0, -1.0]]))
        assert sp.count == 1
        assert np.allclose(sp.projections[0], np.eye(2), atol=1e-10)
        assert sp.lower == (-1.0,) and sp.jordan_degrees == (1,)

    def test_dichotomy_projection_example(self):
        sp = spectral_splitting(np.diag([-2.0, -1.0, 1.0]))
        assert np.allclose(dichotomy_projection(sp), np.diag([1, 1, 0]))

    def test_all_stable_warns(self):
        sp = spectral_splitting(np.diag([-2.0, -1.0]))
        with pytest.warns(DegenerateDichotomy):
            Q = dichotomy_projection(sp)
        assert np.allclose(Q, np.eye(2))

    def test_rejects_non_hyperbolic(self):
        with pytest.raises(NoDichotomy):
            spectral_splitting(np.array([[0.0, 1.0], [-1.0, 0.0]]))

    def test_defective_nontrivial(self):
        # Jordan block at -1 coupled to an unstable mode
        A = np.array([[-1.0, 1.0, 0.3], [0.0, -1.0, 0.2], [0.0, 0.0, 2.0]])
        sp = spectral_splitting(A)
        assert sp.count == 2 and sp.jordan_degrees == (1, 0)
        P = sp.projections[0]
        assert np.allclose(P @ P, P, atol=1e-10) and np.allclose(A @ P, P @ A, atol=1e-10)
        assert round(np.trace(P).real) == 2

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 100_000))
    def test_projection_algebra(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        if np.min(np.abs(np.linalg.eigvals(A).real)) < 1e-3:
            return
        sp = spectral_splitting(A)
        total = sum(sp.projections)
        assert np.allclose(total, np.eye(n), atol=1e-10)
        for i, P in enumerate(sp.projections):
            assert np.allclose(P @ P, P, atol=1e-9)
            for j, R in enumerate(sp.projections):
                if i != j:
                    assert np.allclose(P @ R, 0, atol=1e-9)
        assert sum(sp.ranks()) == n
        assert all(u < l for u, l in zip(sp.upper[:-1], sp.lower[1:]))

    def test_rescaling_shifts_exponents(self):
        A = np.array([[1.0, 2.0, 0.0], [0.0, -3.0, 1.0], [0.5, 0.0, -0.5]])
        mu = 0.25
        a, b = spectral_splitting(A), spectral_splitting(A - mu * np.eye(3))
        assert np.allclose(np.array(b.lower), np.array(a.lower) - mu, atol=1e-12)
        for P, R in zip(a.projections, b.projections):
            assert np.allclose(P, R, atol=1e-12)

    def test_groups_of(self):
        sp = spectral_splitting(np.diag([-2.0, -1.0, 1.0]))
        assert groups_of(sp, np.diag([1.0, 1.0, 0.0])) == (0, 1)
        assert groups_of(sp, np.diag([1.0, 0.0, 1.0])) == (0, 2)
        assert groups_of(sp, np.ones((3, 3)) / 3) is None


class TestFactorization:
    def test_nilpotent_polar(self):
        pb = ProblemDefinition(2, np.diag([-1.0, 1.0]), constant_R([[0, 1], [0, 0]]), compact(1.0))
        f = factorize_perturbation(pb)
        x = np.array([0.3])
        assert np.allclose(f.left(x)[0], [[0, 1], [0, 0]], atol=1e-14)
        assert np.allclose(f.right(x)[0], np.diag([0, 1]), atol=1e-14)

    def test_zero(self):
        pb = ProblemDefinition(2, np.diag([-1.0, 1.0]), None)
        f = factorize_perturbation(pb)
        assert np.all(f.left(np.array([0.1])) == 0) and np.all(f.right(np.array([0.1])) == 0)

    def test_polar_invariants_random(self):
        rng = np.random.default_rng(8)
        C = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        D = rng.normal(size=(3, 3))
        R = lambda xs: (np.exp(-np.asarray(xs) ** 2)[:, None, None] * C
                        + np.sin(np.asarray(xs))[:, None, None] * D * np.exp(-np.abs(xs))[:, None, None])
        pb = ProblemDefinition(3, np.diag([-1.0, 2.0, 3.0]), R, exponential(1.0))
        f = factorize_perturbation(pb)
        xs = rng.uniform(-4, 4, 50)
        L, Rr, RR = f.left(xs), f.right(xs), pb.R(xs)
        assert np.allclose(L @ Rr, RR, atol=1e-12)
        nR = np.linalg.norm(RR, 2, axis=(1, 2))
        assert np.all(np.linalg.norm(Rr, 2, axis=(1, 2)) <= np.sqrt(nR) * (1 + 1e-8))
        assert np.all(np.linalg.norm(L, 2, axis=(1, 2)) <= np.sqrt(nR) * (1 + 1e-8))
        assert np.allclose(Rr, np.conj(np.swapaxes(Rr, 1, 2)), atol=1e-12)

    def test_user_pair_checked(self):
        pb = make_sech2_system()
        left = lambda xs: pb.R(xs)
        right = lambda xs: np.broadcast_to(np.eye(2), (np.size(xs), 2, 2))
        f = factorize_perturbation(pb, "user", left, right)
        assert f.kind == "user"
        with pytest.raises(ValueError):
            factorize_perturbation(pb, "user", left, lambda xs: 2 * right(xs))


class TestProblem:
    def test_compact_support_is_exact(self):
        pb = ProblemDefinition(2, np.diag([-1.0, 1.0]), constant_R(np.ones((2, 2))), compact(1.5))
        assert np.all(pb.R(np.array([1.6, -2.0, 40.0])) == 0)
        assert np.all(pb.R(np.array([1.5])) == 1)

    def test_decay_validation(self):
        pb = make_sech2_system()
        assert validate_decay(pb) < 10
        slow = ProblemDefinition(2, np.diag([-1.0, 1.0]),
                                 lambda xs: (1 / (1 + np.asarray(xs) ** 2))[:, None, None] * np.ones((2, 2)),
                                 exponential(1.0))
        with pytest.raises(ValueError):
            validate_decay(slow)

    def test_support_descriptor_checks(self):
        with pytest.raises(ValueError):
            Support("compact", halfwidth=0.0)
        with pytest.raises(ValueError):
            polynomial(1.0)
        assert Support("zero").rate == math.inf

    def test_truncation_choice(self):
        X = suggest_truncation(make_sech2_system(), 1e-12)
        # tail of 2 sech^2 beyond X is about 4 e^{-2X}
        assert 4 * math.exp(-2 * X) < 1e-12 and 4 * math.exp(-2 * (X - 1)) > 1e-14

    def test_reflection(self):
        pb = make_sech2_system()
        r = pb.reflected()
        assert np.allclose(r.A, -pb.A)
        assert np.allclose(r.R(np.array([0.7])), -pb.R(np.array([-0.7])))


class TestPropagator:
    def test_diagonal_example(self):
        prop = Propagator(ProblemDefinition(3, np.diag([-2.0, -1.0, 1.0]))).finalize(5)
        assert np.allclose(prop.propagate(1.0, 0.0), np.diag(np.exp([-2.0, -1.0, 1.0])))
        assert np.allclose(prop.propagate(0.4, 0.4), np.eye(3))

    def test_sampled_constant_matches(self):
        A = np.array([[0.1, 1.0], [-2.0, -0.3]])
        sp = spectral_splitting(np.array([[-1.0, 0.0], [0.0, 1.0]]))
        pb = ProblemDefinition(2, lambda x: A, None, splitting=sp)
        prop = Propagator(pb).finalize(4.0)
        for x, xp in ((1.0, 0.0), (-2.5, 1.5), (3.0, -3.0)):
            want = scipy.linalg.expm((x - xp) * A)
            assert np.linalg.norm(prop.propagate(x, xp) - want) <= 1e-8 * np.linalg.norm(want)

    def test_sampled_cocycle_and_inverse(self):
        coeff = lambda x: np.array([[-1.0 + 0.3 * np.sin(x), 0.5], [0.2 * np.cos(x), 1.0]])
        sp = spectral_splitting(np.array([[-1.0, 0.0], [0.0, 1.0]]))
        prop = Propagator(ProblemDefinition(2, coeff, None, splitting=sp)).finalize(3.0)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x, y, z = rng.uniform(-3, 3, 3)
            lhs = prop.propagate(x, y) @ prop.propagate(y, z)
            assert np.linalg.norm(lhs - prop.propagate(x, z)) <= 1e-8 * np.linalg.norm(lhs)
        for b in (-3.0, 0.0, 3.0):
            P = prop.phi(b)
            assert np.allclose(P @ np.linalg.inv(P), np.eye(2), atol=1e-9)

    def test_out_of_interval(self):
        sp = spectral_splitting(np.diag([-1.0, 1.0]))
        prop = Propagator(ProblemDefinition(2, lambda x: np.diag([-1.0, 1.0]), None, splitting=sp))
        with pytest.raises(RuntimeError):
            prop.phi(0.5)
        prop.finalize(2.0)
        with pytest.raises(ValueError, match="finalized interval"):
            prop.phi(2.5)

    def test_cluster_transfer_keeps_small_entries(self):
        prop = Propagator(ProblemDefinition(3, np.diag([-2.0, -1.0, 1.0]))).finalize(50)
        T = prop.transfer(40.0, 0.0, (0,))
        assert T[0, 0] == pytest.approx(math.exp(-80), rel=1e-13)


class TestBohl:
    def test_diagonal(self):
        prop = Propagator(ProblemDefinition(3, np.diag([-2.0, -1.0, 1.0]))).finalize(30)
        up, lo = estimate_bohl_exponents(prop, np.diag([1.0, 0, 0]), [(5, 20)])
        assert abs(up + 2) < 1e-6 and abs(lo + 2) < 1e-6

    def test_identity_projection(self):
        prop = Propagator(ProblemDefinition(2, -np.eye(2))).finalize(30)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateDichotomy)
            up, lo = estimate_bohl_exponents(prop, np.eye(2), [(0, 10)])
        assert abs(up + 1) < 1e-6 and abs(lo + 1) < 1e-6

    def test_rescaled(self):
        A = np.diag([-2.0, -1.0, 1.0])
        base = Propagator(ProblemDefinition(3, A)).finalize(30)
        shifted = Propagator(ProblemDefinition(3, A - 0.5 * np.eye(3))).finalize(30)
        Q = np.diag([0, 1.0, 0])
        a, b = estimate_bohl_exponents(base, Q, [(2, 12)]), estimate_bohl_exponents(shifted, Q, [(2, 12)])
        assert abs(b[0] - a[0] + 0.5) < 1e-6 and abs(b[1] - a[1] + 0.5) < 1e-6
