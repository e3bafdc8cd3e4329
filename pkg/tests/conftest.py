import numpy as np
import pytest

from evanskit import evans
from evanskit.system import ProblemDefinition, Support, compact, exponential


def three_mode_R(xs):
    xs = np.asarray(xs, dtype=float)
    out = np.zeros((xs.size, 3, 3), dtype=complex)
    out[:, 0, 1] = np.where(xs >= 0, np.exp(-xs) * np.cos(xs), 0.0)
    return out


def make_three_mode():
    """y' = (diag(-2,-1,1) + R) y with R_12 = e^{-x} cos x on x >= 0."""
    return ProblemDefinition(3, np.diag([-2.0, -1.0, 1.0]), three_mode_R, exponential(1.0),
                             "three-mode counterexample", (0.0,))


def make_random4(seed=3):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4)) + np.diag([2.0, 1.5, -1.0, -2.0])
    C = rng.normal(size=(4, 4)) * 0.6

    def R(xs):
        xs = np.asarray(xs, dtype=float)
        b = np.where(np.abs(xs) < 1, (1 - xs ** 2) ** 2, 0.0)
        return b[:, None, None] * C

    return ProblemDefinition(4, A, R, compact(1.0), "random 4x4", (-1.0, 1.0))


def sech2_R(xs):
    xs = np.asarray(xs, dtype=float)
    out = np.zeros((xs.size, 2, 2), dtype=complex)
    out[:, 1, 0] = -2 / np.cosh(xs) ** 2
    return out


def schrodinger_A(k):
    return np.array([[0, 1], [-k * k, 0]], dtype=complex)


def make_sech2_system(k=2j):
    return ProblemDefinition(2, schrodinger_A(k), sech2_R, exponential(2.0), "sech2")


def closed_form_jost(k):
    return (k - 1j) / (k + 1j)


def make_staircase():
    """Four real modes (-3, -1, 1, 2) with an exponentially decaying coupling."""
    rng = np.random.default_rng(5)
    A = np.diag([-3.0, -1.0, 1.0, 2.0]) + np.triu(rng.normal(size=(4, 4)) * 0.3, 1)
    C = rng.normal(size=(4, 4)) * 0.8

    def R(xs):
        xs = np.asarray(xs, dtype=float)
        return np.exp(-5 * np.abs(xs))[:, None, None] * C

    return ProblemDefinition(4, A, R, exponential(5.0), "staircase")


@pytest.fixture(scope="session")
def three_mode():
    return make_three_mode()


@pytest.fixture(scope="session")
def random4():
    return make_random4()


@pytest.fixture(scope="session")
def sech2_case():
    return evans.schrodinger_problem(evans.poschl_teller(), 2j)


@pytest.fixture(scope="session")
def sech2_system():
    return make_sech2_system()


@pytest.fixture(scope="session")
def zero_problem():
    return ProblemDefinition(3, np.diag([-2.0, -1.0, 1.0]), None, Support("zero"), "free")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
