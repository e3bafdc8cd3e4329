"""Evans determinant assembly, the Schrodinger specialization and spectral scans."""

import cmath
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .fredholm import (Det2Report, SystemKernel, build_semiseparable, compute_theta,
                       det2_nystrom, det2_semiseparable, kernel_grid, solve_hat_functions)
from .jost import (SolverError, SolverSettings, solve_jost_mixed, solve_jost_volterra,
                   solve_jost_weighted)
from .numerics import condition_estimate
from .system import (ProblemDefinition, SpectralCluster, SpectralSplitting, Support,
                     dichotomy_projection, factorize_perturbation, problem_splitting,
                     suggest_truncation)

BOUNDARY_OFFSET = 1e-6


class CoverageError(ValueError):
    """Jost solutions do not cover every projection of the splitting."""


class ContourTooClose(ValueError):
    """A contour value of D is too small to count zeros reliably."""


class PhaseResolutionError(ValueError):
    """Consecutive contour values differ in phase by pi/2 or more."""


class ShootingError(RuntimeError):
    """The reference shooting integration failed or blew up."""


# ---------------------------------------------------------------- assembly

def _coverage(solutions, d):
    P = np.zeros((d, d), dtype=complex)
    for s in solutions:
        P = P + s.projection
    return P


def evans_determinant(plus_solutions, minus_solutions, tol=1e-8):
    """D = det(Y_+ + Y_-) with Y_pm the sums of the Jost data at x = 0."""
    plus_solutions, minus_solutions = list(plus_solutions), list(minus_solutions)
    if not plus_solutions and not minus_solutions:
        raise CoverageError("no Jost solutions given")
    d = (plus_solutions or minus_solutions)[0].initial.shape[0]
    for s in plus_solutions + minus_solutions:
        if not s.converged:
            raise CoverageError(f"{s.side} solution (j={s.j}) did not converge")
    Pp, Pm = _coverage(plus_solutions, d), _coverage(minus_solutions, d)
    gap = np.max(np.abs(Pp + Pm - np.eye(d)))
    if gap > tol:
        rp = int(round(np.trace(Pp).real))
        rm = int(round(np.trace(Pm).real))
        raise CoverageError(f"projections of the Jost solutions do not sum to I "
                            f"(plus rank {rp}, minus rank {rm}, d = {d}, defect {gap:.3g})")
    Y = sum(s.initial for s in plus_solutions) + sum(s.initial for s in minus_solutions)
    return complex(np.linalg.det(Y))


def evans_function(plus_solutions, minus_solutions):
    """Determinant of the Jost-solution columns spanning ran Q and ker Q.

    When Q is a coordinate projection the columns are taken as they are and
    the matrix coincides with Y_+ + Y_-; otherwise the columns are expressed
    in a basis of ran Q and ker Q and the basis determinant is divided out.
    """
    plus_solutions, minus_solutions = list(plus_solutions), list(minus_solutions)
    Yp = sum(s.initial for s in plus_solutions)
    Ym = sum(s.initial for s in minus_solutions)
    d = Yp.shape[0]
    Q = _coverage(plus_solutions, d)
    diag = np.diag(Q)
    coordinate = (np.max(np.abs(Q - np.diag(diag))) == 0
                  and np.all((diag == 0) | (diag == 1)))
    if coordinate:
        cols = np.empty((d, d), dtype=complex)
        for c in range(d):
            cols[:, c] = Yp[:, c] if diag[c] == 1 else Ym[:, c]
        return complex(np.linalg.det(cols))
    U, s, _ = np.linalg.svd(Q)
    r = int(np.sum(s > 0.5))
    Uc, sc, _ = np.linalg.svd(np.eye(d) - Q)
    B = np.hstack([U[:, :r], Uc[:, :d - r]])
    cols = np.hstack([Yp @ U[:, :r], Ym @ Uc[:, :d - r]])
    return complex(np.linalg.det(cols) / np.linalg.det(B))


@dataclass(frozen=True)
class ReferenceFrame:
    """Matrices N_j with N_j = N_j Q_j = Q_j N_j and det(sum N_j) != 0."""

    blocks: tuple
    projections: tuple

    def __post_init__(self):
        if len(self.blocks) != len(self.projections):
            raise ValueError("one block per projection is required")
        for Nj, Qj in zip(self.blocks, self.projections):
            scale = max(1.0, np.max(np.abs(Nj)))
            if (np.max(np.abs(Nj @ Qj - Nj)) > 1e-10 * scale
                    or np.max(np.abs(Qj @ Nj - Nj)) > 1e-10 * scale):
                raise ValueError("frame block does not satisfy N_j = N_j Q_j = Q_j N_j")
        if abs(self.det) < 1e-12:
            raise ValueError(f"det N = {self.det:.3g} is too small")

    @property
    def N(self):
        return sum(np.asarray(b, dtype=complex) for b in self.blocks)

    @property
    def det(self):
        return complex(np.linalg.det(self.N))

    @classmethod
    def identity(cls, splitting):
        return cls(tuple(splitting.projections), tuple(splitting.projections))

    @classmethod
    def random(cls, splitting, rng, scale=1.0):
        """Blocks Q_j M_j Q_j for random complex M_j (shifted to stay invertible)."""
        d = splitting.dimension
        blocks = []
        for Qj in splitting.projections:
            M = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
            blocks.append(Qj @ (scale * M + 2 * np.eye(d)) @ Qj)
        return cls(tuple(blocks), tuple(splitting.projections))


def tilde_solutions(problem, frame, settings=SolverSettings(), splitting=None):
    """Generalized Jost solutions with Phi Q_j replaced by Phi N_j."""
    split = problem_splitting(problem) if splitting is None else splitting
    plus, minus = [], []
    for j in range(1, split.count + 1):
        side = "plus" if j <= split.k0 else "minus"
        sol = solve_jost_mixed(problem, split, j, side, settings, reference=frame.blocks[j - 1])
        (plus if side == "plus" else minus).append(sol)
    return plus, minus


def evans_ratio(frame, plus_tilde, minus_tilde):
    """det(N~) / det(N) where N~ = sum of the tilde Jost data at 0."""
    if abs(frame.det) < 1e-12:
        raise ValueError("det N below 1e-12")
    Nt = sum(s.initial for s in list(plus_tilde) + list(minus_tilde))
    return complex(np.linalg.det(Nt) / frame.det)


# ----------------------------------------------------------- pipeline

@dataclass(frozen=True)
class AnalysisSettings:
    """Shared settings of the full pipeline.

    route is "auto", "volterra", "weighted" or "mixed".  auto uses the plain
    Volterra equation for compact support and the mixed system otherwise.
    nystrom_nodes = 0 skips the Nystrom oracle; the node count is lowered so
    that the matrix size d * nodes stays below nystrom_max_size.
    """

    X: Optional[float] = None
    route: str = "auto"
    jost: SolverSettings = SolverSettings()
    panel_width: float = 0.25
    points_per_panel: int = 12
    nystrom_nodes: int = 2000
    nystrom_max_size: int = 4200
    nystrom_diagonal: str = "node"
    truncation_tol: float = 1e-12

    def __post_init__(self):
        if self.route not in ("auto", "volterra", "weighted", "mixed"):
            raise ValueError(f"unknown route {self.route!r}")
        if self.X is not None and not self.X > 0:
            raise ValueError("X must be positive")
        if self.nystrom_nodes and self.nystrom_nodes < 8:
            raise ValueError("nystrom_nodes must be 0 or at least 8")
        if not self.panel_width > 0:
            raise ValueError("panel_width must be positive")


def kernel_extent(problem, settings):
    if settings.X is not None:
        return float(settings.X)
    return max(1.0, suggest_truncation(problem, settings.truncation_tol))


def jost_solutions(problem, settings=AnalysisSettings(), splitting=None):
    """Plus and minus Jost solutions along the configured route."""
    split = problem_splitting(problem) if splitting is None else splitting
    Q = dichotomy_projection(split)
    route = settings.route
    if route == "auto":
        route = "volterra" if problem.support.kind in ("zero", "compact") else "mixed"
    js = settings.jost if settings.X is None else replace(settings.jost, X=settings.X)
    if problem.splitting is None and not problem.autonomous:
        problem = replace(problem, splitting=split)
    if route == "volterra":
        return [solve_jost_volterra(problem, Q, "plus", js)], \
            [solve_jost_volterra(problem, Q, "minus", js)], route
    if route == "weighted":
        return [solve_jost_weighted(problem, Q, side="plus", settings=js)], \
            [solve_jost_weighted(problem, Q, side="minus", settings=js)], route
    plus = [solve_jost_mixed(problem, split, j, "plus", js) for j in range(1, split.k0 + 1)]
    minus = [solve_jost_mixed(problem, split, j, "minus", js)
             for j in range(split.k0 + 1, split.count + 1)]
    return plus, minus, route


def _nystrom_grid(problem, X, nodes, ppp, max_size):
    nodes = max(ppp, min(nodes, max_size // problem.dimension))
    width = 2 * X * ppp / nodes
    return kernel_grid(problem, X, width, ppp)


def analyze(problem, settings=AnalysisSettings(), factorization=None, splitting=None,
            extra_kernel=None):
    """Full pipeline: Jost solutions, D, Theta and det2 on both paths.

    ``extra_kernel`` is an additional Nystrom kernel evaluator (the scalar
    Schrodinger kernel, say) whose det2 goes into the diagnostics.
    """
    t0 = time.perf_counter()
    split = problem_splitting(problem) if splitting is None else splitting
    if problem.splitting is None:
        problem = replace(problem, splitting=split)
    Q = dichotomy_projection(split)
    plus, minus, route = jost_solutions(problem, settings, split)
    D = evans_determinant(plus, minus)
    X = kernel_extent(problem, settings)
    fac = factorize_perturbation(problem) if factorization is None else factorization
    grid = kernel_grid(problem, X, settings.panel_width, settings.points_per_panel)
    kernel = build_semiseparable(problem, Q, fac, grid, split)
    hats = solve_hat_functions(kernel)
    det2 = det2_semiseparable(kernel, 0.0, hats)
    theta = compute_theta(problem, Q, grid, split)
    diag = {
        "route": route,
        "X": X,
        "jost_defects": [s.defect_ratio() for s in plus + minus],
        "iterations": [s.iterations for s in plus + minus],
        "hat_iterations": list(hats[2]),
        "grid_nodes": grid.size,
    }
    nys = None
    if settings.nystrom_nodes:
        ngrid = _nystrom_grid(problem, X, settings.nystrom_nodes, settings.points_per_panel,
                              settings.nystrom_max_size)
        nys = det2_nystrom(SystemKernel(problem, Q, fac, X, split), ngrid,
                           settings.nystrom_diagonal)
        diag["nystrom_nodes"] = ngrid.size
        if extra_kernel is not None:
            diag["det2_scalar_nystrom"] = det2_nystrom(extra_kernel, ngrid,
                                                       settings.nystrom_diagonal)
    Y = sum(s.initial for s in plus + minus)
    diag["condition"] = condition_estimate(Y)
    diag["seconds"] = time.perf_counter() - t0
    return Det2Report(theta, D, det2, nys, diagnostics=diag)


# --------------------------------------------------------------- Schrodinger

@dataclass(frozen=True)
class Potential:
    """Scalar potential V with decay metadata."""

    V: Callable
    support: Support
    breakpoints: tuple = ()
    name: str = "V"
    zero: bool = False

    def __call__(self, x):
        return np.asarray(self.V(np.asarray(x, dtype=float)), dtype=complex)


def zero_potential():
    return Potential(lambda x: np.zeros_like(x), Support("zero"), name="zero", zero=True)


def poschl_teller(depth=2.0):
    """V(x) = -depth sech^2 x, declared with exponential decay rate 2."""
    return Potential(lambda x: -depth / np.cosh(x) ** 2, Support("exponential", beta=2.0),
                     name=f"poschl_teller({depth:g})")


def square_well(V0=1.0, a=1.0):
    """V = -V0 on [-a, a] and 0 outside."""
    return Potential(lambda x: np.where(np.abs(x) <= a, -V0, 0.0), Support("compact", halfwidth=a),
                     (-a, a), name=f"square_well({V0:g}, {a:g})")


def gaussian_potential(amplitude=1.0, width=1.0):
    """V = -amplitude exp(-(x/width)^2); declared with exponential rate 1/width."""
    return Potential(lambda x: -amplitude * np.exp(-(x / width) ** 2),
                     Support("exponential", beta=1.0 / width),
                     name=f"gaussian({amplitude:g}, {width:g})")


def sampled_potential(xs, values):
    """Linear interpolation of samples, zero outside the sample range."""
    xs = np.asarray(xs, dtype=float)
    vals = np.asarray(values, dtype=float)
    if xs.ndim != 1 or xs.size < 2 or vals.shape != xs.shape or np.any(np.diff(xs) <= 0):
        raise ValueError("samples need increasing x values and matching V values")
    a = float(max(abs(xs[0]), abs(xs[-1])))
    fn = lambda x: np.interp(x, xs, vals, left=0.0, right=0.0)
    bps = tuple(b for b in (xs[0], xs[-1]))
    return Potential(fn, Support("compact", halfwidth=a), bps, name="samples")


def schrodinger_splitting(k):
    """{Q(k), I - Q(k)} for A(k) = [[0, 1], [-k^2, 0]], Q(k) = 1/2 [[1, 1/(ik)], [ik, 1]]."""
    ik = 1j * k
    Q = 0.5 * np.array([[1, 1 / ik], [ik, 1]], dtype=complex)
    P = np.eye(2) - Q
    z = np.zeros((2, 2), dtype=complex)
    c1 = SpectralCluster(complex(ik), Q, (), True, z)
    c2 = SpectralCluster(complex(-ik), P, (), True, z)
    kap = float(ik.real)
    return SpectralSplitting((Q, P), (kap, -kap), (kap, -kap), 1, (0, 0), ((c1,), (c2,)))


@dataclass(frozen=True)
class SchrodingerCase:
    """-u'' + V u = k^2 u as a first-order system, with Im k > 0.

    Im k = 0, k != 0 is admitted only with ``continuity=True``; the case is
    then evaluated at k + 1e-6 i and ``boundary`` is set.
    """

    potential: Potential
    k: complex
    continuity: bool = False
    boundary: bool = False

    def __post_init__(self):
        k = complex(self.k)
        if k.imag <= 0:
            if self.continuity and k.imag == 0 and k != 0:
                k = complex(k.real, BOUNDARY_OFFSET)
                object.__setattr__(self, "boundary", True)
            else:
                raise ValueError(f"Im k must be positive (got k = {k})")
        object.__setattr__(self, "k", k)

    @property
    def A(self):
        return np.array([[0, 1], [-self.k ** 2, 0]], dtype=complex)

    @property
    def Q(self):
        return self.splitting.projections[0]

    @property
    def splitting(self):
        return schrodinger_splitting(self.k)

    def Vl(self, x):
        return np.sqrt(np.abs(self.potential(x))).astype(complex)

    def Vr(self, x):
        v = self.potential(x)
        r = np.sqrt(np.abs(v))
        return np.divide(v, r, out=np.zeros_like(v), where=r > 0)

    @property
    def problem(self):
        pot = self.potential

        def R(xs):
            xs = np.atleast_1d(np.asarray(xs, dtype=float))
            out = np.zeros((xs.size, 2, 2), dtype=complex)
            out[:, 1, 0] = pot(xs)
            return out

        return ProblemDefinition(2, self.A, None if pot.zero else R, pot.support,
                                 f"schrodinger {pot.name} k={self.k:g}", tuple(pot.breakpoints),
                                 self.splitting)

    @property
    def factorization(self):
        """R = Rl Rr with Rl = [[0, 0], [Vl, 0]] and Rr = [[Vr, 0], [0, 0]]."""
        problem = self.problem

        def left(xs):
            xs = np.atleast_1d(np.asarray(xs, dtype=float))
            out = np.zeros((xs.size, 2, 2), dtype=complex)
            out[:, 1, 0] = self.Vl(xs) * problem.support.envelope(xs).astype(bool)
            return out

        def right(xs):
            xs = np.atleast_1d(np.asarray(xs, dtype=float))
            out = np.zeros((xs.size, 2, 2), dtype=complex)
            out[:, 0, 0] = self.Vr(xs) * problem.support.envelope(xs).astype(bool)
            return out

        return factorize_perturbation(problem, "user", left, right)

    def kernel(self):
        return scalar_schrodinger_kernel(self)


def schrodinger_problem(V, k, continuity=False):
    """SchrodingerCase for a Potential (or a plain callable with exponential decay 1)."""
    if not isinstance(V, Potential):
        V = Potential(V, Support("exponential", beta=1.0))
    return SchrodingerCase(V, k, continuity)


class ScalarSchrodingerKernel:
    """L(k, x, x') = (i/2k) Vr(x) e^{ik|x-x'|} Vl(x') as a 1x1 matrix kernel."""

    def __init__(self, case):
        self.case = case
        self.c = 1j / (2 * case.k)

    @property
    def is_zero(self):
        return bool(self.case.potential.zero)

    def _branch(self, xr, xc, sign):
        xr = np.atleast_1d(np.asarray(xr, dtype=float))
        xc = np.atleast_1d(np.asarray(xc, dtype=float))
        ph = np.exp(sign * 1j * self.case.k * (xr[:, None] - xc[None, :]))
        val = self.c * self.case.Vr(xr)[:, None] * ph * self.case.Vl(xc)[None, :]
        return val[..., None, None]

    def lower(self, xr, xc):
        return self._branch(xr, xc, 1)

    def upper(self, xr, xc):
        return self._branch(xr, xc, -1)

    def __call__(self, xr, xc):
        xr = np.atleast_1d(np.asarray(xr, dtype=float))
        xc = np.atleast_1d(np.asarray(xc, dtype=float))
        dist = np.abs(xr[:, None] - xc[None, :])
        ph = np.exp(1j * self.case.k * dist)
        val = self.c * self.case.Vr(xr)[:, None] * ph * self.case.Vl(xc)[None, :]
        return val[..., None, None]


def scalar_schrodinger_kernel(case, grid=None):
    """Evaluator of the scalar kernel L(k, x, x'); the grid is not needed to build it."""
    return ScalarSchrodingerKernel(case)


def _shoot(case, x_start, x_end, sign, rtol, atol, breakpoints):
    k = case.k
    ik = sign * 1j * k

    def rhs(x, y):
        v = complex(case.potential(np.array([x]))[0])
        return np.array([y[1], (v - k * k) * y[0]])

    pts = [x_start] + [b for b in sorted(breakpoints, reverse=x_end < x_start)
                       if min(x_start, x_end) < b < max(x_start, x_end)] + [x_end]
    y = np.array([1.0, ik], dtype=complex)
    for a, b in zip(pts[:-1], pts[1:]):
        sol = solve_ivp(rhs, (a, b), y, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success or not np.all(np.isfinite(sol.y[:, -1])):
            raise ShootingError(f"shooting from {x_start:g} failed near x = {sol.t[-1]:g}: "
                                f"{sol.message}")
        y = sol.y[:, -1]
    return y * np.exp(ik * x_start)


def jost_function_reference(case, X=None, rtol=1e-12, atol=1e-14):
    """Jost function J(k) = W(u_-, u_+)/(2ik) by shooting from -X and X.

    u_+ starts from e^{ikx} at x = X and u_- from e^{-ikx} at x = -X; both
    are integrated to x = 0 with DOP853.  Independent of the system solvers.
    """
    pot = case.potential
    if pot.zero:
        return 1.0 + 0j
    if X is None:
        s = pot.support
        if s.kind == "compact":
            X = s.halfwidth
        else:
            X = max(1.0, suggest_truncation(case.problem, 1e-13))
    bps = tuple(pot.breakpoints) + (0.0,)
    up = _shoot(case, float(X), 0.0, 1, rtol, atol, bps)
    um = _shoot(case, -float(X), 0.0, -1, rtol, atol, bps)
    W = um[0] * up[1] - um[1] * up[0]
    val = W / (2j * case.k)
    if not cmath.isfinite(val):
        raise ShootingError("shooting produced a non-finite Wronskian")
    return complex(val)


def analyze_schrodinger(case, settings=AnalysisSettings()):
    """Pipeline for a SchrodingerCase with the scalar kernel and shooting oracle."""
    report = analyze(case.problem, settings, factorization=case.factorization,
                     splitting=case.splitting,
                     extra_kernel=scalar_schrodinger_kernel(case) if settings.nystrom_nodes else None)
    report.diagnostics["jost_function"] = jost_function_reference(case)
    report.diagnostics["boundary"] = case.boundary
    return report


# -------------------------------------------------------------------- scans

@dataclass
class ScanResult:
    """Per-point reports (or error strings) over a set of spectral parameters."""

    points: list
    values: list
    closed: bool = False
    winding: Optional[int] = None
    errors: dict = field(default_factory=dict)

    @property
    def evans_values(self):
        return [None if isinstance(v, str) or v is None else v.evans_det for v in self.values]

    @property
    def ok(self):
        return not self.errors


def evans_scan(family, points, settings=AnalysisSettings(), jobs=1, closed=False):
    """Evaluate the pipeline at each point; failures are recorded, not raised.

    ``family(z)`` returns a ProblemDefinition, a SchrodingerCase or a
    callable producing a Det2Report.
    """
    points = [complex(p) for p in points]

    def one(z):
        try:
            target = family(z)
            if isinstance(target, SchrodingerCase):
                return analyze_schrodinger(target, settings)
            if isinstance(target, ProblemDefinition):
                return analyze(target, settings)
            return target()
        except (SolverError, ValueError, ArithmeticError, RuntimeError) as exc:
            cond = getattr(exc, "condition", type(exc).__name__)
            return f"{cond}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, points))
    else:
        values = [one(z) for z in points]
    errors = {i: v for i, v in enumerate(values) if isinstance(v, str)}
    result = ScanResult(points, values, closed, None, errors)
    if closed and not errors:
        try:
            result.winding = winding_count(result)
        except (ContourTooClose, PhaseResolutionError):
            result.winding = None
    return result


def _phase_steps(values):
    vals = np.asarray(values, dtype=complex)
    nxt = np.roll(vals, -1)
    return np.angle(nxt / vals)


def winding_count(contour, min_abs=1e-10):
    """Winding number of D about 0 along a closed contour of scan values."""
    vals = contour.evans_values if isinstance(contour, ScanResult) else list(contour)
    if any(v is None for v in vals):
        raise ValueError("contour has failed points")
    vals = np.asarray(vals, dtype=complex)
    if vals.size < 3:
        raise ValueError("a closed contour needs at least 3 points")
    if np.min(np.abs(vals)) < min_abs:
        raise ContourTooClose("contour too close to a zero")
    steps = _phase_steps(vals)
    if np.max(np.abs(steps)) >= math.pi / 2:
        raise PhaseResolutionError(f"phase step {np.max(np.abs(steps)):.3f} >= pi/2")
    total = float(np.sum(steps))
    count = round(total / (2 * math.pi))
    if abs(total - 2 * math.pi * count) > 0.1:
        raise PhaseResolutionError(f"total phase {total:.4f} is not a multiple of 2 pi")
    return int(count)


def circle_points(center, radius, n):
    theta = 2 * np.pi * np.arange(n) / n
    return [complex(center + radius * np.exp(1j * t)) for t in theta]


def count_zeros(family, center, radius, points=16, settings=AnalysisSettings(), jobs=1,
                max_points=256):
    """Zeros of D inside a circle, doubling the contour until phases resolve."""
    n = points
    while True:
        scan = evans_scan(family, circle_points(center, radius, n), settings, jobs, closed=True)
        if scan.errors:
            first = next(iter(scan.errors.values()))
            raise RuntimeError(f"scan failed at {len(scan.errors)} points: {first}")
        try:
            scan.winding = winding_count(scan)
            return scan
        except PhaseResolutionError:
            if 2 * n > max_points:
                raise
            n *= 2
