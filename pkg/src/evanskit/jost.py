"""Matrix-valued Jost solutions from Volterra and mixed Volterra-Fredholm equations.

All half-line solvers reduce to one discretized equation on [a, X]:

    Z(x) = Z0(x) - W(x)^-1 int_x^X  T_back(x, x') R(x') W(x') Z(x') dx'
                 + W(x)^-1 int_a^x  T_fwd(x, x')  R(x') W(x') Z(x') dx'

with Y(x) = e^{mu x} W(x) Z(x) and T_* = e^{-mu (x - x')} Phi(x) P_* Phi(x')^-1
for a sum P_* of spectral projections.  The minus side is the plus side of
the reflected problem x -> -x.

Integrals are evaluated panel by panel: inside a panel the integrand is
interpolated on the Gauss nodes (exact partial-integral weights), and
contributions from whole panels are carried across panel edges by the
stable transfers.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .numerics import (DenseSolution, breakpoint_edges, concatenate_dense,
                       integrate_linear_ode, lagrange_integrals, panel_grid,
                       polynomial_dense)
from .system import (Propagator, Support, groups_of, problem_splitting,
                     suggest_truncation)


class SolverError(RuntimeError):
    """Base class for solver failures; ``condition`` names what went wrong."""

    condition = "solver"

    def __init__(self, message, condition=None, **info):
        super().__init__(message)
        if condition is not None:
            self.condition = condition
        self.info = info


class HypothesisViolation(SolverError):
    """Declared decay does not satisfy the route's integrability condition."""


class NonContraction(SolverError):
    """The integral operator is not a contraction on the truncated half-line."""


class ConvergenceFailure(SolverError):
    """Picard iteration did not reach the tolerance."""


class RankDeficiency(SolverError):
    condition = "rank"


@dataclass(frozen=True)
class SolverSettings:
    """Truncation, tolerances and quadrature shared by the half-line solvers.

    X = None picks the truncation from the decay metadata; epsilon = None means
    0.01 times the smallest gap between Bohl segments.
    """

    X: Optional[float] = None
    tau: float = 0.0
    picard_tol: float = 1e-12
    max_iterations: int = 400
    epsilon: Optional[float] = None
    mu_offsets: Optional[tuple] = None
    panel_width: float = 0.5
    points_per_panel: int = 12
    ode_tol: float = 1e-10
    contraction_target: float = 0.9
    check_tail: bool = True

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tau < 0 or (self.X is not None and self.tau > self.X):
            raise ValueError("need 0 <= tau <= X")
        if self.X is not None and not self.X > 0:
            raise ValueError("X must be positive")


@dataclass(frozen=True)
class JostSolution:
    """A half-line solution Y with Y(0) = Y(0) Q_j.

    ``values`` is defined on [0, X] (plus) or [-X, 0] (minus) in the original
    variable.  ``defect`` holds (x, e^{-kappa' |x|} ||Y(x) - Phi(x) Q||).
    For constant A the solution continues past X as e^{(x - X) A} Y(X), the
    exact solution of the problem truncated at X.
    """

    side: str
    j: Optional[int]
    projection: np.ndarray
    values: DenseSolution
    initial: np.ndarray
    defect: tuple
    iterations: int
    converged: bool
    route: str
    X: float
    tau: float = 0.0
    contraction: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)
    free_coefficient: Optional[np.ndarray] = field(default=None, compare=False)

    def __call__(self, x):
        A = self.free_coefficient
        if A is None:
            return self.values(x)
        xs = np.asarray(x, dtype=float)
        flat = np.atleast_1d(xs)
        edge = self.X if self.side == "plus" else -self.X
        beyond = flat > edge if self.side == "plus" else flat < edge
        if not np.any(beyond):
            return self.values(x)
        out = np.empty(flat.shape + self.values.shape, dtype=complex)
        if np.any(~beyond):
            out[~beyond] = self.values(flat[~beyond])
        Ye = self.values(edge)
        for i in np.flatnonzero(beyond):
            out[i] = scipy.linalg.expm((flat[i] - edge) * A) @ Ye
        return out[0] if xs.ndim == 0 else out

    def defect_ratio(self, floor=1e-12):
        """Mean defect on the tenth of samples nearest 0 over the farthest tenth.

        A defect that never exceeds ``floor`` is rounding noise (Y = Phi Q up
        to roundoff) and counts as fully decayed: the ratio is inf.
        """
        xs, vals = self.defect
        vals = np.asarray(vals)[np.argsort(np.abs(np.asarray(xs)), kind="stable")]
        if vals.size == 0 or np.max(vals) <= floor:
            return math.inf
        n = max(1, len(vals) // 10)
        first, last = np.mean(vals[:n]), np.mean(vals[-n:])
        if last == 0:
            return math.inf
        return float(first / last)

    def ode_residual(self, problem, points, h=1e-5):
        """max ||Y' - (A + R) Y|| / ||Y|| over the given points (central differences)."""
        worst = 0.0
        for x in points:
            dY = (self.values(x + h) - self.values(x - h)) / (2 * h)
            Y = self.values(x)
            res = dY - problem.total_coefficient(x) @ Y
            worst = max(worst, np.linalg.norm(res) / max(np.linalg.norm(Y), 1e-300))
        return worst


# ------------------------------------------------------------ discretization

class _HalfLineEquation:
    """Discretized half-line equation on a panel grid over [a, X]."""

    def __init__(self, prop, grid, Rn, back, fwd, mu, weight):
        self.prop = prop
        self.grid = grid
        p = grid.points_per_panel
        M = grid.panels
        self.M, self.p = M, p
        d = prop.problem.dimension
        self.d = d
        self.mu = mu
        xn = grid.panel_nodes()
        wn = grid.panel_weights()
        a_e, b_e = grid.edges[:-1], grid.edges[1:]
        half = 0.5 * (b_e - a_e)
        s, _ = np.polynomial.legendre.leggauss(p)
        F = lagrange_integrals(p, s)          # int_{-1}^{s_i} l_j
        total = lagrange_integrals(p, np.array([1.0]))[0]
        B = total[None, :] - F                # int_{s_i}^{1} l_j
        self.W_nodes = weight(xn)
        self.W_a = weight(a_e)
        self.W_b = weight(b_e)
        self.h_scale = (Rn.reshape(M, p, d, d) * self.W_nodes[..., None, None])
        self.back = tuple(back)
        self.fwd = tuple(fwd)
        T = prop.transfer
        if self.back:
            self.b_intra = T(xn[:, :, None], xn[:, None, :], back, mu) * \
                (half[:, None, None] * B[None])[..., None, None]
            self.b_edge_node = T(a_e[:, None], xn, back, mu) * wn[..., None, None]
            self.b_edge = T(a_e, b_e, back, mu)
            self.b_node_edge = T(xn, b_e[:, None], back, mu)
        if self.fwd:
            self.f_intra = T(xn[:, :, None], xn[:, None, :], fwd, mu) * \
                (half[:, None, None] * F[None])[..., None, None]
            self.f_edge_node = T(b_e[:, None], xn, fwd, mu) * wn[..., None, None]
            self.f_edge = T(b_e, a_e, fwd, mu)
            self.f_node_edge = T(xn, a_e[:, None], fwd, mu)

    def apply(self, Z):
        """Return (integral terms at nodes, at left edges, at right edges)."""
        M, p, d = self.M, self.p, self.d
        H = self.h_scale @ Z                       # (M, p, d, c)
        c = Z.shape[-1]
        nodes = np.zeros((M, p, d, c), dtype=complex)
        left = np.zeros((M, d, c), dtype=complex)
        right = np.zeros((M, d, c), dtype=complex)
        if self.back:
            G = np.zeros((d, c), dtype=complex)    # int from b_m to X
            local = np.einsum("mjab,mjbc->mac", self.b_edge_node, H)
            for m in range(M - 1, -1, -1):
                right[m] -= G
                nodes[m] -= self.b_node_edge[m] @ G
                G = self.b_edge[m] @ G + local[m]
                left[m] -= G
            nodes -= np.einsum("mijab,mjbc->miac", self.b_intra, H)
        if self.fwd:
            G = np.zeros((d, c), dtype=complex)    # int from a to a_m
            local = np.einsum("mjab,mjbc->mac", self.f_edge_node, H)
            for m in range(M):
                left[m] += G
                nodes[m] += self.f_node_edge[m] @ G
                G = self.f_edge[m] @ G + local[m]
                right[m] += G
            nodes += np.einsum("mijab,mjbc->miac", self.f_intra, H)
        nodes /= self.W_nodes[..., None, None]
        left /= self.W_a[:, None, None]
        right /= self.W_b[:, None, None]
        return nodes, left, right


def _picard(eq, Z0, tol, max_iterations):
    Z = Z0.copy()
    diff_prev = None
    ratio = 0.0
    for it in range(1, max_iterations + 1):
        K, _, _ = eq.apply(Z)
        Znew = Z0 + K
        diff = np.max(np.abs(Znew - Z))
        scale = 1.0 + np.max(np.abs(Znew))
        if diff_prev is not None and diff_prev > 0:
            ratio = diff / diff_prev
        Z = Znew
        if diff < tol * scale:
            return Z, it, True, ratio
        if not np.isfinite(diff):
            break
        diff_prev = diff
    return Z, max_iterations, False, ratio


# ------------------------------------------------------------ orchestration

def _oriented(problem, side):
    if side == "plus":
        return problem
    if side == "minus":
        return problem.reflected()
    raise ValueError(f"side must be 'plus' or 'minus', not {side!r}")


def _mirror(ds):
    """DenseSolution of x -> F(-x) given F."""
    bps = -ds.breakpoints[::-1]
    pieces = tuple((lambda xs, f=f: f(-np.asarray(xs))) for f in ds.interpolants[::-1])
    return DenseSolution(bps, pieces, ds.shape, ds.order)


def _grid(problem, a, X, settings):
    edges = breakpoint_edges(a, X, problem.breakpoints, settings.panel_width)
    return panel_grid(edges, settings.points_per_panel)


def _kernel_tail_check(prop, problem, back, fwd, mu, weight, X, a, condition):
    """Reject kernels whose integrated mass keeps growing with the truncation.

    p(x') = sup_x ||K(x, x')|| ||R(x')|| is sampled on [a, X]; if its mass on
    the second half of the interval is not small compared with the whole,
    the improper integral operator cannot be a bounded contraction.
    """
    if problem.is_zero or problem.support.kind == "compact":
        return
    xs = np.linspace(a, X, 161)
    Rn = np.linalg.norm(problem.R(xs), ord=2, axis=(1, 2))
    pvals = np.zeros_like(xs)
    for i, xp in enumerate(xs):
        if Rn[i] == 0:
            continue
        xx = np.linspace(a, X, 41)
        Tb = prop.transfer(xx[xx <= xp], xp, back, mu) if back else np.zeros((0, 1, 1))
        Tf = prop.transfer(xx[xx >= xp], xp, fwd, mu) if fwd else np.zeros((0, 1, 1))
        norms = [np.linalg.norm(T, ord=2, axis=(1, 2)) * weight(xp) / weight(xq)
                 for T, xq in ((Tb, xx[xx <= xp]), (Tf, xx[xx >= xp])) if len(T)]
        pvals[i] = max(np.max(n) for n in norms) * Rn[i]
    total = np.trapezoid(pvals, xs)
    tail = np.trapezoid(pvals[xs >= 0.5 * (a + X)], xs[xs >= 0.5 * (a + X)])
    if total > 0 and tail > 0.05 * total and tail > 1e-6:
        raise NonContraction(
            f"kernel mass does not decay: {tail:.3g} of {total:.3g} lies in the far half "
            f"of [{a:g}, {X:g}]", condition=condition, tail=tail, total=total)


def _defect(prop, xs, Yn, target_groups, kappa_low):
    ref = prop.transfer(xs, 0.0, target_groups)
    diff = np.linalg.norm(Yn - ref, ord=2, axis=(1, 2))
    return np.exp(-kappa_low * xs) * diff


def _solve_halfline(problem, splitting, target, back, fwd, mu, weight, a, X,
                    settings, route, side, j, ref=None):
    """Solve on the oriented (plus) problem and package a JostSolution."""
    d = problem.dimension
    prop = Propagator(problem, splitting).finalize(X, settings.ode_tol)
    Q = splitting.projection(target)
    right = np.eye(d, dtype=complex) if ref is None else np.asarray(ref, dtype=complex)
    grid = _grid(problem, a, X, settings)
    xn = grid.panel_nodes()
    M, p = xn.shape
    a_e, b_e = grid.edges[:-1], grid.edges[1:]

    def z0(xs):
        xs = np.asarray(xs, dtype=float)
        return prop.transfer(xs, 0.0, target, mu) @ right / weight(xs)[..., None, None]

    if problem.is_zero:
        Zn, Za, Zb = z0(xn), z0(a_e), z0(b_e)
        its, ok, ratio = 1, True, 0.0
    else:
        Rn = problem.R(grid.nodes)
        eq = _HalfLineEquation(prop, grid, Rn, back, fwd, mu, weight)
        Z0 = z0(xn)
        Zn, its, ok, ratio = _picard(eq, Z0, settings.picard_tol, settings.max_iterations)
        if not ok:
            raise ConvergenceFailure(
                f"Picard iteration did not converge in {its} steps "
                f"(last contraction ratio {ratio:.3g})", condition="picard", ratio=ratio)
        _, La, Rb = eq.apply(Zn)
        Za, Zb = z0(a_e) + La, z0(b_e) + Rb

    def to_y(xs, Z):
        return (np.exp(mu * xs) * weight(xs))[..., None, None] * Z

    Yn, Ya, Yb = to_y(xn, Zn), to_y(a_e, Za), to_y(b_e, Zb)
    pts = [np.concatenate(([a_e[m]], xn[m], [b_e[m]])) for m in range(M)]
    vals = [np.concatenate((Ya[m][None], Yn[m], Yb[m][None])) for m in range(M)]
    dense = polynomial_dense(grid.edges, pts, vals)
    start = Ya[0]
    parts = [dense]
    if a > 0:
        coeff = problem.total_coefficient
        ivp = integrate_linear_ode(coeff, a, 0.0, start, settings.ode_tol,
                                   breakpoints=problem.breakpoints)
        start = ivp(0.0)
        parts.append(ivp)
        dense = concatenate_dense(parts)
    initial = start @ Q
    kappa_low = min(splitting.lower[g] for g in target)
    defect = (grid.nodes, _defect(prop, grid.nodes, Yn.reshape(-1, d, d), target, kappa_low))
    values = dense
    Qo = Q
    free_A = None
    if problem.autonomous:
        free_A = np.asarray(problem.coefficient, dtype=complex)
    if side == "minus":
        free_A = None if free_A is None else -free_A
        values = _mirror(dense)
        defect = (-defect[0][::-1], defect[1][::-1])
    return JostSolution(side, j, Qo, values, initial, defect, its, ok, route, float(X),
                        float(a), float(ratio),
                        {"grid_size": grid.size, "mu": mu}, free_A)


def _target_groups(splitting, Q):
    groups = groups_of(splitting, Q)
    if groups is None:
        raise ValueError("Q must be a sum of spectral projections of the splitting")
    if not groups:
        raise ValueError("Q must be nonzero")
    return groups


def _truncation(problem, settings, growth=0.0, degree=0.0):
    if settings.X is not None:
        return float(settings.X)
    return max(1.0, suggest_truncation(problem, settings.picard_tol, growth, degree))


def _unit(x):
    return np.ones_like(np.asarray(x, dtype=float))


def solve_jost_volterra(problem, Q, side="plus", settings=SolverSettings()):
    """Jost solution from the plain Volterra equation on a half-line.

    Plus side: Y(x) = Phi(x) Q - int_x^X Phi(x) Phi(x')^-1 R(x') Y(x') dx'.
    Minus side: Y(x) = Phi(x)(I - Q) + int_-X^x ... with the same kernel.
    """
    Q = np.asarray(Q, dtype=complex)
    prob = _oriented(problem, side)
    split = problem_splitting(prob)
    Qo = Q if side == "plus" else np.eye(problem.dimension) - Q
    target = _target_groups(split, Qo)
    lam_low = min(split.lower[g] for g in target)
    mu = max(split.upper[g] for g in target)
    if not problem.is_zero and problem.support.kind != "compact":
        if not problem.support.rate > -lam_low:
            raise HypothesisViolation(
                f"Volterra route needs decay rate beta > {-lam_low:g}, declared "
                f"{problem.support.rate:g}", condition="volterra_decay")
    X = _truncation(prob, settings, growth=mu - lam_low)
    everything = tuple(range(split.count))
    sol = _solve_halfline(prob, split, target, everything, (), mu, _unit, 0.0, X,
                          settings, "volterra", side, None)
    return replace(sol, projection=Q if side == "plus" else Qo)


def solve_jost_weighted(problem, Q, weight=None, kappa=None, side="plus",
                        settings=SolverSettings()):
    """Jost solution from the weighted Volterra equation for Z = e^{-kappa x} f^-1 Y.

    ``weight`` is f(|x|), nondecreasing with f(0) >= 1; kappa defaults to
    the upper Bohl exponent of Q (of I - Q reflected, on the minus side).
    """
    Q = np.asarray(Q, dtype=complex)
    prob = _oriented(problem, side)
    split = problem_splitting(prob)
    Qo = Q if side == "plus" else np.eye(problem.dimension) - Q
    target = _target_groups(split, Qo)
    lam_up = max(split.upper[g] for g in target)
    lam_low = min(split.lower[g] for g in target)
    mu = lam_up if kappa is None else float(kappa)
    if side == "minus" and kappa is not None:
        mu = -float(kappa)
    if weight is None:
        f = _unit
    else:
        probe = np.linspace(0, 50, 201)
        fv = np.asarray(weight(probe), dtype=float)
        if fv[0] < 1 or np.any(np.diff(fv) < -1e-12 * np.abs(fv[1:])):
            raise ValueError("weight must be nondecreasing with f(0) >= 1")
        f = lambda x: np.asarray(weight(np.abs(np.asarray(x, dtype=float))), dtype=float)
    gap = lam_up - lam_low
    if not problem.is_zero and problem.support.kind != "compact":
        if gap > 1e-12 and not problem.support.rate > gap:
            raise HypothesisViolation(
                f"exponential-gap condition violated: need beta > lambda_plus(Q) - "
                f"kappa'_plus(Q) = {gap:g}, declared beta = {problem.support.rate:g}",
                condition="exponential_gap", gap=gap, beta=problem.support.rate)
    X = _truncation(prob, settings, growth=gap)
    everything = tuple(range(split.count))
    if settings.check_tail:
        prop = Propagator(prob, split).finalize(X, settings.ode_tol)
        _kernel_tail_check(prop, prob, everything, (), mu, f, X, 0.0, "exponential_gap")
    sol = _solve_halfline(prob, split, target, everything, (), mu, f, 0.0, X,
                          settings, "weighted", side, None)
    return replace(sol, projection=Q if side == "plus" else Qo)


def default_epsilon(splitting):
    gaps = splitting.gaps()
    return 0.01 * min(gaps) if gaps else 0.01


def _contraction_bound(prop, problem, back, fwd, mu, weight, tau, X, mdeg):
    """2 * int_tau^X p(x') dx' with p(x') = c ||R(x')|| (1+|x'|)^{2 m}."""
    if problem.is_zero or tau >= X:
        return 0.0
    t = np.linspace(0.0, 2 * X, 201)
    c = 0.0
    poly = (1 + t) ** (-mdeg)
    if back:
        c = max(c, np.max(np.linalg.norm(prop.transfer(-t, 0.0, back, mu), ord=2, axis=(1, 2)) * poly))
    if fwd:
        c = max(c, np.max(np.linalg.norm(prop.transfer(t, 0.0, fwd, mu), ord=2, axis=(1, 2)) * poly))
    xs = np.linspace(tau, X, 801)
    Rn = np.linalg.norm(problem.R(xs), ord=2, axis=(1, 2)) * (1 + xs) ** (2 * mdeg)
    return 2 * c * float(np.trapezoid(Rn, xs))


def solve_jost_mixed(problem, splitting=None, j=1, side="plus", settings=SolverSettings(),
                     reference=None):
    """Generalized Jost solution Y^{(j)} from the mixed Volterra-Fredholm system.

    j is 1-based.  Plus side needs j <= k0, minus side j > k0.  Volterra
    part: projections Q_k with k >= j over [x, X]; Fredholm part: k < j over
    [tau, x], with tau raised until the kernel bound is below the target.
    ``reference`` (a matrix N_j commuting with Q_j) replaces Phi Q_j by
    Phi Q_j N_j in the inhomogeneous term.
    """
    split = problem_splitting(problem) if splitting is None else splitting
    dcount = split.count
    if not 1 <= j <= dcount:
        raise ValueError(f"j must lie in 1..{dcount}")
    if side == "plus" and j > split.k0:
        raise ValueError(f"plus side needs j <= k0 = {split.k0}")
    if side == "minus" and j <= split.k0:
        raise ValueError(f"minus side needs j > k0 = {split.k0}")
    prob = _oriented(problem, side)
    osplit = split if side == "plus" else split.reflected()
    if prob.splitting is not None or not prob.autonomous:
        prob = replace(prob, splitting=osplit)
    jo = j if side == "plus" else dcount - j + 1
    g = jo - 1
    back = tuple(range(g, dcount))
    fwd = tuple(range(g))
    mdeg = osplit.jordan_degrees[g] if prob.autonomous else 0
    offsets = settings.mu_offsets
    if prob.autonomous:
        mu = osplit.upper[g] + (offsets[j - 1] if offsets else 0.0)
        weight = (lambda x, m=mdeg: (1 + np.abs(np.asarray(x, dtype=float))) ** m) if mdeg else _unit
    else:
        eps = settings.epsilon if settings.epsilon is not None else default_epsilon(osplit)
        mu = osplit.upper[g] + (offsets[j - 1] if offsets else eps)
        weight = _unit
    if not problem.is_zero:
        s = problem.support
        if prob.autonomous:
            if s.kind == "polynomial" and not s.degree > 2 * osplit.m + 1:
                raise HypothesisViolation(
                    f"autonomous mixed route needs ||R|| in L1 with weight (1+|x|)^{2 * osplit.m}; "
                    f"declared degree {s.degree:g}", condition="polynomial_moment")
        else:
            width = max(u - l for u, l in zip(osplit.upper, osplit.lower))
            if s.kind != "compact" and not s.rate > width:
                raise HypothesisViolation(
                    f"exponential decay rate {s.rate:g} must exceed the Bohl segment width {width:g}",
                    condition="exponential_gap")
    X = _truncation(prob, settings, degree=2 * mdeg)
    tau = settings.tau
    prop = Propagator(prob, osplit).finalize(X, settings.ode_tol)
    bound = 0.0
    if fwd and not problem.is_zero:
        if settings.check_tail:
            _kernel_tail_check(prop, prob, back, fwd, mu, weight, X, tau, "mixed_decay")
        bound = _contraction_bound(prop, prob, back, fwd, mu, weight, tau, X, mdeg)
        while bound >= settings.contraction_target:
            tau = 0.5 if tau == 0 else 2 * tau
            if tau >= X:
                raise NonContraction(
                    f"no tau < X = {X:g} makes the mixed kernel a contraction",
                    condition="contraction", bound=bound)
            bound = _contraction_bound(prop, prob, back, fwd, mu, weight, tau, X, mdeg)
    sol = _solve_halfline(prob, osplit, (g,), back, fwd, mu, weight, tau, X, settings,
                          "mixed", side, j, ref=reference)
    diag = dict(sol.diagnostics, kernel_bound=bound)
    return replace(sol, projection=split.projections[j - 1], diagnostics=diag)


def truncate_perturbation(problem, n):
    """R_n(x) = R(x) for |x| <= n and 0 beyond, with compact support n."""
    if not n > 0:
        raise ValueError("n must be positive")
    s = problem.support
    if problem.is_zero:
        return problem
    if s.kind == "compact" and s.halfwidth <= n:
        return problem
    bps = tuple(sorted(set(b for b in problem.breakpoints if abs(b) < n) | {-float(n), float(n)}))
    return replace(problem, support=Support("compact", halfwidth=float(n)), breakpoints=bps,
                   name=f"{problem.name} truncated at {n:g}")


def perturbed_range_projection(jost_plus_solutions, Q, rank_tol=1e-8):
    """Projection with range spanned by sum Y_+^{(j)}(0) and kernel ker Q."""
    Q = np.asarray(Q, dtype=complex)
    Yp = sum(s.initial for s in jost_plus_solutions)
    U, sv, Vh = np.linalg.svd(Q)
    r = int(np.sum(sv > 1e-8 * max(1.0, sv[0])))
    VQ = U[:, :r]
    WQ = sv[:r, None] * Vh[:r]
    Bm = Yp @ VQ
    bs = np.linalg.svd(Bm, compute_uv=False)
    span = int(np.sum(bs > rank_tol * max(1.0, bs[0] if bs.size else 0.0)))
    if span < r:
        raise RankDeficiency(
            f"span of the plus-side Jost data has dimension {span} < rank Q = {r}")
    LB = WQ @ Bm
    if np.linalg.cond(LB) > 1e12:
        raise RankDeficiency("range of the Jost data meets ker Q")
    return Bm @ np.linalg.solve(LB, WQ)


def solution_exponents(sol, window, samples=9):
    """Windowed growth-rate estimates (upper, lower) of the solutions in sol.

    Uses ||Y(x) Y(x')^+|| as the perturbed propagator restricted to the
    range of Y, over pairs x' < x in the window.  On the minus side the
    window refers to |x| and the rates are those of the reflected problem.
    """
    a, b = window
    sign = 1.0 if sol.side == "plus" else -1.0
    ts = np.linspace(a, b, samples)
    upper, lower = -math.inf, math.inf
    for xp in ts:
        for x in ts:
            if x - xp < 0.5 * (b - a) - 1e-12:
                continue
            Yx, Yp = sol(sign * x), sol(sign * xp)
            fwd = np.linalg.norm(Yx @ np.linalg.pinv(Yp, rcond=1e-13), 2)
            bwd = np.linalg.norm(Yp @ np.linalg.pinv(Yx, rcond=1e-13), 2)
            upper = max(upper, math.log(fwd) / (x - xp))
            lower = min(lower, -math.log(bwd) / (x - xp))
    return upper, lower
