"""Semi-separable determinant machinery and a Nystrom oracle for det2(I + K).

The kernel of interest is

    K(x, x') = -Rr(x) Phi(x) Q Phi(x')^-1 Rl(x')        x >= x'
    K(x, x') =  Rr(x) Phi(x) (I-Q) Phi(x')^-1 Rl(x')     x <  x'

which is -f1(x) g1(x') below the diagonal and -f2(x) g2(x') above it, with
f1 = Rr Phi Q, f2 = Rr Phi (I-Q), g1 = Q Phi^-1 Rl, g2 = -(I-Q) Phi^-1 Rl
written in bases of ran Q and ker Q.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import (QuadratureGrid, breakpoint_edges, lagrange_integrals, lu_slogdet,
                       panel_grid)
from .system import Propagator, groups_of, problem_splitting


class HatIterationError(RuntimeError):
    """Picard iteration for the hat functions did not converge."""


def _range_basis(P):
    """V (d x r) and W (r x d) with P = V W and W V = I for a projection P."""
    U, s, Vh = np.linalg.svd(P)
    r = int(np.sum(s > 1e-8 * max(1.0, s[0] if s.size else 0.0)))
    return U[:, :r], s[:r, None] * Vh[:r]


@dataclass(frozen=True)
class SemiSeparableKernel:
    """Factor functions f1, f2, g1, g2 tabulated on a grid over [-X, X]."""

    d1: int
    d2: int
    grid: QuadratureGrid
    f1: np.ndarray
    f2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    evaluate: object = field(repr=False, compare=False, default=None)
    Q: np.ndarray = None
    basis: tuple = None

    @property
    def d(self):
        return self.d1 + self.d2

    def factors(self, xs):
        """(f1, f2, g1, g2) at arbitrary points."""
        return self.evaluate(np.atleast_1d(np.asarray(xs, dtype=float)))

    def kernel(self, x, xp):
        """K(x, x') rebuilt from the factors (x >= x' uses the f1 g1 branch)."""
        f1, f2, _, _ = self.factors([x])
        _, _, g1, g2 = self.factors([xp])
        if x >= xp:
            return -(f1[0] @ g1[0])
        return -(f2[0] @ g2[0])

    def H(self, x, xp):
        f1, f2, _, _ = self.factors([x])
        _, _, g1, g2 = self.factors([xp])
        return f1[0] @ g1[0] - f2[0] @ g2[0]


def _kernel_setup(problem, Q, splitting, X):
    split = problem_splitting(problem) if splitting is None else splitting
    prop = Propagator(problem, split).finalize(X)
    gq = groups_of(split, Q)
    if gq is None:
        raise ValueError("Q must be a sum of spectral projections")
    gc = tuple(g for g in range(split.count) if g not in gq)
    return prop, gq, gc


def build_semiseparable(problem, Q, factorization, grid, splitting=None):
    """Tabulate f1, f2, g1, g2 on the grid."""
    Q = np.asarray(Q, dtype=complex)
    d = problem.dimension
    X = max(abs(grid.a), abs(grid.b))
    prop, gq, gc = _kernel_setup(problem, Q, splitting, X)
    VQ, WQ = _range_basis(Q)
    Vc, Wc = _range_basis(np.eye(d) - Q)

    def evaluate(xs):
        if problem.is_zero:
            z = np.zeros((xs.size, d, d), dtype=complex)
            Rr = Rl = z
        else:
            Rr = np.asarray(factorization.right(xs), dtype=complex)
            Rl = np.asarray(factorization.left(xs), dtype=complex)
        f1 = Rr @ prop.transfer(xs, 0.0, gq) @ VQ
        f2 = Rr @ prop.transfer(xs, 0.0, gc) @ Vc
        g1 = WQ @ prop.transfer(0.0, xs, gq) @ Rl
        g2 = -(Wc @ prop.transfer(0.0, xs, gc) @ Rl)
        return f1, f2, g1, g2

    f1, f2, g1, g2 = evaluate(grid.nodes)
    return SemiSeparableKernel(VQ.shape[1], Vc.shape[1], grid, f1, f2, g1, g2, evaluate, Q,
                               (VQ, WQ, Vc, Wc))


def kernel_grid(problem, X, panel_width=0.5, points_per_panel=12):
    """Panel grid on [-X, X] with 0 and the problem breakpoints as edges."""
    bps = tuple(problem.breakpoints) + (0.0,)
    s = problem.support
    if s.kind == "compact" and s.halfwidth < X:
        bps = bps + (-s.halfwidth, s.halfwidth)
    return panel_grid(breakpoint_edges(-X, X, bps, panel_width), points_per_panel)


def compute_theta(problem, Q, grid, splitting=None):
    """Theta = int_0^X tr(Phi Q Phi^-1 R) - int_-X^0 tr(Phi (I-Q) Phi^-1 R)."""
    if problem.is_zero:
        return 0j
    Q = np.asarray(Q, dtype=complex)
    X = max(abs(grid.a), abs(grid.b))
    prop, gq, gc = _kernel_setup(problem, Q, splitting, X)
    total = 0j
    if grid.b > 0:
        plus = grid.restrict(0.0, grid.b)
        x = plus.nodes
        tr = np.einsum("nij,nji->n", prop.transfer(x, x, gq), problem.R(x))
        total += plus.integrate(tr)
    if grid.a < 0:
        minus = grid.restrict(grid.a, 0.0)
        x = minus.nodes
        tr = np.einsum("nij,nji->n", prop.transfer(x, x, gc), problem.R(x))
        total -= minus.integrate(tr)
    return complex(total)


# --------------------------------------------------------- cumulative sums

def _panel_matrices(p):
    s, _ = np.polynomial.legendre.leggauss(p)
    F = lagrange_integrals(p, s)
    total = lagrange_integrals(p, np.array([1.0]))[0]
    return F, total[None, :] - F


def cumulative_integral(grid, values, direction):
    """Integral of ``values`` from a to each node ("forward") or from each node to b."""
    p, M = grid.points_per_panel, grid.panels
    F, B = _panel_matrices(p)
    half = 0.5 * np.diff(grid.edges)
    v = values.reshape((M, p) + values.shape[1:])
    w = grid.panel_weights()
    totals = np.einsum("mj,mj...->m...", w, v)
    S = F if direction == "forward" else B
    local = np.einsum("ij,mj...->mi...", S, v) * half.reshape((M, 1) + (1,) * (v.ndim - 2))
    if direction == "forward":
        before = np.cumsum(totals, axis=0) - totals
    else:
        before = np.cumsum(totals[::-1], axis=0)[::-1] - totals
    out = local + before[:, None]
    return out.reshape(values.shape)


def integral_split(grid, values, x0):
    """(int_a^x0, int_x0^b) of tabulated values, with x0 anywhere in [a, b]."""
    p, M = grid.points_per_panel, grid.panels
    v = values.reshape((M, p) + values.shape[1:])
    w = grid.panel_weights()
    totals = np.einsum("mj,mj...->m...", w, v)
    m = int(np.clip(np.searchsorted(grid.edges, x0, side="right") - 1, 0, M - 1))
    a_m, b_m = grid.edges[m], grid.edges[m + 1]
    t = (2 * x0 - a_m - b_m) / (b_m - a_m)
    row = lagrange_integrals(p, np.array([t]))[0] * 0.5 * (b_m - a_m)
    part = np.tensordot(row, v[m], axes=(0, 0))
    left = totals[:m].sum(axis=0) + part
    right = totals[m + 1:].sum(axis=0) + (totals[m] - part)
    return left, right


# ----------------------------------------------------------- hat functions

def solve_hat_functions(kernel, tol=1e-12, max_iterations=500):
    """Picard iteration for
        f1^(x) = f1(x) - int_x^X H(x, x') f1^(x') dx'
        f2^(x) = f2(x) + int_-X^x H(x, x') f2^(x') dx'
    with H = f1 g1 - f2 g2 used in its separable form.
    """
    grid = kernel.grid
    f1, f2, g1, g2 = kernel.f1, kernel.f2, kernel.g1, kernel.g2
    h1, h2 = f1.copy(), f2.copy()
    it1 = it2 = 0
    if kernel.d1:
        for it1 in range(1, max_iterations + 1):
            C11 = cumulative_integral(grid, g1 @ h1, "backward")
            C21 = cumulative_integral(grid, g2 @ h1, "backward")
            new = f1 - f1 @ C11 + f2 @ C21
            diff = np.max(np.abs(new - h1))
            h1 = new
            if diff < tol * (1 + np.max(np.abs(h1))):
                break
        else:
            raise HatIterationError("hat equation for f1 did not converge")
    if kernel.d2:
        for it2 in range(1, max_iterations + 1):
            D12 = cumulative_integral(grid, g1 @ h2, "forward")
            D22 = cumulative_integral(grid, g2 @ h2, "forward")
            new = f2 + f1 @ D12 - f2 @ D22
            diff = np.max(np.abs(new - h2))
            h2 = new
            if diff < tol * (1 + np.max(np.abs(h2))):
                break
        else:
            raise HatIterationError("hat equation for f2 did not converge")
    return h1, h2, (it1, it2)


def u_matrix(kernel, x0=0.0, hats=None):
    """U(x0) in the block basis ran Q + ker Q."""
    if not kernel.grid.a <= x0 <= kernel.grid.b:
        raise ValueError("x0 outside the kernel grid")
    h1, h2, _ = solve_hat_functions(kernel) if hats is None else hats
    grid = kernel.grid
    d1, d2 = kernel.d1, kernel.d2
    _, A11 = integral_split(grid, kernel.g1 @ h1, x0)
    _, A21 = integral_split(grid, kernel.g2 @ h1, x0)
    A12, _ = integral_split(grid, kernel.g1 @ h2, x0)
    A22, _ = integral_split(grid, kernel.g2 @ h2, x0)
    U = np.zeros((d1 + d2, d1 + d2), dtype=complex)
    U[:d1, :d1] = np.eye(d1) - A11
    U[:d1, d1:] = A12
    U[d1:, :d1] = A21
    U[d1:, d1:] = np.eye(d2) - A22
    return U


def u_matrix_standard(kernel, x0=0.0, hats=None):
    """U(x0) conjugated back to the standard basis of C^d."""
    VQ, WQ, Vc, Wc = kernel.basis
    S = np.hstack([VQ, Vc])
    Sinv = np.vstack([WQ, Wc])
    return S @ u_matrix(kernel, x0, hats) @ Sinv


def det2_semiseparable(kernel, x0=0.0, hats=None):
    """det2(I + K) = det U(x0) exp(int_-X^x0 tr f2 g2 + int_x0^X tr f1 g1)."""
    grid = kernel.grid
    if hats is None:
        hats = solve_hat_functions(kernel)
    U = u_matrix(kernel, x0, hats)
    t12 = np.einsum("nij,nji->n", kernel.f1, kernel.g1)
    t22 = np.einsum("nij,nji->n", kernel.f2, kernel.g2)
    _, right = integral_split(grid, t12, x0)
    left, _ = integral_split(grid, t22, x0)
    phase, logabs = lu_slogdet(U)
    return complex(phase * np.exp(logabs + left + right))


def b_matrix(kernel, x):
    """[[g1 f1, g1 f2], [-g2 f1, -g2 f2]] at x."""
    f1, f2, g1, g2 = (a[0] for a in kernel.factors([x]))
    d1, d2 = kernel.d1, kernel.d2
    B = np.zeros((d1 + d2, d1 + d2), dtype=complex)
    B[:d1, :d1] = g1 @ f1
    B[:d1, d1:] = g1 @ f2
    B[d1:, :d1] = -(g2 @ f1)
    B[d1:, d1:] = -(g2 @ f2)
    return B


# ----------------------------------------------------------------- Nystrom

class SystemKernel:
    """Direct evaluation of K(x, x') from Rr, Rl and the propagator.

    ``lower`` and ``upper`` are the two smooth branches continued across
    the diagonal; calling the object applies the x >= x' convention.
    """

    def __init__(self, problem, Q, factorization, X, splitting=None):
        self.problem = problem
        self.factorization = factorization
        self.prop, self.gq, self.gc = _kernel_setup(problem, np.asarray(Q, complex), splitting, X)
        self.d = problem.dimension

    @property
    def is_zero(self):
        return self.problem.is_zero

    def _zeros(self, xr, xc):
        return np.zeros((np.size(xr), np.size(xc), self.d, self.d), dtype=complex)

    def _parts(self, xr, xc):
        xr = np.atleast_1d(np.asarray(xr, dtype=float))
        xc = np.atleast_1d(np.asarray(xc, dtype=float))
        Rr = np.asarray(self.factorization.right(xr), dtype=complex)
        Rl = np.asarray(self.factorization.left(xc), dtype=complex)
        return xr, xc, Rr, Rl

    def lower(self, xr, xc):
        if self.problem.is_zero:
            return self._zeros(xr, xc)
        xr, xc, Rr, Rl = self._parts(xr, xc)
        T = self.prop.transfer(xr[:, None], xc[None, :], self.gq)
        return -(Rr[:, None] @ T @ Rl[None, :])

    def upper(self, xr, xc):
        if self.problem.is_zero:
            return self._zeros(xr, xc)
        xr, xc, Rr, Rl = self._parts(xr, xc)
        T = self.prop.transfer(xr[:, None], xc[None, :], self.gc)
        return Rr[:, None] @ T @ Rl[None, :]

    def __call__(self, xr, xc):
        xr = np.atleast_1d(np.asarray(xr, dtype=float))
        xc = np.atleast_1d(np.asarray(xc, dtype=float))
        below = xr[:, None] >= xc[None, :]
        out = np.where(below[..., None, None], self.lower(xr, xc), 0)
        if not np.all(below):
            out = np.where(below[..., None, None], out, self.upper(xr, xc))
        return out


def _det2_matrix(M):
    if not np.any(M):
        return 1.0 + 0j
    if np.all(M.imag == 0):
        M = M.real
    n = M.shape[0]
    phase, logabs = lu_slogdet(np.eye(n) + M)
    tr = np.trace(M)
    if phase == 0:
        return 0j
    return complex(phase * np.exp(logabs - tr))


def nystrom_matrix(kernel_eval, grid, diagonal="node", block=256):
    """The dN x dN Nystrom matrix of a matrix kernel on a grid.

    diagonal="node" weights every pair by sqrt(w_i w_j) and uses the
    x >= x' branch at coincident nodes.  diagonal="product" integrates the
    two smooth branches separately inside each diagonal panel (needs
    ``lower``/``upper`` on kernel_eval).  This lifts kinked kernels from
    O(h^2) to O(h^3); kernels that jump stay O(h) either way because their
    eigenvalues decay like 1/n and the unresolved tail sets the error.
    """
    x, w = grid.nodes, grid.weights
    N = x.size
    probe = np.asarray(kernel_eval(x[:1], x[:1]))
    d = probe.shape[-1]
    M = np.zeros((N, d, N, d), dtype=complex)
    sw = np.sqrt(w)
    for start in range(0, N, block):
        stop = min(N, start + block)
        K = np.asarray(kernel_eval(x[start:stop], x))
        M[start:stop] = np.transpose(K * (sw[start:stop, None] * sw[None, :])[..., None, None],
                                     (0, 2, 1, 3))
    if diagonal == "product":
        p = grid.points_per_panel
        F, B = _panel_matrices(p)
        for m in range(grid.panels):
            sl = slice(m * p, (m + 1) * p)
            xs = x[sl]
            half = 0.5 * (grid.edges[m + 1] - grid.edges[m])
            lo = np.asarray(kernel_eval.lower(xs, xs)) * (half * F)[..., None, None]
            up = np.asarray(kernel_eval.upper(xs, xs)) * (half * B)[..., None, None]
            # similarity by sqrt(w) keeps the determinant unchanged
            scale = (sw[sl][:, None] / sw[sl][None, :])[..., None, None]
            M[sl, :, sl, :] = np.transpose((lo + up) * scale, (0, 2, 1, 3))
    elif diagonal != "node":
        raise ValueError("diagonal must be 'node' or 'product'")
    return M.reshape(N * d, N * d)


def det2_nystrom(kernel_eval, grid, diagonal="node"):
    """det(I + M) exp(-tr M) for the Nystrom matrix M.

    Evaluators flagged ``is_zero`` skip assembly: the determinant is 1.
    """
    if diagonal not in ("node", "product"):
        raise ValueError("diagonal must be 'node' or 'product'")
    if getattr(kernel_eval, "is_zero", False):
        return 1.0 + 0j
    return _det2_matrix(nystrom_matrix(kernel_eval, grid, diagonal))


def det2_nystrom_estimate(kernel_eval, grid, diagonal="node"):
    """Nystrom det2 with an error estimate from a grid of half the panels."""
    value = det2_nystrom(kernel_eval, grid, diagonal)
    edges = grid.edges[::2]
    if edges[-1] != grid.edges[-1]:
        edges = np.append(edges, grid.edges[-1])
    if len(edges) < 2 or len(edges) == len(grid.edges):
        return value, float("nan")
    coarse = det2_nystrom(kernel_eval, panel_grid(edges, grid.points_per_panel), diagonal)
    return value, float(abs(value - coarse))


def det2_matrix(M):
    """Modified determinant det(I + M) e^{-tr M} of a square matrix."""
    return _det2_matrix(np.asarray(M, dtype=complex))


@dataclass
class Det2Report:
    """Theta, D and both det2 values.

    ``identity_residual`` compares the semi-separable det2 with e^Theta D;
    the Nystrom counterpart is kept in ``diagnostics["nystrom_residual"]``.
    """

    theta: complex
    evans_det: complex
    det2_semiseparable: complex
    det2_nystrom: complex = None
    identity_residual: float = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.identity_residual is None:
            self.identity_residual = identity_residual(self.det2_semiseparable, self.theta,
                                                       self.evans_det)
        if self.det2_nystrom is not None:
            self.diagnostics.setdefault("nystrom_residual", identity_residual(
                self.det2_nystrom, self.theta, self.evans_det))


def identity_residual(det2, theta, evans_det):
    """|det2 - e^Theta D| / |det2|."""
    target = np.exp(theta) * evans_det
    scale = abs(det2) if abs(det2) > 0 else max(abs(target), 1e-300)
    return float(abs(det2 - target) / scale)
