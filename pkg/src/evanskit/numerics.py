"""Dense complex linear algebra, Gauss-Legendre panels and linear ODE integration.

Everything downstream works with small matrices (d <= 8) sampled on
composite Gauss-Legendre grids, so the helpers here are thin and explicit.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.polynomial import legendre
from scipy.integrate import solve_ivp
from scipy.interpolate import BarycentricInterpolator

ODE_TOL = 1e-10
ABS_TOL = 1e-12
REL_TOL = 1e-10
EXP_CAP = 700.0


class StepSizeUnderflow(RuntimeError):
    """Raised when the ODE integrator cannot make progress."""

    def __init__(self, x, message=""):
        super().__init__(f"step size underflow near x={x:.6g} {message}".strip())
        self.x = x


def as_matrix(M):
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


# ---------------------------------------------------------------- determinants

def lu_slogdet(M):
    """Return (phase, log|det M|) from a partial-pivoting LU factorization.

    A zero pivot gives phase 0 and log|det| = -inf, which is a legitimate
    answer rather than an error.
    """
    M = np.asarray(M)
    n = M.shape[0]
    if n == 0:
        return 1.0 + 0j, 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    diag = np.diag(lu).astype(complex)
    swaps = np.count_nonzero(piv != np.arange(n))
    phase = -1.0 if swaps % 2 else 1.0
    absd = np.abs(diag)
    if np.any(absd == 0):
        return 0j, -np.inf
    phase = phase * np.prod(diag / absd)
    return complex(phase), float(np.sum(np.log(absd)))


def lu_det(M):
    """Determinant via pivoted LU; exact for triangular input."""
    M = as_matrix(M)
    n = M.shape[0]
    if n and (np.allclose(np.tril(M, -1), 0, atol=0) or np.allclose(np.triu(M, 1), 0, atol=0)):
        return complex(np.prod(np.diag(M)))
    phase, logabs = lu_slogdet(M)
    if phase == 0:
        return 0j
    return complex(phase * np.exp(logabs))


def condition_estimate(M):
    """2-norm condition number; inf for singular input."""
    s = np.linalg.svd(np.asarray(M, dtype=complex), compute_uv=False)
    if s.size == 0:
        return 1.0
    return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


# -------------------------------------------------------- hermitian functions

def _hermitian_eig(H):
    H = np.asarray(H, dtype=complex)
    Hs = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
    return np.linalg.eigh(Hs)


def hermitian_sqrt_psd(H, clamp=1e-8):
    """Principal square root of a Hermitian positive semi-definite matrix.

    Eigenvalues in [-clamp*||H||, 0) are rounded to zero; anything more
    negative is rejected.  Accepts a stack of matrices in the last two axes.
    """
    H = np.asarray(H, dtype=complex)
    lam, U = _hermitian_eig(H)
    scale = np.max(np.abs(lam), axis=-1, keepdims=True)
    if np.any(lam < -clamp * np.maximum(scale, 1e-300)):
        raise ValueError("matrix is not positive semi-definite")
    root = np.sqrt(np.clip(lam, 0.0, None))
    return (U * root[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


def hermitian_power_psd(H, power, cutoff=0.0):
    """H**power for PSD H; eigenvalues at or below cutoff map to zero."""
    lam, U = _hermitian_eig(H)
    lam = np.clip(lam, 0.0, None)
    keep = lam > cutoff
    vals = np.where(keep, np.where(keep, lam, 1.0) ** power, 0.0)
    return (U * vals[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


# ------------------------------------------------------------ matrix exponential

def matrix_exp(A, x=1.0, cap=EXP_CAP):
    """e^{xA} by scaling and squaring with a degree-13 Pade approximant."""
    A = np.asarray(A, dtype=complex)
    xA = x * A
    norm = np.max(np.sum(np.abs(xA), axis=-1))
    if norm > cap:
        raise OverflowError(f"||xA||_inf = {norm:.3g} exceeds cap {cap}")
    return scipy.linalg.expm(xA)


# ------------------------------------------------------------------ quadrature

_GL_CACHE = {}


def gauss_legendre(p):
    """Reference Gauss-Legendre nodes and weights on [-1, 1]."""
    if p not in _GL_CACHE:
        _GL_CACHE[p] = legendre.leggauss(p)
    return _GL_CACHE[p]


@dataclass(frozen=True)
class QuadratureGrid:
    """Composite Gauss-Legendre rule.

    Nodes are stored panel by panel; ``edges`` holds the panel boundaries.
    """

    a: float
    b: float
    nodes: np.ndarray
    weights: np.ndarray
    edges: np.ndarray
    points_per_panel: int

    @property
    def panels(self):
        return len(self.edges) - 1

    @property
    def size(self):
        return len(self.nodes)

    def panel_nodes(self):
        return self.nodes.reshape(self.panels, self.points_per_panel)

    def panel_weights(self):
        return self.weights.reshape(self.panels, self.points_per_panel)

    def integrate(self, values):
        """Sum weights*values over the leading axis."""
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))

    def restrict(self, lo, hi):
        """Sub-grid made of the panels lying inside [lo, hi]."""
        tol = 1e-12 * max(1.0, abs(self.a), abs(self.b))
        keep = [m for m in range(self.panels)
                if self.edges[m] >= lo - tol and self.edges[m + 1] <= hi + tol]
        if not keep:
            raise ValueError(f"no panels inside [{lo}, {hi}]")
        p = self.points_per_panel
        idx = np.concatenate([np.arange(m * p, (m + 1) * p) for m in keep])
        edges = self.edges[keep[0]:keep[-1] + 2]
        return QuadratureGrid(float(edges[0]), float(edges[-1]), self.nodes[idx],
                              self.weights[idx], edges, p)


def panel_grid(edges, points_per_panel):
    """Gauss-Legendre rule on each interval between consecutive edges."""
    edges = np.asarray(edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("panel edges must be strictly increasing")
    if not 1 <= points_per_panel <= 64:
        raise ValueError("points_per_panel out of range")
    s, w = gauss_legendre(points_per_panel)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    nodes = (mid[:, None] + half[:, None] * s[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return QuadratureGrid(float(edges[0]), float(edges[-1]), nodes, weights,
                          edges, points_per_panel)


def quadrature_grid(a, b, panels, points_per_panel):
    """Composite Gauss-Legendre grid with equal panels on [a, b]."""
    if not a < b:
        raise ValueError("need a < b")
    if panels < 1:
        raise ValueError("need at least one panel")
    if not 1 <= points_per_panel <= 12:
        raise ValueError("points_per_panel must lie in 1..12")
    return panel_grid(np.linspace(a, b, panels + 1), points_per_panel)


def breakpoint_edges(a, b, breakpoints=(), max_width=0.5):
    """Panel edges on [a, b] that contain every breakpoint inside (a, b)."""
    pts = [a, b] + [float(t) for t in breakpoints if a < t < b]
    pts = np.unique(pts)
    edges = [pts[0]]
    for lo, hi in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil((hi - lo) / max_width - 1e-9)))
        edges.extend(np.linspace(lo, hi, n + 1)[1:])
    return np.asarray(edges)


def lagrange_integrals(p, t):
    """Rows r with r[j] = integral from -1 to t of the j-th Lagrange basis
    polynomial on the p-point Gauss-Legendre nodes of [-1, 1]."""
    s, w = gauss_legendre(p)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(p)
    coef = (w[None, :] * legendre.legvander(s, p - 1).T) * ((2 * k + 1) / 2.0)[:, None]
    V = legendre.legvander(t, p)
    I = np.empty((t.size, p))
    I[:, 0] = t + 1.0
    for kk in range(1, p):
        I[:, kk] = (V[:, kk + 1] - V[:, kk - 1]) / (2 * kk + 1)
    return I @ coef


def lagrange_values(p, t):
    """Rows r with r[j] = l_j(t) for the p-point Gauss-Legendre basis."""
    s, w = gauss_legendre(p)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(p)
    coef = (w[None, :] * legendre.legvander(s, p - 1).T) * ((2 * k + 1) / 2.0)[:, None]
    return legendre.legvander(t, p - 1) @ coef


# --------------------------------------------------------------- dense output

@dataclass(frozen=True)
class DenseSolution:
    """Piecewise interpolant of a matrix-valued function of x."""

    breakpoints: np.ndarray
    interpolants: tuple
    shape: tuple
    order: int
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def interval(self):
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    def __call__(self, x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.interval
        slack = 1e-9 * max(1.0, abs(lo), abs(hi))
        if np.any(xs < lo - slack) or np.any(xs > hi + slack):
            raise ValueError(f"evaluation outside [{lo}, {hi}]")
        idx = np.clip(np.searchsorted(self.breakpoints, xs, side="right") - 1,
                      0, len(self.interpolants) - 1)
        out = np.empty((xs.size,) + tuple(self.shape), dtype=complex)
        for i in np.unique(idx):
            sel = idx == i
            out[sel] = np.asarray(self.interpolants[i](xs[sel])).reshape((-1,) + tuple(self.shape))
        return out[0] if np.ndim(x) == 0 else out


class _PolyInterp:
    def __init__(self, xs, values):
        self.interp = BarycentricInterpolator(xs, values, axis=0)

    def __call__(self, xs):
        return self.interp(xs)


def polynomial_dense(edges, panel_points, panel_values):
    """DenseSolution from per-panel samples (each panel includes its edges)."""
    pieces = [_PolyInterp(xp, vp) for xp, vp in zip(panel_points, panel_values)]
    shape = np.asarray(panel_values[0]).shape[1:]
    order = len(panel_points[0]) - 1
    return DenseSolution(np.asarray(edges, dtype=float), tuple(pieces), shape, order)


def concatenate_dense(parts):
    """Join DenseSolutions on abutting intervals into one."""
    parts = sorted(parts, key=lambda s: s.interval[0])
    bps = [parts[0].breakpoints]
    pieces = list(parts[0].interpolants)
    for s in parts[1:]:
        bps.append(s.breakpoints[1:])
        pieces.extend(s.interpolants)
    return DenseSolution(np.concatenate(bps), tuple(pieces), parts[0].shape,
                         min(s.order for s in parts))


def integrate_linear_ode(coeff, x0, x1, Y0, tol=ODE_TOL, breakpoints=()):
    """Solve Y' = coeff(x) Y from x0 to x1 with an embedded RK5(4) pair.

    The dense output is the stepper's quartic interpolant.  Discontinuities of
    ``coeff`` listed in ``breakpoints`` restart the integrator.
    """
    Y0 = np.asarray(Y0, dtype=complex)
    scalar = Y0.ndim == 0
    Y0m = Y0.reshape(1, 1) if scalar else (Y0 if Y0.ndim == 2 else Y0[:, None])
    d, m = Y0m.shape
    shape = () if scalar else Y0.shape
    if x0 == x1:
        const = Y0m.copy()
        return DenseSolution(np.array([x0, x0]),
                             (lambda xs, c=const: np.broadcast_to(c.reshape(shape), (np.size(xs),) + shape),),
                             shape, 0)

    def rhs(x, y):
        C = np.asarray(coeff(x), dtype=complex).reshape(d, d)
        return (C @ y.reshape(d, m)).ravel()

    sign = 1.0 if x1 > x0 else -1.0
    cuts = sorted({float(t) for t in breakpoints if min(x0, x1) < t < max(x0, x1)},
                  reverse=sign < 0)
    stops = [x0] + cuts + [x1]
    y = Y0m.ravel().astype(complex)
    pieces = []
    for a, b in zip(stops[:-1], stops[1:]):
        sol = solve_ivp(rhs, (a, b), y, method="RK45", rtol=tol * 0.1, atol=tol * 1e-3,
                        dense_output=True)
        if sol.status != 0:
            raise StepSizeUnderflow(float(sol.t[-1]), sol.message)
        y = sol.y[:, -1]
        for interp in sol.sol.interpolants:
            lo, hi = sorted((interp.t_old, interp.t))
            pieces.append((lo, hi, interp))
    pieces.sort(key=lambda t: t[0])
    bps = np.array([pieces[0][0]] + [p[1] for p in pieces])

    def wrap(interp):
        return lambda xs: interp(np.asarray(xs)).T.reshape((-1,) + shape)

    return DenseSolution(bps, tuple(wrap(p[2]) for p in pieces), shape, 4)
