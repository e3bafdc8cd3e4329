"""Problem definitions, spectral splittings, propagators and factorizations.

A problem is y' = (A + R(x)) y on the line.  The unperturbed coefficient is
either a constant matrix or a callable profile; the perturbation is a
vectorized callable ``R(xs) -> (n, d, d)`` with a declared support or decay.
"""

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .numerics import ODE_TOL, integrate_linear_ode, matrix_exp


class NoDichotomy(ValueError):
    """The coefficient has spectrum on (or too close to) the imaginary axis."""


class DegenerateDichotomy(UserWarning):
    """The dichotomy projection is 0 or I."""


# -------------------------------------------------------------------- support

@dataclass(frozen=True)
class Support:
    """Declared support or decay of the perturbation.

    kind is "zero", "compact" (R = 0 for |x| > halfwidth), "exponential"
    (||R(x)|| <= C exp(-beta |x|)) or "polynomial" (<= C (1+|x|)^-degree).
    """

    kind: str = "compact"
    halfwidth: float = math.inf
    beta: float = 0.0
    degree: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "compact", "exponential", "polynomial"):
            raise ValueError(f"unknown support kind {self.kind!r}")
        if self.kind == "compact" and not self.halfwidth > 0:
            raise ValueError("compact support needs a positive halfwidth")
        if self.kind == "exponential" and not self.beta > 0:
            raise ValueError("exponential decay needs beta > 0")
        if self.kind == "polynomial" and not self.degree > 1:
            raise ValueError("polynomial decay needs degree > 1 for integrability")

    @property
    def rate(self):
        """Exponential decay rate implied by the descriptor."""
        if self.kind in ("zero", "compact"):
            return math.inf
        return self.beta if self.kind == "exponential" else 0.0

    def envelope(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "compact":
            return (x <= self.halfwidth).astype(float)
        if self.kind == "exponential":
            return np.exp(-self.beta * x)
        return (1.0 + x) ** (-self.degree)


def compact(a):
    return Support("compact", halfwidth=float(a))


def exponential(beta):
    return Support("exponential", beta=float(beta))


def polynomial(degree):
    return Support("polynomial", degree=float(degree))


# ------------------------------------------------------------------ splitting

@dataclass(frozen=True)
class SpectralCluster:
    """One eigenvalue (or tight eigenvalue cluster) of an autonomous A.

    ``powers`` holds N, N^2, ... for N = (A - eigenvalue) P; when
    ``nilpotent`` is true, e^{tA}P is the finite series
    e^{t eigenvalue} (P + sum t^k/k! N^k).
    """

    eigenvalue: complex
    projection: np.ndarray
    powers: tuple
    nilpotent: bool
    shifted: np.ndarray  # (A - eigenvalue) P, used when not nilpotent

    def reflected(self):
        return SpectralCluster(-self.eigenvalue, self.projection,
                               tuple((-1) ** (k + 1) * N for k, N in enumerate(self.powers)),
                               self.nilpotent, -self.shifted)

    def shifted_by(self, mu):
        return replace(self, eigenvalue=self.eigenvalue - mu)


@dataclass(frozen=True)
class SpectralSplitting:
    """Disjoint projections Q_1..Q_d' ordered by Bohl segment [lower, upper]."""

    projections: tuple
    lower: tuple
    upper: tuple
    k0: int
    jordan_degrees: tuple
    clusters: Optional[tuple] = None

    @property
    def count(self):
        return len(self.projections)

    @property
    def m(self):
        return max(self.jordan_degrees) if self.jordan_degrees else 0

    @property
    def dimension(self):
        return self.projections[0].shape[0]

    def ranks(self):
        return [int(round(np.trace(P).real)) for P in self.projections]

    def projection(self, groups):
        d = self.dimension
        Q = np.zeros((d, d), dtype=complex)
        for g in groups:
            Q = Q + self.projections[g]
        return Q

    def stable(self):
        return tuple(range(self.k0))

    def unstable(self):
        return tuple(range(self.k0, self.count))

    def reflected(self):
        order = list(range(self.count))[::-1]
        clusters = None
        if self.clusters is not None:
            clusters = tuple(tuple(c.reflected() for c in self.clusters[g]) for g in order)
        return SpectralSplitting(
            tuple(self.projections[g] for g in order),
            tuple(-self.upper[g] for g in order),
            tuple(-self.lower[g] for g in order),
            self.count - self.k0,
            tuple(self.jordan_degrees[g] for g in order),
            clusters,
        )

    def gaps(self):
        return [self.lower[j + 1] - self.upper[j] for j in range(self.count - 1)]


def _riesz_projection(A, center, radius, points=64):
    d = A.shape[0]
    theta = 2 * np.pi * (np.arange(points) + 0.5) / points
    z = center + radius * np.exp(1j * theta)
    P = np.zeros((d, d), dtype=complex)
    I = np.eye(d)
    for zk in z:
        P += (zk - center) * np.linalg.solve(zk * I - A, I)
    return P / points


def _cluster_values(lam, tol):
    """Group eigenvalues closer than tol (single linkage)."""
    n = len(lam)
    label = list(range(n))

    def root(i):
        while label[i] != i:
            label[i] = label[label[i]]
            i = label[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(lam[i] - lam[j]) < tol:
                label[root(i)] = root(j)
    groups = {}
    for i in range(n):
        groups.setdefault(root(i), []).append(i)
    return list(groups.values())


def _make_cluster(A, value, P, scale):
    d = A.shape[0]
    N = (A - value * np.eye(d)) @ P
    powers = []
    Nk = N.copy()
    nilpotent = False
    for _ in range(d + 1):
        if np.max(np.abs(Nk)) <= 1e-9 * max(scale, 1.0) ** (len(powers) + 1):
            nilpotent = True
            break
        powers.append(Nk)
        Nk = Nk @ N
    if not nilpotent:
        powers = []
    return SpectralCluster(complex(value), P, tuple(powers), nilpotent, N)


def spectral_splitting(A, grouping_tol=1e-8):
    """Group the spectrum of A by real part into Riesz projections.

    Semisimple, well-conditioned matrices use the eigenvector basis;
    otherwise each eigenvalue cluster gets a resolvent contour integral.
    """
    A = np.asarray(A, dtype=complex)
    d = A.shape[0]
    scale = max(np.linalg.norm(A, 2), 1.0)
    lam, V = np.linalg.eig(A)
    if np.any(np.abs(lam.real) < grouping_tol):
        bad = lam[np.argmin(np.abs(lam.real))]
        raise NoDichotomy(f"eigenvalue {bad:.6g} has real part within {grouping_tol} of 0")
    cond = np.linalg.cond(V)
    tight = _cluster_values(lam, 1e-4 * scale)
    clusters = []
    if cond < 1e6 and all(len(c) == 1 for c in tight):
        W = np.linalg.inv(V)
        for i in range(d):
            P = np.outer(V[:, i], W[i, :])
            clusters.append(_make_cluster(A, lam[i], P, scale))
    else:
        centers = [np.mean(lam[c]) for c in tight]
        for ci, c in enumerate(tight):
            spread = max((abs(lam[i] - centers[ci]) for i in c), default=0.0)
            others = [abs(centers[ci] - centers[cj]) for cj in range(len(tight)) if cj != ci]
            radius = 0.5 * min(others) if others else 1.0 + 2 * spread
            radius = max(radius, 4 * spread + 1e-12)
            P = _riesz_projection(A, centers[ci], radius)
            clusters.append(_make_cluster(A, centers[ci], P, scale))
    clusters.sort(key=lambda c: (c.eigenvalue.real, c.eigenvalue.imag))
    groups = [[clusters[0]]]
    for c in clusters[1:]:
        if c.eigenvalue.real - groups[-1][-1].eigenvalue.real > grouping_tol:
            groups.append([c])
        else:
            groups[-1].append(c)
    projections, kappa, degrees = [], [], []
    for g in groups:
        projections.append(sum(c.projection for c in g))
        kappa.append(float(np.mean([c.eigenvalue.real for c in g])))
        degrees.append(max(len(c.powers) for c in g))
    k0 = sum(1 for k in kappa if k < 0)
    return SpectralSplitting(tuple(projections), tuple(kappa), tuple(kappa), k0,
                             tuple(degrees), tuple(tuple(g) for g in groups))


def dichotomy_projection(splitting):
    """Q = sum of the projections with negative Bohl segments."""
    if splitting.k0 == 0 or splitting.k0 == splitting.count:
        warnings.warn("dichotomy projection is degenerate (0 or I)", DegenerateDichotomy,
                      stacklevel=2)
    return splitting.projection(splitting.stable())


def groups_of(splitting, Q, tol=1e-8):
    """Indices j whose projections sum to Q, or None if Q is not such a sum."""
    Q = np.asarray(Q, dtype=complex)
    scale = max(1.0, np.max(np.abs(Q)))
    chosen = []
    for j, P in enumerate(splitting.projections):
        pscale = max(1.0, np.max(np.abs(P)))
        if np.max(np.abs(Q @ P - P)) < tol * scale * pscale:
            chosen.append(j)
        elif np.max(np.abs(Q @ P)) >= tol * scale * pscale:
            return None
    if np.max(np.abs(splitting.projection(chosen) - Q)) > tol * scale:
        return None
    return tuple(chosen)


# -------------------------------------------------------------------- problem

def _zero_perturbation(d):
    return lambda xs: np.zeros((np.size(xs), d, d), dtype=complex)


@dataclass(frozen=True)
class ProblemDefinition:
    """y' = (A + R(x)) y with declared perturbation support.

    ``coefficient`` is a d x d array (autonomous) or a callable x -> (d, d)
    (sampled); sampled problems must carry their own ``splitting`` of the
    unperturbed propagator at x = 0.
    """

    dimension: int
    coefficient: object
    perturbation: Optional[Callable] = None
    support: Support = field(default_factory=lambda: Support("zero"))
    name: str = ""
    breakpoints: tuple = ()
    splitting: Optional[SpectralSplitting] = None
    domain: Optional[tuple] = None

    def __post_init__(self):
        if self.autonomous:
            A = np.asarray(self.coefficient, dtype=complex)
            if A.shape != (self.dimension, self.dimension):
                raise ValueError("coefficient shape does not match dimension")
            object.__setattr__(self, "coefficient", A)

    @property
    def autonomous(self):
        return not callable(self.coefficient)

    @property
    def A(self):
        if not self.autonomous:
            raise TypeError("sampled coefficient has no constant matrix")
        return self.coefficient

    @property
    def is_zero(self):
        return self.perturbation is None or self.support.kind == "zero"

    def coefficient_at(self, x):
        if self.autonomous:
            return self.coefficient
        return np.asarray(self.coefficient(x), dtype=complex)

    def R(self, xs):
        """Vectorized perturbation, exactly zero outside a compact support."""
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        d = self.dimension
        if self.is_zero:
            return np.zeros((xs.size, d, d), dtype=complex)
        vals = np.asarray(self.perturbation(xs), dtype=complex).reshape(xs.size, d, d)
        if self.support.kind == "compact":
            vals = np.where((np.abs(xs) <= self.support.halfwidth)[:, None, None], vals, 0)
        return vals

    def R_at(self, x):
        return self.R(np.array([float(x)]))[0]

    def total_coefficient(self, x):
        return self.coefficient_at(x) + self.R_at(x)

    def reflected(self):
        """The problem in the variable s = -x: coefficient -A(-s), -R(-s)."""
        coeff = -self.coefficient if self.autonomous else (
            lambda s, c=self.coefficient: -np.asarray(c(-s), dtype=complex))
        pert = None
        if self.perturbation is not None:
            pert = lambda s, f=self.perturbation: -np.asarray(f(-np.asarray(s)), dtype=complex)
        splitting = self.splitting.reflected() if self.splitting is not None else None
        domain = (-self.domain[1], -self.domain[0]) if self.domain else None
        return replace(self, coefficient=coeff, perturbation=pert,
                       breakpoints=tuple(sorted(-b for b in self.breakpoints)),
                       splitting=splitting, domain=domain,
                       name=self.name + " (reflected)")

    def shifted(self, z):
        """Spectral shift A -> A - zI."""
        d = self.dimension
        if self.autonomous:
            return replace(self, coefficient=self.coefficient - z * np.eye(d), splitting=None)
        coeff = lambda x, c=self.coefficient: np.asarray(c(x), dtype=complex) - z * np.eye(d)
        splitting = None
        if self.splitting is not None:
            s = self.splitting
            splitting = replace(s, lower=tuple(v - z.real for v in s.lower),
                                upper=tuple(v - z.real for v in s.upper))
        return replace(self, coefficient=coeff, splitting=splitting)

    def with_perturbation(self, perturbation, support, breakpoints=None):
        return replace(self, perturbation=perturbation, support=support,
                       breakpoints=self.breakpoints if breakpoints is None else tuple(breakpoints))


def problem_splitting(problem, grouping_tol=1e-8):
    if problem.splitting is not None:
        return problem.splitting
    if not problem.autonomous:
        raise ValueError("sampled problems must supply a splitting")
    return spectral_splitting(problem.A, grouping_tol)


def validate_decay(problem, extent=30.0, samples=601):
    """Sample ||R(x)||/envelope(x) and return its maximum.

    Raises ValueError when the ratio grows toward the ends of the sample
    window, i.e. the declared decay is faster than the actual one.
    """
    s = problem.support
    if problem.is_zero:
        return 0.0
    L = min(extent, s.halfwidth) if s.kind == "compact" else extent
    xs = np.linspace(-L, L, samples)
    norms = np.linalg.norm(problem.R(xs), ord=2, axis=(1, 2))
    env = s.envelope(xs)
    if s.kind == "compact":
        return float(np.max(norms))
    ratio = norms / env
    inner = np.abs(xs) <= L / 2
    c_in, c_out = np.max(ratio[inner]), np.max(ratio[~inner])
    if not np.isfinite(c_out) or c_out > 10 * max(c_in, 1e-300):
        raise ValueError(f"declared {s.kind} decay not supported by samples "
                         f"(ratio {c_out:.3g} in the tails vs {c_in:.3g} inside)")
    return float(max(c_in, c_out))


def suggest_truncation(problem, tol, growth=0.0, degree=0.0, cap=400.0):
    """Smallest X with tail integral of w(x)||R(x)|| beyond X below tol/10.

    ``growth`` and ``degree`` describe the weight w(x) = e^{growth x}(1+x)^degree.
    """
    s = problem.support
    if problem.is_zero:
        return 1.0
    if s.kind == "compact":
        return float(s.halfwidth)
    C = validate_decay(problem)
    target = tol / 10
    rate = s.rate - growth
    for X in np.arange(1.0, cap, 0.5):
        tail_x = np.linspace(X, X + 200.0, 4001)
        if s.kind == "exponential":
            integrand = C * np.exp(-rate * tail_x) * (1 + tail_x) ** degree
        else:
            integrand = C * (1 + tail_x) ** (degree - s.degree)
        if rate <= 0 and s.kind == "exponential":
            break
        if np.trapezoid(integrand, tail_x) < target:
            return float(X)
    warnings.warn("truncation capped; tail bound not reached", RuntimeWarning, stacklevel=2)
    return float(cap)


# -------------------------------------------------------------- factorization

@dataclass(frozen=True)
class Factorization:
    """R(x) = left(x) @ right(x); both vectorized callables."""

    left: Callable
    right: Callable
    kind: str


def _polar_factors(R):
    U, s, Vh = np.linalg.svd(R)
    root = np.sqrt(s)
    left = (U * root[..., None, :]) @ Vh
    right = (np.conj(np.swapaxes(Vh, -1, -2)) * root[..., None, :]) @ Vh
    return left, right


def factorize_perturbation(problem, kind="polar", left=None, right=None, check_points=None):
    """Factor R = R_left R_right.

    The polar factors are R_right = |R|^{1/2} and R_left = U |R|^{1/2} where
    R = U|R|; user-supplied pairs are checked at sample points.
    """
    if kind == "polar":
        def left_fn(xs):
            return _polar_factors(problem.R(xs))[0]

        def right_fn(xs):
            return _polar_factors(problem.R(xs))[1]

        return Factorization(left_fn, right_fn, "polar")
    if kind != "user":
        raise ValueError(f"unknown factorization kind {kind!r}")
    if left is None or right is None:
        raise ValueError("user-supplied factorization needs both factors")
    xs = np.linspace(-10, 10, 41) if check_points is None else np.asarray(check_points)
    prod = np.asarray(left(xs)) @ np.asarray(right(xs))
    R = problem.R(xs)
    err = np.max(np.abs(prod - R)) / max(1.0, np.max(np.abs(R)))
    if err > 1e-8:
        raise ValueError(f"factors do not multiply to R (error {err:.3g})")
    return Factorization(left, right, "user")


# ----------------------------------------------------------------- propagator

class Propagator:
    """Fundamental matrix Phi of y' = A y with Phi(0) = I.

    Autonomous problems are exact; sampled problems integrate Phi on
    [-X, X] during ``finalize`` and interpolate the dense output.
    """

    def __init__(self, problem, splitting=None):
        self.problem = problem
        self.splitting = splitting
        self.interval = (-math.inf, math.inf) if problem.autonomous else None
        self._pos = None
        self._neg = None
        if problem.autonomous and splitting is None:
            try:
                self.splitting = spectral_splitting(problem.A)
            except NoDichotomy:
                self.splitting = None
        elif splitting is None:
            self.splitting = problem.splitting

    @property
    def finalized(self):
        return self.interval is not None

    def finalize(self, X, tol=ODE_TOL):
        if self.problem.autonomous:
            return self
        d = self.problem.dimension
        coeff = self.problem.coefficient_at
        self._pos = integrate_linear_ode(coeff, 0.0, float(X), np.eye(d), tol)
        self._neg = integrate_linear_ode(coeff, 0.0, -float(X), np.eye(d), tol)
        self.interval = (-float(X), float(X))
        return self

    def _check(self, xs):
        if not self.finalized:
            raise RuntimeError("propagator used before finalize")
        lo, hi = self.interval
        xs = np.asarray(xs, dtype=float)
        slack = 1e-9 * max(1.0, abs(lo) if math.isfinite(lo) else 1.0)
        if np.any(xs < lo - slack) or np.any(xs > hi + slack):
            raise ValueError(f"query outside the finalized interval [{lo}, {hi}]")

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        self._check(x)
        if self.problem.autonomous:
            return self.propagate(x, 0.0)
        flat = np.atleast_1d(x).ravel()
        out = np.empty((flat.size, self.problem.dimension, self.problem.dimension), complex)
        pos = flat >= 0
        if np.any(pos):
            out[pos] = self._pos(np.clip(flat[pos], 0, self.interval[1]))
        if np.any(~pos):
            out[~pos] = self._neg(np.clip(flat[~pos], self.interval[0], 0))
        return out.reshape(x.shape + out.shape[1:])

    def propagate(self, x, xp):
        """Phi(x) Phi(xp)^{-1}."""
        if self.problem.autonomous and np.ndim(x) == 0 and np.ndim(xp) == 0:
            return matrix_exp(self.problem.A, float(x) - float(xp))
        if self.problem.autonomous:
            t = np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)
            return scipy.linalg.expm(t[..., None, None] * self.problem.A)
        if x == xp:
            return np.eye(self.problem.dimension, dtype=complex)
        return self.phi(x) @ np.linalg.inv(self.phi(xp))

    def transfer(self, x, xp, groups, shift=0.0):
        """e^{-shift (x - xp)} Phi(x) Q_G Phi(xp)^{-1} for Q_G = sum of Q_g, g in groups.

        Broadcasts over x and xp.  Autonomous transfers are evaluated
        cluster by cluster so that exponentially small entries keep their
        relative accuracy.
        """
        x = np.asarray(x, dtype=float)
        xp = np.asarray(xp, dtype=float)
        d = self.problem.dimension
        shape = np.broadcast(x, xp).shape
        out = np.zeros(shape + (d, d), dtype=complex)
        if not groups:
            return out
        if self.splitting is None:
            raise ValueError("transfer needs a spectral splitting")
        if self.problem.autonomous:
            t = np.broadcast_to(x - xp, shape)
            for g in groups:
                for c in self.splitting.clusters[g]:
                    out += cluster_transfer(c, t, shift)
            return out
        self._check(x)
        self._check(xp)
        Q = self.splitting.projection(groups)
        xb, xpb = np.broadcast_arrays(x, xp)
        left = self.phi(xb) @ Q
        right = np.linalg.inv(self.phi(xpb))
        return np.exp(-shift * (xb - xpb))[..., None, None] * (left @ right)


def cluster_transfer(cluster, t, shift=0.0):
    """e^{tA} P_c e^{-shift t} for one spectral cluster, vectorized over t."""
    t = np.asarray(t, dtype=float)
    d = cluster.projection.shape[0]
    scal = np.exp(t * (cluster.eigenvalue - shift))
    if cluster.nilpotent:
        poly = np.broadcast_to(cluster.projection, t.shape + (d, d)).astype(complex)
        fact = 1.0
        for k, N in enumerate(cluster.powers, start=1):
            fact *= k
            poly = poly + (t ** k / fact)[..., None, None] * N
        return scal[..., None, None] * poly
    E = scipy.linalg.expm(t[..., None, None] * cluster.shifted)
    return scal[..., None, None] * (E - (np.eye(d) - cluster.projection))


def estimate_bohl_exponents(prop, Q, windows):
    """Windowed estimates (upper, lower) of the Bohl exponents of Q.

    For every window [a, b] the quotients log||Phi(x) Q Phi(x')^{-1}||/(x - x')
    and -log||Phi(x') Q Phi(x)^{-1}||/(x - x') are sampled over pairs
    x' < x in the window with x - x' at least half the window length.  These
    are finite-window diagnostics, not the limsup values.
    """
    groups = groups_of(prop.splitting, Q) if prop.splitting is not None else None
    Q = np.asarray(Q, dtype=complex)

    def block(x, xp):
        if groups is not None:
            return prop.transfer(x, xp, groups)
        return prop.propagate(x, 0.0) @ Q @ prop.propagate(0.0, xp)

    upper, lower = -math.inf, math.inf
    sup_conj = 0.0
    for a, b in windows:
        a, b = float(a), float(b)
        if not b > a:
            raise ValueError("window must have b > a")
        ts = np.linspace(a, b, 9)
        for xp in ts:
            for x in ts:
                if x - xp < 0.5 * (b - a) - 1e-12:
                    continue
                fwd = np.linalg.norm(block(x, xp), 2)
                bwd = np.linalg.norm(block(xp, x), 2)
                upper = max(upper, math.log(fwd) / (x - xp))
                lower = min(lower, -math.log(bwd) / (x - xp))
        for x in ts:
            sup_conj = max(sup_conj, np.linalg.norm(block(x, x), 2))
    if sup_conj > 1e8:
        warnings.warn(f"projection looks non-uniformly conjugated (sup {sup_conj:.3g})",
                      RuntimeWarning, stacklevel=2)
    return upper, lower
