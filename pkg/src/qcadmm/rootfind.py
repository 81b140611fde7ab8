"""Scalar secular-equation machinery for single-constraint projections.

Projecting a point onto the level set of a Hermitian quadratic reduces, in
the eigenbasis of the constraint matrix, to finding the multiplier mu with

    f(mu) = sum_k  eig_k |(t_k + mu g_k) / (1 + mu eig_k)|^2
            - 2 sum_k Re{ conj(g_k) (t_k + mu g_k) / (1 + mu eig_k) }  -  rhs
         = 0,

where t is the rotated target point and g the rotated linear coefficient.
f is strictly decreasing on the interval where I + mu*diag(eigs) >= 0, so
the root is unique and can be found by bisection or safeguarded Newton.

The module also provides the closed-form cubic solve used by the penalized
magnitude (noise-estimating) projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InfeasibleConstraintError, InvalidProblemError, PoleError

#: Default tolerance: bisection interval width / Newton merit value.
DEFAULT_TOL = 1e-12
BISECTION_MAX_ITER = 200
NEWTON_MAX_ITER = 100
_EXPANSION_CAP = 200
_POLE_ATOL = 1e-14


@dataclass(frozen=True)
class SpectralConstraint:
    """Eigenbasis data of one quadratic constraint.

    eigs:   real eigenvalues, ascending
    target: point to project, rotated to the eigenbasis
    linear: linear coefficient, rotated to the eigenbasis (zeros if absent)
    rhs:    constraint right-hand side
    """

    eigs: np.ndarray
    target: np.ndarray
    linear: np.ndarray
    rhs: float

    def __post_init__(self):
        eigs = np.asarray(self.eigs, dtype=float)
        target = np.asarray(self.target, dtype=np.complex128)
        linear = np.asarray(self.linear, dtype=np.complex128)
        if not (eigs.shape == target.shape == linear.shape) or eigs.ndim != 1:
            raise InvalidProblemError("eigs, target and linear must share one shape")
        if eigs.size == 0:
            raise InvalidProblemError("empty spectral data")
        if np.any(np.diff(eigs) < 0):
            raise InvalidProblemError("eigenvalues must be ascending")
        object.__setattr__(self, "eigs", eigs)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "rhs", float(self.rhs))

    def shifted(self, rhs: float) -> "SpectralConstraint":
        return SpectralConstraint(self.eigs, self.target, self.linear, rhs)


@dataclass(frozen=True)
class RootResult:
    mu: float
    iterations: int
    fell_back: bool = False


def _denominators(sc: SpectralConstraint, mu: float) -> np.ndarray:
    den = 1.0 + mu * sc.eigs
    if np.min(np.abs(den)) < _POLE_ATOL:
        raise PoleError(f"multiplier {mu} is within {_POLE_ATOL} of a pole")
    return den


def phi(sc: SpectralConstraint, mu: float) -> float:
    """Secular function value at mu."""
    den = _denominators(sc, mu)
    num = sc.target + mu * sc.linear
    quad = np.sum(sc.eigs * (num.real ** 2 + num.imag ** 2) / den ** 2)
    lin = np.sum((sc.linear.conj() * num).real / den)
    return float(quad - 2.0 * lin - sc.rhs)


def phi_prime(sc: SpectralConstraint, mu: float) -> float:
    """Derivative of the secular function; negative on the feasible interval."""
    den = _denominators(sc, mu)
    num = sc.linear - sc.eigs * sc.target
    return float(-2.0 * np.sum((num.real ** 2 + num.imag ** 2) / den ** 3))


def feasible_interval(eigs) -> tuple:
    """Open multiplier interval on which I + mu*diag(eigs) is PSD."""
    eigs = np.asarray(eigs, dtype=float)
    if eigs.size == 0:
        raise InvalidProblemError("empty eigenvalue sequence")
    emin, emax = float(np.min(eigs)), float(np.max(eigs))
    lo = -1.0 / emax if emax > 0 else -np.inf
    hi = -1.0 / emin if emin < 0 else np.inf
    return lo, hi


def _phi_signed(sc: SpectralConstraint, mu: float, lo: float, hi: float) -> float:
    """phi(mu), mapping a pole hit to the known divergence sign at that end."""
    try:
        return phi(sc, mu)
    except PoleError:
        # Poles only occur at the interval endpoints: +inf side at lo, -inf at hi.
        return np.inf if abs(mu - lo) <= abs(mu - hi) else -np.inf


def bracket_root(sc: SpectralConstraint) -> tuple:
    """Finite bracket [lo, hi] with phi > 0 towards lo and phi < 0 towards hi.

    Finite interval endpoints are used directly (phi diverges with known sign
    there); open ends are replaced by geometric expansion from +-1, doubling
    until a sign change, capped at 200 doublings.
    """
    lo, hi = feasible_interval(sc.eigs)
    if np.isinf(hi):
        probe = 1.0
        for _ in range(_EXPANSION_CAP):
            if _phi_signed(sc, probe, lo, hi) <= 0:
                hi = probe
                break
            lo = max(lo, probe)
            probe *= 2.0
        else:
            raise InfeasibleConstraintError(
                "no sign change while expanding the upper bracket; "
                "the constraint set may be empty")
    if np.isinf(lo):
        probe = -1.0
        for _ in range(_EXPANSION_CAP):
            if _phi_signed(sc, probe, lo, hi) >= 0:
                lo = probe
                break
            hi = min(hi, probe)
            probe *= 2.0
        else:
            raise InfeasibleConstraintError(
                "no sign change while expanding the lower bracket; "
                "the constraint set may be empty")
    return lo, hi


def solve_phi_bisection(sc: SpectralConstraint, tol: float = DEFAULT_TOL,
                        max_iter: int = BISECTION_MAX_ITER) -> RootResult:
    """Bisection on the secular function over the feasible multiplier interval."""
    lo, hi = bracket_root(sc)
    it = 0
    while hi - lo >= tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        if _phi_signed(sc, mid, lo, hi) > 0:
            lo = mid
        else:
            hi = mid
        it += 1
    return RootResult(mu=0.5 * (lo + hi), iterations=it)


def _newton_start(sc: SpectralConstraint, lo: float, hi: float) -> float:
    emin, emax = float(sc.eigs[0]), float(sc.eigs[-1])
    if emin < 0 < emax:
        # midpoint of the feasible interval
        return -(emin + emax) / (2.0 * emin * emax)
    if emax > 0:       # PSD spectrum, interval (-1/emax, inf)
        return -1.0 / emax + 1.0
    if emin < 0:       # NSD spectrum, interval (-inf, -1/emin)
        return -1.0 / emin - 1.0
    return 0.0         # all-zero spectrum: phi is affine in mu


def solve_phi_newton(sc: SpectralConstraint, tol: float = DEFAULT_TOL,
                     max_iter: int = NEWTON_MAX_ITER) -> RootResult:
    """Safeguarded Newton iteration with merit phi^2 / |phi'| < tol.

    Iterates are kept inside a shrinking sign bracket; steps leaving the
    bracket are replaced by its midpoint.  If the iteration cap is reached
    the bisection result is returned with ``fell_back`` set.
    """
    lo, hi = bracket_root(sc)
    mu = min(max(_newton_start(sc, lo, hi), lo), hi)
    if mu <= lo or mu >= hi:
        mu = 0.5 * (lo + hi)
    for it in range(1, max_iter + 1):
        f = _phi_signed(sc, mu, lo, hi)
        if f > 0:
            lo = max(lo, mu)
        else:
            hi = min(hi, mu)
        if not np.isfinite(f):
            mu = 0.5 * (lo + hi)
            continue
        fp = phi_prime(sc, mu)
        if abs(fp) > 0 and f * f / abs(fp) < tol:
            # one more guarded step squares the remaining error, so the
            # returned root matches bisection at comparable tolerance; the
            # guard only needs to avoid the poles at the spectral endpoints
            cand = mu - f / fp
            slo, shi = feasible_interval(sc.eigs)
            if np.isfinite(cand) and slo < cand < shi:
                mu = cand
            return RootResult(mu=mu, iterations=it)
        step = f / fp if fp != 0 else np.nan
        cand = mu - step
        if not np.isfinite(cand) or cand <= lo or cand >= hi:
            cand = 0.5 * (lo + hi)
        mu = cand
    fallback = solve_phi_bisection(sc, tol=tol)
    return RootResult(mu=fallback.mu, iterations=max_iter + fallback.iterations,
                      fell_back=True)


# ---------------------------------------------------------------------------
# Closed-form cubic for the penalized magnitude projection.


@dataclass(frozen=True)
class CubicInputs:
    """Data of the scalar equation  rho^2 d / (rho + |a|^2 mu)^2 = y + mu.

    y:         measured magnitude-squared (nonnegative)
    rho:       quadratic penalty weight
    a_norm_sq: squared norm of the measurement vector
    d:         squared magnitude of the measured target component
    """

    y: float
    rho: float
    a_norm_sq: float
    d: float

    def __post_init__(self):
        if not (self.y >= 0 and self.d >= 0 and self.rho > 0 and self.a_norm_sq > 0):
            raise ConfigurationError("cubic inputs out of range")
        if not self.rho > self.y * self.a_norm_sq:
            raise ConfigurationError(
                "penalty must exceed y * |a|^2 for a unique real root")


def _cubic_coefficients(y, rho, a_norm_sq):
    g3 = a_norm_sq ** 2
    g2 = 2.0 * rho * a_norm_sq + y * a_norm_sq ** 2
    g1 = 2.0 * y * rho * a_norm_sq + rho ** 2
    return g3, g2, g1


def cubic_discriminant(inp: CubicInputs) -> float:
    """Value of D1^2 - 4 D0^3; positive means one real root and a complex pair."""
    g3, g2, g1 = _cubic_coefficients(inp.y, inp.rho, inp.a_norm_sq)
    g0 = inp.y * inp.rho ** 2 - inp.rho ** 2 * inp.d
    d0 = g2 ** 2 - 3.0 * g3 * g1
    d1 = 2.0 * g2 ** 3 - 9.0 * g3 * g2 * g1 + 27.0 * g3 ** 2 * g0
    return float(d1 * d1 - 4.0 * d0 ** 3)


def solve_cubic_mu(inp: CubicInputs) -> float:
    """Unique real root of the cubic form of the penalized magnitude equation.

    The root mu satisfies  rho^2 d / (rho + |a|^2 mu)^2 = y + mu  and equals
    the optimal noise estimate of the corresponding projection.
    """
    if inp.d == 0.0:
        # Degenerate measured component: the equation reduces to y + mu = 0.
        return -inp.y
    mu = _cubic_mu_arrays(np.array([inp.y]), inp.rho,
                          np.array([inp.a_norm_sq]), np.array([inp.d]))
    return float(mu[0])


def _cubic_mu_arrays(y: np.ndarray, rho: float, a_norm_sq: np.ndarray,
                     d: np.ndarray) -> np.ndarray:
    """Vectorized real cubic root; inputs broadcast elementwise.

    Accepts (slightly) negative measurements y, for which the uniqueness
    condition rho > y |a|^2 holds automatically.
    """
    g3, g2, g1 = _cubic_coefficients(y, rho, a_norm_sq)
    g0 = y * rho ** 2 - rho ** 2 * d
    d0 = g2 ** 2 - 3.0 * g3 * g1
    d1 = 2.0 * g2 ** 3 - 9.0 * g3 * g2 * g1 + 27.0 * g3 ** 2 * g0
    disc = d1 * d1 - 4.0 * d0 ** 3
    if np.any(disc <= 0):
        bad = disc <= 0
        # d == 0 collapses the equation to y + mu = 0; anything else violates
        # the penalty precondition.
        if np.any(bad & (d > 0)):
            raise ConfigurationError("penalty too small: cubic has three real roots")
        root = np.sqrt(np.where(bad, 0.0, disc))
    else:
        root = np.sqrt(disc)
    # Pick the cube-root branch that avoids cancellation in d1 +- sqrt(disc).
    t = np.where(d1 >= 0, d1 + root, d1 - root) / 2.0
    c = np.cbrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = -(g2 + c + d0 / c) / (3.0 * g3)
    return np.where(d > 0, mu, -np.asarray(y, dtype=float))
