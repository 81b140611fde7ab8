"""Exact solvers for the single-quadratic-constraint projection.

Each solver returns the minimizer of ||z - target||^2 subject to one
quadratic constraint, which is globally solvable regardless of convexity:

* rank-one homogeneous constraints |a^H z|^2 (sense) c have a closed form;
* general Hermitian constraints reduce, in the eigenbasis, to a scalar
  secular equation in the Lagrange multiplier;
* the two-sided band constraint rounds to its nearest active bound;
* the noise-penalized magnitude constraint solves a cubic in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InfeasibleConstraintError, InvalidProblemError
from .model import ConstraintSense, QuadraticConstraint
from . import rootfind
from .rootfind import (CubicInputs, DEFAULT_TOL, SpectralConstraint,
                       feasible_interval, solve_cubic_mu)

_DEGENERATE_ATOL = 1e-14


class Qcqp1Status(Enum):
    AT_INTERIOR = "interior"    # multiplier 0, input already feasible
    AT_BOUNDARY = "boundary"    # constraint active, interior multiplier
    POLE_CASE = "pole"          # multiplier at an endpoint of its interval


@dataclass(frozen=True)
class Qcqp1Solution:
    z: np.ndarray
    mu: float
    status: Qcqp1Status


@dataclass(frozen=True)
class EigenCache:
    """Eigendecomposition of one constraint matrix, built once and reused.

    basis columns are eigenvectors; eigs are ascending and real.
    """

    basis: np.ndarray
    eigs: np.ndarray

    @classmethod
    def from_matrix(cls, a) -> "EigenCache":
        a = np.asarray(a, dtype=np.complex128)
        eigs, basis = np.linalg.eigh(a)
        scale = max(np.linalg.norm(a), 1e-300)
        recon = (basis * eigs) @ basis.conj().T
        if np.linalg.norm(recon - a) > 1e-9 * scale:
            raise InvalidProblemError("eigendecomposition failed to reconstruct A")
        gram = basis.conj().T @ basis
        if np.linalg.norm(gram - np.eye(a.shape[0])) > 1e-10 * a.shape[0]:
            raise InvalidProblemError("eigenvector basis is not unitary")
        return cls(basis=basis, eigs=eigs.astype(float))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.basis.conj().T @ v

    def rotate_back(self, v: np.ndarray) -> np.ndarray:
        return self.basis @ v


def _phi_at_zero(eigs, trot, brot, rhs) -> float:
    quad = np.sum(eigs * (trot.real ** 2 + trot.imag ** 2))
    lin = np.sum((brot.conj() * trot).real)
    return float(quad - 2.0 * lin - rhs)


def _pole_solution(eigs, trot, brot, rhs, endpoint, extreme):
    """Endpoint-multiplier solution when the secular limit has the wrong sign.

    At mu = endpoint the matrix I + mu*diag(eigs) is singular on the block of
    eigenvalues equal to ``extreme``.  If the rotated data is consistent on
    that block, the block coordinates are free; the secular limit value then
    determines the squared distance D the free block must absorb, and the
    solution adds sqrt(D) (deterministically, phase 0, lowest index) there.
    """
    span = max(abs(eigs[0]), abs(eigs[-1]), 1.0)
    block = np.abs(eigs - extreme) <= 1e-12 * span
    resid = trot[block] + endpoint * brot[block]
    scale = max(1.0, float(np.max(np.abs(trot))), abs(endpoint) * float(np.max(np.abs(brot))))
    if np.max(np.abs(resid)) > 1e-9 * scale:
        return None
    keep = ~block
    den = 1.0 + endpoint * eigs[keep]
    num = trot[keep] + endpoint * brot[keep]
    quad = np.sum(eigs[keep] * (num.real ** 2 + num.imag ** 2) / den ** 2)
    lin = np.sum((brot[keep].conj() * num).real / den)
    phi_reduced = float(quad - 2.0 * lin - rhs)
    # Limit of the secular function as mu approaches the endpoint from inside.
    phi_limit = phi_reduced - float(np.sum(np.abs(brot[block]) ** 2)) / extreme
    if extreme > 0:        # lower endpoint: need the limit non-positive
        if phi_limit > 0:
            return None
    else:                  # upper endpoint: need the limit non-negative
        if phi_limit < 0:
            return None
    dist_sq = max(0.0, -phi_limit / extreme)
    z = np.empty_like(trot)
    z[keep] = num / den
    z[block] = trot[block]
    first = int(np.nonzero(block)[0][0])
    z[first] += np.sqrt(dist_sq)
    return z, float(endpoint)


def _solve_equality_rotated(eigs, trot, brot, rhs, root_method, tol):
    """Equality-constrained projection in the eigenbasis."""
    lo, hi = feasible_interval(eigs)
    if np.isfinite(lo):
        hit = _pole_solution(eigs, trot, brot, rhs, lo, float(eigs[-1]))
        if hit is not None:
            return hit[0], hit[1], Qcqp1Status.POLE_CASE
    if np.isfinite(hi):
        hit = _pole_solution(eigs, trot, brot, rhs, hi, float(eigs[0]))
        if hit is not None:
            return hit[0], hit[1], Qcqp1Status.POLE_CASE
    sc = SpectralConstraint(eigs, trot, brot, rhs)
    if root_method == "newton":
        res = rootfind.solve_phi_newton(sc, tol=tol)
    elif root_method == "bisection":
        res = rootfind.solve_phi_bisection(sc, tol=tol)
    else:
        raise InvalidProblemError(f"unknown root method {root_method!r}")
    mu = res.mu
    z = (trot + mu * brot) / (1.0 + mu * eigs)
    return z, mu, Qcqp1Status.AT_BOUNDARY


def solve_general(cache: EigenCache, b, c: float, target,
                  sense: ConstraintSense = ConstraintSense.EQUAL,
                  root_method: str = "bisection",
                  tol: float = DEFAULT_TOL) -> Qcqp1Solution:
    """Projection onto x^H A x - 2 Re{b^H x} (= | <=) c for general Hermitian A.

    LESS_EQUAL inputs that are already feasible are returned unchanged with
    multiplier 0; otherwise the constraint is active and solved as equality.
    GREATER_EQUAL must be canonicalized to LESS_EQUAL by the caller.
    """
    target = np.asarray(target, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    trot = cache.rotate(target)
    brot = cache.rotate(b)
    if sense is ConstraintSense.GREATER_EQUAL:
        raise InvalidProblemError("canonicalize GREATER_EQUAL before solving")
    if sense is ConstraintSense.BOUNDED:
        raise InvalidProblemError("use solve_bounded for band constraints")
    if sense is ConstraintSense.LESS_EQUAL:
        if _phi_at_zero(cache.eigs, trot, brot, c) <= 0:
            return Qcqp1Solution(z=target.copy(), mu=0.0, status=Qcqp1Status.AT_INTERIOR)
    zrot, mu, status = _solve_equality_rotated(cache.eigs, trot, brot, c,
                                               root_method, tol)
    if sense is ConstraintSense.LESS_EQUAL:
        mu = max(0.0, mu)
    return Qcqp1Solution(z=cache.rotate_back(zrot), mu=mu, status=status)


def solve_bounded(cache: EigenCache, b, c: float, eps: float, target,
                  root_method: str = "bisection",
                  tol: float = DEFAULT_TOL) -> Qcqp1Solution:
    """Projection onto the band c - eps <= x^H A x - 2 Re{b^H x} <= c + eps.

    The constraint is rounded to its closest bound: inputs inside the band
    are returned unchanged, above it the upper bound is activated (mu > 0),
    below it the lower bound (mu < 0).
    """
    if not eps > 0:
        raise InvalidProblemError("band half-width must be positive")
    target = np.asarray(target, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    trot = cache.rotate(target)
    brot = cache.rotate(b)
    r0 = _phi_at_zero(cache.eigs, trot, brot, c)
    if abs(r0) <= eps:
        return Qcqp1Solution(z=target.copy(), mu=0.0, status=Qcqp1Status.AT_INTERIOR)
    rhs = c + eps if r0 > eps else c - eps
    zrot, mu, status = _solve_equality_rotated(cache.eigs, trot, brot, rhs,
                                               root_method, tol)
    return Qcqp1Solution(z=cache.rotate_back(zrot), mu=mu, status=status)


def solve_rank1_homogeneous(a, c: float, target,
                            sense: ConstraintSense = ConstraintSense.EQUAL,
                            eps: float = 0.0) -> Qcqp1Solution:
    """Closed-form projection onto |a^H z|^2 (sense) c.

    Only the component of the target along ``a`` moves; its magnitude is
    rescaled to the active bound while the phase is preserved.  When the
    measured component vanishes the replacement phase is fixed to 0 so runs
    stay reproducible.
    """
    a = np.asarray(a, dtype=np.complex128)
    target = np.asarray(target, dtype=np.complex128)
    nsq = float(np.vdot(a, a).real)
    if nsq == 0.0:
        raise InvalidProblemError("rank-one factor must be nonzero")
    proj = np.vdot(a, target)
    mag_sq = float(proj.real ** 2 + proj.imag ** 2)
    mag = np.sqrt(mag_sq)

    if sense is ConstraintSense.LESS_EQUAL:
        if c < 0:
            raise InfeasibleConstraintError("|a^H z|^2 <= c with c < 0 is empty")
        if mag_sq <= c:
            return Qcqp1Solution(z=target.copy(), mu=0.0, status=Qcqp1Status.AT_INTERIOR)
        goal = np.sqrt(c)
    elif sense is ConstraintSense.GREATER_EQUAL:
        if mag_sq >= c:
            return Qcqp1Solution(z=target.copy(), mu=0.0, status=Qcqp1Status.AT_INTERIOR)
        goal = np.sqrt(c)
    elif sense is ConstraintSense.EQUAL:
        if c < 0:
            raise InfeasibleConstraintError("|a^H z|^2 = c with c < 0 is empty")
        goal = np.sqrt(c)
    elif sense is ConstraintSense.BOUNDED:
        if not eps > 0:
            raise InvalidProblemError("band half-width must be positive")
        if c + eps < 0:
            raise InfeasibleConstraintError("band lies entirely below zero")
        if c - eps <= mag_sq <= c + eps:
            return Qcqp1Solution(z=target.copy(), mu=0.0, status=Qcqp1Status.AT_INTERIOR)
        goal = np.sqrt(c + eps) if mag_sq > c + eps else np.sqrt(c - eps)
    else:
        raise InvalidProblemError(f"unknown sense {sense!r}")

    if mag > _DEGENERATE_ATOL:
        if goal == mag:
            return Qcqp1Solution(z=target.copy(), mu=0.0, status=Qcqp1Status.AT_INTERIOR)
        z = target + ((goal - mag) / (nsq * mag)) * a * proj
        if goal > 0:
            mu = (mag / goal - 1.0) / nsq
            status = Qcqp1Status.AT_BOUNDARY
        else:
            # Target magnitude 0: the constraint degenerates to a linear one
            # and the multiplier escapes to infinity.
            mu = np.inf
            status = Qcqp1Status.POLE_CASE
    else:
        # Degenerate phase: any direction is optimal, pick the real axis.
        z = target + (goal / nsq) * a
        mu = -1.0 / nsq if goal > 0 else 0.0
        status = Qcqp1Status.POLE_CASE if goal > 0 else Qcqp1Status.AT_INTERIOR
    return Qcqp1Solution(z=z, mu=float(mu), status=status)


def solve_gaussian_magnitude(a, y: float, rho: float, target):
    """Jointly optimal (z, noise) of the penalized magnitude subproblem.

    Minimizes |w|^2/2 + rho*||z - target||^2 subject to |a^H z|^2 = y + w.
    The optimal Lagrange multiplier equals the noise estimate w, and is the
    unique real root of a cubic provided rho > y |a|^2.
    """
    a = np.asarray(a, dtype=np.complex128)
    target = np.asarray(target, dtype=np.complex128)
    nsq = float(np.vdot(a, a).real)
    proj = np.vdot(a, target)
    d = float(proj.real ** 2 + proj.imag ** 2)
    mu = solve_cubic_mu(CubicInputs(y=y, rho=rho, a_norm_sq=nsq, d=d))
    z = target - (mu / (rho + mu * nsq)) * proj * a
    return z, float(mu), float(mu)


def solve_constraint(q: QuadraticConstraint, target,
                     root_method: str = "bisection",
                     cache: Optional[EigenCache] = None,
                     tol: float = DEFAULT_TOL) -> Qcqp1Solution:
    """Dispatch one constraint to the matching projection solver."""
    if q.a is not None:
        return solve_rank1_homogeneous(q.a, q.c, target, q.sense, q.eps)
    if q.sense is ConstraintSense.GREATER_EQUAL:
        flipped = QuadraticConstraint(A=-q.A, b=-q.b, c=-q.c,
                                      sense=ConstraintSense.LESS_EQUAL)
        sol = solve_constraint(flipped, target, root_method, None, tol)
        return Qcqp1Solution(z=sol.z, mu=-sol.mu, status=sol.status)
    if cache is None:
        cache = EigenCache.from_matrix(q.A)
    if q.sense is ConstraintSense.BOUNDED:
        return solve_bounded(cache, q.b, q.c, q.eps, target, root_method, tol)
    return solve_general(cache, q.b, q.c, target, q.sense, root_method, tol)
