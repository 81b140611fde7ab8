"""Memory-efficient consensus iteration for families of rank-one constraints.

When every constraint is a magnitude constraint |a_i^H x|^2 (sense) c_i, the
per-constraint copies and duals never need to be stored: each dual stays a
multiple of its own a_i, so the running sums z_sum = sum_i z_i and
u_sum = sum_i u_i together with the m scalars dual_proj_i = a_i^H u_i carry
the whole state.  One iteration costs two dense matrix-vector products plus
elementwise work, and the working set is O(m + n) instead of O(m n).

``step`` covers equality / one-sided / banded magnitude constraints;
``step_gaussian`` covers the noise-penalized variant where each projection
solves a closed-form cubic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, InvalidProblemError
from .model import ConstraintSense
from .rootfind import _cubic_mu_arrays

_DEGENERATE_ATOL = 1e-14

_SENSE_CODE = {ConstraintSense.LESS_EQUAL: 0, ConstraintSense.EQUAL: 1,
               ConstraintSense.BOUNDED: 2, ConstraintSense.GREATER_EQUAL: 3}


@dataclass(frozen=True)
class PriorSpec:
    """Projection applied to the shared iterate after its linear update."""

    kind: str = "none"
    k: Optional[int] = None
    lam: Optional[float] = None

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def real_part(cls):
        return cls("real")

    @classmethod
    def real_nonnegative(cls):
        return cls("real_nonneg")

    @classmethod
    def hard_threshold(cls, k: int):
        if k < 0:
            raise InvalidProblemError("cardinality must be nonnegative")
        return cls("hard", k=int(k))

    @classmethod
    def soft_threshold(cls, lam: float):
        if lam < 0:
            raise InvalidProblemError("shrinkage must be nonnegative")
        return cls("soft", lam=float(lam))


def apply_prior(v: np.ndarray, prior: Optional[PriorSpec]) -> np.ndarray:
    """Project a vector onto the structure described by ``prior``."""
    if prior is None or prior.kind == "none":
        return v
    if prior.kind == "real":
        return v.real.astype(np.complex128)
    if prior.kind == "real_nonneg":
        return np.maximum(v.real, 0.0).astype(np.complex128)
    if prior.kind == "hard":
        if prior.k >= v.size:
            return v
        mag = np.abs(v)
        # stable sort on negated magnitudes keeps the lowest index on ties
        order = np.argsort(-mag, kind="stable")
        out = np.zeros_like(v)
        keep = order[:prior.k]
        out[keep] = v[keep]
        return out
    if prior.kind == "soft":
        mag = np.abs(v)
        scale = np.where(mag > 0, np.maximum(mag - prior.lam, 0.0) / np.where(mag > 0, mag, 1.0), 0.0)
        return v * scale
    raise InvalidProblemError(f"unknown prior {prior.kind!r}")


@dataclass
class CompressedState:
    """O(m+n) consensus state: shared iterate, summed copies/duals, and the
    per-constraint dual measurements a_i^H u_i."""

    x: np.ndarray
    z_sum: np.ndarray
    u_sum: np.ndarray
    dual_proj: np.ndarray
    consensus_sq: Optional[float] = None   # sum_i ||z_i - x||^2 of the last step
    mult: Optional[np.ndarray] = None      # multipliers of the last projections

    @classmethod
    def initial(cls, x0: np.ndarray, m: int) -> "CompressedState":
        x0 = np.asarray(x0, dtype=np.complex128)
        return cls(x=x0.copy(), z_sum=m * x0, u_sum=np.zeros_like(x0),
                   dual_proj=np.zeros(m, dtype=np.complex128))


def _sense_codes(senses, m: int) -> np.ndarray:
    if isinstance(senses, ConstraintSense):
        return np.full(m, _SENSE_CODE[senses])
    codes = np.array([_SENSE_CODE[s] for s in senses])
    if codes.size != m:
        raise InvalidProblemError("one sense per constraint required")
    return codes


def _shared_update(state: CompressedState, m: int, rho, objective, factor, prior):
    s = state.z_sum + state.u_sum
    if objective is None:
        x = s / m
    else:
        a0, b0 = objective
        if a0 is None:
            # minimum-norm objective: identity quadratic, zero linear term
            x = s / (m + 1.0 / rho)
        elif factor is not None:
            x = factor.solve(b0 + rho * s)
        else:
            from .admm import FactorCache
            x = FactorCache.build(a0, m, rho).solve(b0 + rho * s)
    return apply_prior(x, prior)


def _phase_of(delta: np.ndarray, mag: np.ndarray) -> np.ndarray:
    # deterministic phase 0 on (near-)vanishing measurements
    safe = mag > _DEGENERATE_ATOL
    return np.where(safe, delta / np.where(safe, mag, 1.0), 1.0 + 0.0j)


def _finish(state, x, m, cols, shift, phase, nsq):
    coeff = phase * shift / nsq
    z_sum = m * x - state.u_sum + cols @ coeff
    u_sum = state.u_sum + z_sum - m * x
    dual_proj = phase * shift
    gap = coeff - state.dual_proj / nsq
    consensus = float(np.sum((gap.real ** 2 + gap.imag ** 2) * nsq))
    return z_sum, u_sum, dual_proj, consensus


def step(state: CompressedState, cols: np.ndarray, rhs, senses,
         rho: Optional[float] = None, objective=None, factor=None,
         eps=None, prior: Optional[PriorSpec] = None) -> CompressedState:
    """One compressed consensus iteration over magnitude constraints.

    cols:   (n, m) matrix whose columns are the constraint vectors a_i
    rhs:    per-constraint values c_i (all senses compare |a_i^H x|^2 to c_i)
    senses: a single sense or one per constraint
    objective: None for pure feasibility (the shared update is the mean),
        ``(None, None)`` for the minimum-norm objective, or a pair (A0, b0)
        solved through ``factor`` when provided
    eps:    band half-widths for BOUNDED constraints
    """
    cols = np.asarray(cols, dtype=np.complex128)
    n, m = cols.shape
    rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (m,))
    codes = _sense_codes(senses, m)
    eps_arr = np.broadcast_to(np.asarray(0.0 if eps is None else eps, dtype=float), (m,))
    if np.any((codes == 2) & (eps_arr <= 0)):
        raise InvalidProblemError("BOUNDED constraints require eps > 0")
    if np.any(((codes == 0) | (codes == 1)) & (rhs < 0)):
        raise InvalidProblemError("equality/upper magnitude bounds must be nonnegative")
    if np.any((codes == 2) & (rhs + eps_arr < 0)):
        raise InvalidProblemError("empty magnitude band")
    nsq = np.sum(cols.real ** 2 + cols.imag ** 2, axis=0)
    if np.any(nsq == 0):
        raise InvalidProblemError("constraint columns must be nonzero")

    x = _shared_update(state, m, rho, objective, factor, prior)
    meas = cols.conj().T @ x
    delta = meas - state.dual_proj
    mag = np.abs(delta)
    phase = _phase_of(delta, mag)

    root = np.sqrt(np.maximum(rhs, 0.0))
    shift = root - mag
    le = codes == 0
    ge = codes == 3
    bnd = codes == 2
    shift[le] = np.minimum(shift[le], 0.0)
    shift[ge] = np.maximum(shift[ge], 0.0)
    if np.any(bnd):
        mag_sq = mag[bnd] ** 2
        lo_sq = rhs[bnd] - eps_arr[bnd]
        hi_sq = rhs[bnd] + eps_arr[bnd]
        tau = np.zeros(mag_sq.size)
        below = (mag_sq < lo_sq) & (lo_sq >= 0)   # vacuous lower bound if negative
        above = mag_sq > hi_sq
        tau[below] = np.sqrt(lo_sq[below]) - mag[bnd][below]
        tau[above] = np.sqrt(np.maximum(hi_sq[above], 0.0)) - mag[bnd][above]
        shift[bnd] = tau

    z_sum, u_sum, dual_proj, consensus = _finish(state, x, m, cols, shift, phase, nsq)
    with np.errstate(divide="ignore", invalid="ignore"):
        new_mag = mag + shift
        mult = np.where(shift != 0.0,
                        np.where(new_mag > 0, (mag / new_mag - 1.0) / nsq, np.inf),
                        0.0)
    return CompressedState(x=x, z_sum=z_sum, u_sum=u_sum, dual_proj=dual_proj,
                           consensus_sq=consensus, mult=mult)


def step_gaussian(state: CompressedState, cols: np.ndarray, y, rho: float,
                  prior: Optional[PriorSpec] = None) -> CompressedState:
    """One compressed iteration of the noise-penalized magnitude variant.

    Each projection estimates its own noise term; the optimal multiplier is
    the unique real root of a cubic, which requires rho > max_i y_i |a_i|^2.
    """
    cols = np.asarray(cols, dtype=np.complex128)
    n, m = cols.shape
    y = np.broadcast_to(np.asarray(y, dtype=float), (m,))
    nsq = np.sum(cols.real ** 2 + cols.imag ** 2, axis=0)
    if not rho > np.max(y * nsq):
        raise ConfigurationError("rho must exceed max_i y_i |a_i|^2")

    x = _shared_update(state, m, rho, None, None, prior)
    meas = cols.conj().T @ x
    delta = meas - state.dual_proj
    d = delta.real ** 2 + delta.imag ** 2
    mu = _cubic_mu_arrays(y, rho, nsq, d)
    scale = mu / (rho + mu * nsq)
    coeff = -scale * delta
    z_sum = m * x - state.u_sum + cols @ coeff
    u_sum = state.u_sum + z_sum - m * x
    dual_proj = -(mu * nsq / (rho + mu * nsq)) * delta
    gap = coeff - state.dual_proj / nsq
    consensus = float(np.sum((gap.real ** 2 + gap.imag ** 2) * nsq))
    return CompressedState(x=x, z_sum=z_sum, u_sum=u_sum, dual_proj=dual_proj,
                           consensus_sq=consensus, mult=mu)
