"""General consensus engine with per-constraint state and a two-phase driver.

Each constraint owns a copy z_i of the shared variable and a scaled dual u_i.
One iteration performs

    x   <- argmin of the objective plus rho * sum_i ||z_i - x + u_i||^2
    z_i <- projection of (x - u_i) onto constraint i        (in parallel)
    u_i <- u_i + (z_i - x)

The driver first runs penalty-free feasibility iterations (the x-update is
then a plain average) from random starts, restarting on stalls, and then
re-introduces the objective, warm-started at the feasible point.

Constraint projections are evaluated in batch: all active secular equations
advance in lockstep, which keeps the per-iteration cost at a few dense
matrix products.  Sums over constraints use numpy's pairwise reduction, so
results do not depend on any worker count.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, InfeasibleConstraintError, InvalidProblemError
from .model import (ConstraintSense, QcqpProblem, SolveReport, kkt_residual,
                    objective_value, standard_complex_normal)
from .qcqp1 import EigenCache, Qcqp1Status, _solve_equality_rotated, solve_constraint
from .rootfind import DEFAULT_TOL

_SENSE_LE, _SENSE_EQ, _SENSE_BND, _SENSE_GE = 0, 1, 2, 3
_DEGENERATE_ATOL = 1e-14


@dataclass
class ConsensusState:
    """Shared iterate plus per-constraint copies and scaled duals."""

    x: np.ndarray
    z: np.ndarray  # (m, n)
    u: np.ndarray  # (m, n)


@dataclass(frozen=True)
class FactorCache:
    """Cholesky factorization of A0 + m*rho*I, reused across iterations."""

    factor: tuple
    rho: float
    m: int

    @classmethod
    def build(cls, a0: np.ndarray, m: int, rho: float) -> "FactorCache":
        shifted = np.asarray(a0, dtype=np.complex128) + m * rho * np.eye(a0.shape[0])
        try:
            factor = scipy.linalg.cho_factor(shifted)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError(
                "A0 + m*rho*I is not positive definite; increase rho") from exc
        return cls(factor=factor, rho=rho, m=m)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self.factor, rhs)


@dataclass
class SolverConfig:
    """Engine parameters.  Tolerances are absolute.

    ``max_iter_phase1`` applies per restart; ``tol_feasibility`` is the
    maximum constraint violation accepted when declaring the feasibility
    phase done (and when recording incumbents).
    """

    rho: float = 1.0
    max_iter_phase1: int = 1000
    max_iter_phase2: int = 10000
    tol_successive: float = 1e-8
    tol_consensus: float = 1e-6
    tol_feasibility: float = 1e-6
    restarts_phase1: int = 10
    root_method: str = "bisection"
    seed: int = 0

    def __post_init__(self):
        positive = ("rho", "max_iter_phase1", "max_iter_phase2", "tol_successive",
                    "tol_consensus", "tol_feasibility", "restarts_phase1")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidProblemError(f"{name} must be positive")
        if self.root_method not in ("bisection", "newton"):
            raise InvalidProblemError("root_method must be 'bisection' or 'newton'")


# ---------------------------------------------------------------------------
# Public single-step operations.


def x_update(p: QcqpProblem, state: ConsensusState, rho: float,
             cache: FactorCache) -> np.ndarray:
    """Objective-aware shared-variable update (A0 + m rho I) x = b0 + rho*sum(z+u)."""
    rhs = p.b0 + rho * np.sum(state.z + state.u, axis=0)
    return cache.solve(rhs)


def x_update_feasibility(state: ConsensusState) -> np.ndarray:
    """Penalty-free shared-variable update: the mean of z_i + u_i."""
    return np.mean(state.z + state.u, axis=0)


def z_u_update(q, x, u_i, root_method: str = "bisection",
               cache: Optional[EigenCache] = None):
    """One constraint's copy/dual update; returns (z_new, u_new, solution)."""
    target = x - u_i
    sol = solve_constraint(q, target, root_method=root_method, cache=cache)
    z_new = sol.z
    u_new = u_i + (z_new - x)
    return z_new, u_new, sol


def residuals(state: ConsensusState, x_prev=None):
    """Summed squared consensus disagreement and the last step length."""
    diff = state.z - state.x[None, :]
    consensus = float(np.sum(diff.real ** 2 + diff.imag ** 2))
    successive = float(np.linalg.norm(state.x - x_prev)) if x_prev is not None else np.nan
    return consensus, successive


# ---------------------------------------------------------------------------
# Batched constraint machinery.


def _phi_rows(mu, eigs, trot, brot, rhs):
    den = 1.0 + mu[:, None] * eigs
    den = np.copysign(np.maximum(np.abs(den), 1e-300), den)
    num = trot + mu[:, None] * brot
    quad = np.sum(eigs * (num.real ** 2 + num.imag ** 2) / den ** 2, axis=1)
    lin = np.sum((brot.conj() * num).real / den, axis=1)
    return quad - 2.0 * lin - rhs


def _phi_prime_rows(mu, eigs, trot, brot):
    den = 1.0 + mu[:, None] * eigs
    den = np.copysign(np.maximum(np.abs(den), 1e-300), den)
    num = brot - eigs * trot
    return -2.0 * np.sum((num.real ** 2 + num.imag ** 2) / den ** 3, axis=1)


def _fix_nonfinite(f, mu, lo, hi):
    bad = ~np.isfinite(f)
    if np.any(bad):
        near_lo = np.abs(mu - lo) <= np.abs(mu - hi)
        f = np.where(bad, np.where(near_lo, np.inf, -np.inf), f)
    return f


def _expand_brackets(eigs, trot, brot, rhs):
    """Finite sign brackets for every row; geometric expansion on open ends."""
    emin = eigs[:, 0]
    emax = eigs[:, -1]
    lo = np.where(emax > 0, -1.0 / np.where(emax > 0, emax, 1.0), -np.inf)
    hi = np.where(emin < 0, -1.0 / np.where(emin < 0, emin, 1.0), np.inf)
    with np.errstate(all="ignore"):
        for sign in (1.0, -1.0):
            open_end = np.isinf(hi) if sign > 0 else np.isinf(lo)
            probe = sign
            for _ in range(200):
                if not np.any(open_end):
                    break
                f = _phi_rows(np.full(rhs.size, probe), eigs, trot, brot, rhs)
                if sign > 0:
                    found = open_end & (f <= 0)
                    hi[found] = probe
                    keep = open_end & ~found
                    lo[keep] = np.maximum(lo[keep], probe)
                else:
                    found = open_end & (f >= 0)
                    lo[found] = probe
                    keep = open_end & ~found
                    hi[keep] = np.minimum(hi[keep], probe)
                open_end = keep
                probe *= 2.0
            if np.any(open_end):
                raise InfeasibleConstraintError(
                    "no sign change while bracketing a constraint multiplier; "
                    "the constraint set may be empty")
    return lo, hi


def _lockstep_bisection(eigs, trot, brot, rhs, tol, max_iter=200):
    lo, hi = _expand_brackets(eigs, trot, brot, rhs)
    lo0, hi0 = lo.copy(), hi.copy()
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            if np.max(hi - lo) < tol:
                break
            mid = 0.5 * (lo + hi)
            f = _fix_nonfinite(_phi_rows(mid, eigs, trot, brot, rhs), mid, lo, hi)
            pos = f > 0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
    return 0.5 * (lo + hi), lo0, hi0


def _lockstep_newton(eigs, trot, brot, rhs, tol, max_iter=100):
    lo, hi = _expand_brackets(eigs, trot, brot, rhs)
    lo0, hi0 = lo.copy(), hi.copy()
    emin = eigs[:, 0]
    emax = eigs[:, -1]
    with np.errstate(all="ignore"):
        mu = np.where((emin < 0) & (emax > 0),
                      -(emin + emax) / (2.0 * emin * emax),
                      np.where(emax > 0, lo + 1.0, np.where(emin < 0, hi - 1.0, 0.0)))
        mu = np.where((mu <= lo) | (mu >= hi), 0.5 * (lo + hi), mu)
        done = np.zeros(rhs.size, dtype=bool)
        for _ in range(max_iter):
            f = _fix_nonfinite(_phi_rows(mu, eigs, trot, brot, rhs), mu, lo, hi)
            lo = np.where(~done & (f > 0), mu, lo)
            hi = np.where(~done & (f <= 0), mu, hi)
            fp = _phi_prime_rows(mu, eigs, trot, brot)
            merit = np.where(np.abs(fp) > 0, f * f / np.abs(fp), np.inf)
            done |= np.isfinite(f) & (merit < tol)
            if np.all(done):
                break
            cand = mu - f / fp
            bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
            cand = np.where(bad, 0.5 * (lo + hi), cand)
            mu = np.where(done, mu, cand)
        # polish converged rows: one guarded step squares the residual error
        # (the guard only needs to avoid the spectral-endpoint poles)
        if np.any(done):
            f = _fix_nonfinite(_phi_rows(mu, eigs, trot, brot, rhs), mu, lo, hi)
            fp = _phi_prime_rows(mu, eigs, trot, brot)
            cand = mu - f / fp
            slo = np.where(emax > 0, -1.0 / np.where(emax > 0, emax, 1.0), -np.inf)
            shi = np.where(emin < 0, -1.0 / np.where(emin < 0, emin, 1.0), np.inf)
            ok = done & np.isfinite(cand) & (cand > slo) & (cand < shi)
            mu = np.where(ok, cand, mu)
        if not np.all(done):
            for _ in range(200):
                width = hi - lo
                if np.max(np.where(done, 0.0, width)) < tol:
                    break
                mid = 0.5 * (lo + hi)
                f = _fix_nonfinite(_phi_rows(mid, eigs, trot, brot, rhs), mid, lo, hi)
                pos = ~done & (f > 0)
                neg = ~done & ~(f > 0)
                lo = np.where(pos, mid, lo)
                hi = np.where(neg, mid, hi)
            mu = np.where(done, mu, 0.5 * (lo + hi))
    return mu, lo0, hi0


class _StackedConstraints:
    """Constraint data reorganized for batched updates.

    General constraints are stored in canonical orientation (GREATER_EQUAL
    negated into LESS_EQUAL); rank-one magnitude constraints keep their
    native sense, which the closed-form update handles directly.  Reported
    multipliers are always canonical.
    """

    def __init__(self, p: QcqpProblem, root_method: str, tol: float = DEFAULT_TOL):
        self.m = p.m
        self.n = p.n
        self.root_method = root_method
        self.tol = tol
        gen_idx, r1_idx = [], []
        for i, q in enumerate(p.constraints):
            (r1_idx if q.a is not None else gen_idx).append(i)
        self.gen_idx = np.array(gen_idx, dtype=int)
        self.r1_idx = np.array(r1_idx, dtype=int)

        if self.gen_idx.size:
            qs = [p.constraints[i] for i in gen_idx]
            flip = np.array([q.sense is ConstraintSense.GREATER_EQUAL for q in qs])
            mats = [(-q.A if f else q.A) for q, f in zip(qs, flip)]
            caches = [EigenCache.from_matrix(mat) for mat in mats]
            self.g_basis = np.stack([c.basis for c in caches])
            self.g_eigs = np.stack([c.eigs for c in caches])
            bs = np.stack([(-q.b if f else q.b) for q, f in zip(qs, flip)])
            self.g_brot = np.einsum("gnk,gn->gk", self.g_basis.conj(), bs)
            self.g_rhs = np.array([(-q.c if f else q.c) for q, f in zip(qs, flip)])
            self.g_sense = np.array(
                [_SENSE_EQ if q.sense is ConstraintSense.EQUAL else
                 _SENSE_BND if q.sense is ConstraintSense.BOUNDED else _SENSE_LE
                 for q in qs])
            self.g_eps = np.array([q.eps for q in qs])

        if self.r1_idx.size:
            qs = [p.constraints[i] for i in r1_idx]
            self.r_cols = np.stack([q.a for q in qs])
            self.r_nsq = np.sum(self.r_cols.real ** 2 + self.r_cols.imag ** 2, axis=1)
            self.r_rhs = np.array([q.c for q in qs])
            codes = {ConstraintSense.LESS_EQUAL: _SENSE_LE,
                     ConstraintSense.EQUAL: _SENSE_EQ,
                     ConstraintSense.BOUNDED: _SENSE_BND,
                     ConstraintSense.GREATER_EQUAL: _SENSE_GE}
            self.r_sense = np.array([codes[q.sense] for q in qs])
            self.r_eps = np.array([q.eps for q in qs])
            empty = (((self.r_sense == _SENSE_LE) | (self.r_sense == _SENSE_EQ))
                     & (self.r_rhs < 0))
            empty |= (self.r_sense == _SENSE_BND) & (self.r_rhs + self.r_eps < 0)
            if np.any(empty):
                raise InfeasibleConstraintError(
                    "a magnitude constraint requires a negative squared value")

    # -- diagnostics -------------------------------------------------------

    def violations(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.m)
        if self.gen_idx.size:
            xrot = np.einsum("gnk,n->gk", self.g_basis.conj(), x)
            vals = (np.sum(self.g_eigs * (xrot.real ** 2 + xrot.imag ** 2), axis=1)
                    - 2.0 * np.sum((self.g_brot.conj() * xrot).real, axis=1))
            resid = vals - self.g_rhs
            viol = np.where(self.g_sense == _SENSE_EQ, np.abs(resid),
                            np.where(self.g_sense == _SENSE_BND,
                                     np.maximum(0.0, np.abs(resid) - self.g_eps),
                                     np.maximum(0.0, resid)))
            out[self.gen_idx] = viol
        if self.r1_idx.size:
            proj = np.sum(self.r_cols.conj() * x[None, :], axis=1)
            vals = proj.real ** 2 + proj.imag ** 2
            resid = vals - self.r_rhs
            viol = np.where(self.r_sense == _SENSE_EQ, np.abs(resid),
                            np.where(self.r_sense == _SENSE_BND,
                                     np.maximum(0.0, np.abs(resid) - self.r_eps),
                                     np.where(self.r_sense == _SENSE_GE,
                                              np.maximum(0.0, -resid),
                                              np.maximum(0.0, resid))))
            out[self.r1_idx] = viol
        return out

    # -- batched copy/dual round -------------------------------------------

    def z_round(self, x: np.ndarray, Z: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Update all copies and duals in place; returns canonical multipliers."""
        mu_all = np.zeros(self.m)
        if self.gen_idx.size:
            mu_all[self.gen_idx] = self._general_round(x, Z, U)
        if self.r1_idx.size:
            mu_all[self.r1_idx] = self._rank1_round(x, Z, U)
        return mu_all

    def _general_round(self, x, Z, U):
        idx = self.gen_idx
        zeta = x[None, :] - U[idx]
        trot = np.einsum("gnk,gn->gk", self.g_basis.conj(), zeta)
        phi0 = _phi_rows(np.zeros(idx.size), self.g_eigs, trot, self.g_brot, self.g_rhs)
        need = ((self.g_sense == _SENSE_EQ)
                | ((self.g_sense == _SENSE_LE) & (phi0 > 0))
                | ((self.g_sense == _SENSE_BND) & (np.abs(phi0) > self.g_eps)))
        mu = np.zeros(idx.size)
        if np.any(need):
            sub = np.nonzero(need)[0]
            rhs = self.g_rhs[sub].copy()
            bnd = self.g_sense[sub] == _SENSE_BND
            rhs[bnd] += np.where(phi0[sub][bnd] > 0, self.g_eps[sub][bnd],
                                 -self.g_eps[sub][bnd])
            eigs = self.g_eigs[sub]
            tr = trot[sub]
            br = self.g_brot[sub]
            if self.root_method == "newton":
                mu_sub, lo0, hi0 = _lockstep_newton(eigs, tr, br, rhs, self.tol)
            else:
                mu_sub, lo0, hi0 = _lockstep_bisection(eigs, tr, br, rhs, self.tol)
            # Rows whose bracket collapsed onto an endpoint may be in the
            # singular (free-block) case; redo those with the exact solver.
            suspicious = ((np.isfinite(lo0) & (mu_sub - lo0 <= 4 * self.tol))
                          | (np.isfinite(hi0) & (hi0 - mu_sub <= 4 * self.tol)))
            zrot_over = {}
            for j in np.nonzero(suspicious)[0]:
                zr, mu_j, _status = _solve_equality_rotated(
                    eigs[j], tr[j], br[j], rhs[j], self.root_method, self.tol)
                mu_sub[j] = mu_j
                zrot_over[j] = zr
            clamp = self.g_sense[sub] == _SENSE_LE
            mu_sub[clamp] = np.maximum(0.0, mu_sub[clamp])
            zrot = (tr + mu_sub[:, None] * br) / (1.0 + mu_sub[:, None] * eigs)
            for j, zr in zrot_over.items():
                zrot[j] = zr
            znew_sub = np.einsum("gnk,gk->gn", self.g_basis[sub], zrot)
            mu[sub] = mu_sub
            znew = zeta.copy()
            znew[sub] = znew_sub
        else:
            znew = zeta.copy()
        Z[idx] = znew
        U[idx] += znew - x[None, :]
        return mu

    def _rank1_round(self, x, Z, U):
        idx = self.r1_idx
        zeta = x[None, :] - U[idx]
        proj = np.sum(self.r_cols.conj() * zeta, axis=1)
        mag_sq = proj.real ** 2 + proj.imag ** 2
        mag = np.sqrt(mag_sq)
        c = self.r_rhs
        sense = self.r_sense
        # Active rows move their measured magnitude to `goal`.
        active = np.where(
            sense == _SENSE_EQ, np.ones_like(mag_sq, dtype=bool),
            np.where(sense == _SENSE_LE, mag_sq > c,
                     np.where(sense == _SENSE_GE, mag_sq < c,
                              np.abs(mag_sq - c) > self.r_eps)))
        goal = np.sqrt(np.maximum(
            np.where(sense == _SENSE_BND,
                     np.where(mag_sq > c, c + self.r_eps, c - self.r_eps), c),
            0.0))
        degen = active & (mag <= _DEGENERATE_ATOL)
        ok = active & ~degen
        coeff = np.zeros_like(proj)
        coeff[ok] = ((goal[ok] - mag[ok]) / (self.r_nsq[ok] * mag[ok])) * proj[ok]
        coeff[degen] = goal[degen] / self.r_nsq[degen]
        znew = zeta + coeff[:, None] * self.r_cols
        Z[idx] = znew
        U[idx] += znew - x[None, :]
        mu_native = np.zeros(idx.size)
        pos = ok & (goal > 0)
        mu_native[pos] = (mag[pos] / goal[pos] - 1.0) / self.r_nsq[pos]
        mu_native[ok & (goal == 0)] = np.inf
        mu_native[degen] = -1.0 / self.r_nsq[degen]
        # Canonical orientation flips the sign for native GREATER_EQUAL rows.
        return np.where(sense == _SENSE_GE, -mu_native, mu_native)


# ---------------------------------------------------------------------------
# Two-phase driver.


class _TraceWriter:
    header = ("iteration", "phase", "consensus_residual", "successive_diff",
              "objective")

    def __init__(self, path):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(self.header)
        self.count = 0

    def emit(self, phase, consensus, successive, objective):
        self.count += 1
        self.writer.writerow([self.count, phase, repr(consensus),
                              repr(successive), repr(objective)])

    def close(self):
        self.fh.close()


def run(p: QcqpProblem, cfg: SolverConfig, trace_path=None,
        keep_best: bool = False) -> SolveReport:
    """Two-phase consensus solve of a general problem.

    Phase 1 seeks any feasible point with penalty-free updates and random
    restarts; phase 2 minimizes the objective from the feasible warm start.
    With ``keep_best`` the best feasible iterate (by objective) is returned
    instead of the last one whenever the last iterate is worse or infeasible.
    """
    t_start = time.perf_counter()
    stacked = _StackedConstraints(p, cfg.root_method)
    rng = np.random.default_rng(cfg.seed)
    n, m = p.n, p.m
    trace = _TraceWriter(trace_path) if trace_path else None

    x = np.zeros(n, dtype=np.complex128)
    Z = np.zeros((m, n), dtype=np.complex128)
    U = np.zeros((m, n), dtype=np.complex128)
    mu_last = np.zeros(m)

    iters1 = 0
    feasible = False
    try:
        for _attempt in range(cfg.restarts_phase1):
            x = standard_complex_normal(rng, n)
            Z = standard_complex_normal(rng, (m, n))
            U = np.zeros((m, n), dtype=np.complex128)
            x_prev = x
            for _ in range(cfg.max_iter_phase1):
                x = np.mean(Z + U, axis=0)
                if np.max(stacked.violations(x)) <= cfg.tol_feasibility:
                    feasible = True
                    break
                mu_last = stacked.z_round(x, Z, U)
                iters1 += 1
                if trace:
                    diff = Z - x[None, :]
                    trace.emit(1, float(np.sum(diff.real ** 2 + diff.imag ** 2)),
                               float(np.linalg.norm(x - x_prev)),
                               objective_value(p, x))
                x_prev = x
            if feasible:
                break

        best_x = None
        best_obj = np.inf
        if feasible and keep_best:
            best_x, best_obj = x.copy(), objective_value(p, x)

        iters2 = 0
        successive = np.nan
        if feasible:
            cache = FactorCache.build(p.a0, m, cfg.rho)
            for _ in range(cfg.max_iter_phase2):
                x_new = cache.solve(p.b0 + cfg.rho * np.sum(Z + U, axis=0))
                successive = float(np.linalg.norm(x_new - x))
                x = x_new
                mu_last = stacked.z_round(x, Z, U)
                iters2 += 1
                if keep_best:
                    if np.max(stacked.violations(x)) <= cfg.tol_feasibility:
                        obj = objective_value(p, x)
                        if obj < best_obj:
                            best_x, best_obj = x.copy(), obj
                if trace:
                    diff = Z - x[None, :]
                    trace.emit(2, float(np.sum(diff.real ** 2 + diff.imag ** 2)),
                               successive, objective_value(p, x))
                if successive < cfg.tol_successive:
                    break
    finally:
        if trace:
            trace.close()

    x_report = x
    if keep_best and best_x is not None:
        final_viol = float(np.max(stacked.violations(x)))
        if final_viol > cfg.tol_feasibility or objective_value(p, x) > best_obj:
            x_report = best_x

    diff = Z - x_report[None, :]
    consensus = float(np.sum(diff.real ** 2 + diff.imag ** 2))
    kkt = kkt_residual(p, x_report, cfg.rho * mu_last)
    return SolveReport(
        x=x_report,
        iterations_phase1=iters1,
        iterations_phase2=iters2,
        consensus_residual=consensus,
        successive_diff=float(successive) if np.isfinite(successive) else 0.0,
        kkt_stationarity=kkt.stationarity,
        max_violation=float(np.max(stacked.violations(x_report))),
        objective=objective_value(p, x_report),
        wall_time=time.perf_counter() - t_start,
        phase1_feasible=feasible,
    )
