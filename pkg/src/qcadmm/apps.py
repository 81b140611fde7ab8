"""Application drivers: feasibility pursuit, multicast beamforming, phase retrieval.

Each driver assembles the matching consensus engine, runs the two-phase
scheme where applicable, and verifies the returned point against the raw
problem data (not against internal state).  Drivers that can construct a
feasible starting point keep a running incumbent: the best feasible iterate
by objective is what gets reported.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import rank1
from .admm import SolverConfig, run
from .errors import InvalidProblemError
from .model import (ConstraintSense, QcqpProblem, QuadraticConstraint, SolveReport,
                    decode_matrix, decode_vector, encode_matrix, encode_vector,
                    problem_from_dict, problem_to_dict, standard_complex_normal)
from .rank1 import CompressedState, PriorSpec

NOISE_MODELS = ("noiseless", "bounded", "gaussian")


@dataclass(frozen=True)
class FppInstance:
    """Full-rank indefinite inequality constraints with an embedded feasible point."""

    matrices: np.ndarray   # (m, n, n) Hermitian
    rhs: np.ndarray        # (m,)
    x_feas: np.ndarray     # (n,) point used to build the rhs; kept for checks

    @property
    def n(self) -> int:
        return self.matrices.shape[1]

    @property
    def m(self) -> int:
        return self.matrices.shape[0]

    def to_problem(self) -> QcqpProblem:
        n = self.n
        cons = tuple(
            QuadraticConstraint(A=A, b=np.zeros(n), c=float(c),
                                sense=ConstraintSense.LESS_EQUAL)
            for A, c in zip(self.matrices, self.rhs))
        return QcqpProblem(np.eye(n), np.zeros(n), cons)


@dataclass(frozen=True)
class BeamformingInstance:
    """Receiver channels plus optional protected-user channels."""

    channels: np.ndarray            # (n, m) columns h_i
    primary: Optional[np.ndarray]   # (n, l) columns g_k, or None
    snr_target: float = 1.0         # tau: |h_i^H w|^2 >= tau
    interference_cap: float = 1.0   # eta: |g_k^H w|^2 <= eta

    @property
    def n(self) -> int:
        return self.channels.shape[0]

    @property
    def m(self) -> int:
        return self.channels.shape[1]

    @property
    def l(self) -> int:
        return 0 if self.primary is None else self.primary.shape[1]


@dataclass(frozen=True)
class PhaseRetrievalInstance:
    """Squared-magnitude measurements y_i of |a_i^H s|^2 under a noise model."""

    sensing: np.ndarray          # (n, m) columns a_i
    y: np.ndarray                # (m,)
    noise: str = "noiseless"
    eps: Optional[float] = None  # band half-width for the bounded model
    snr_db: Optional[float] = None
    truth: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.sensing.shape[0]

    @property
    def m(self) -> int:
        return self.sensing.shape[1]


# ---------------------------------------------------------------------------
# Instance generation.


def gen_fpp(n: int, m: int, seed: int = 0) -> FppInstance:
    """Random indefinite constraints guaranteed non-empty by construction."""
    rng = np.random.default_rng(seed)
    x_feas = standard_complex_normal(rng, n)
    mats = np.empty((m, n, n), dtype=np.complex128)
    rhs = np.empty(m)
    for i in range(m):
        raw = standard_complex_normal(rng, (n, n)) * np.sqrt(2.0)  # entries CN(0,1)
        mats[i] = (raw + raw.conj().T) / 2.0
        slack = abs(rng.standard_normal())
        rhs[i] = float(np.vdot(x_feas, mats[i] @ x_feas).real) - slack
    return FppInstance(matrices=mats, rhs=rhs, x_feas=x_feas)


def gen_mb(n: int, m: int, l: int = 0, seed: int = 0, snr_target: float = 1.0,
           interference_cap: float = 1.0) -> BeamformingInstance:
    rng = np.random.default_rng(seed)
    channels = standard_complex_normal(rng, (n, m))
    primary = standard_complex_normal(rng, (n, l)) if l > 0 else None
    return BeamformingInstance(channels=channels, primary=primary,
                               snr_target=snr_target,
                               interference_cap=interference_cap)


def gen_pr(n: int, m: int, noise: str = "noiseless", seed: int = 0,
           eps: float = 0.5, snr_db: float = 20.0) -> PhaseRetrievalInstance:
    if noise not in NOISE_MODELS:
        raise InvalidProblemError(f"unknown noise model {noise!r}")
    rng = np.random.default_rng(seed)
    truth = standard_complex_normal(rng, n)
    sensing = standard_complex_normal(rng, (n, m))
    clean = np.abs(sensing.conj().T @ truth) ** 2
    if noise == "noiseless":
        return PhaseRetrievalInstance(sensing, clean, "noiseless", truth=truth)
    if noise == "bounded":
        return PhaseRetrievalInstance(sensing, np.rint(clean), "bounded",
                                      eps=eps, truth=truth)
    # white Gaussian measurement noise at the requested SNR (in expectation)
    sigma = np.linalg.norm(clean) * 10.0 ** (-snr_db / 20.0) / np.sqrt(m)
    y = clean + sigma * rng.standard_normal(m)
    return PhaseRetrievalInstance(sensing, y, "gaussian", snr_db=snr_db, truth=truth)


def gen_instance(kind: str, n: int, m: int, l: int = 0, noise: Optional[str] = None,
                 seed: int = 0, **kwargs):
    if kind == "fpp":
        return gen_fpp(n, m, seed)
    if kind == "mb":
        return gen_mb(n, m, l, seed, **kwargs)
    if kind == "pr":
        return gen_pr(n, m, noise or "noiseless", seed, **kwargs)
    raise InvalidProblemError(f"unknown instance kind {kind!r}")


# ---------------------------------------------------------------------------
# Metrics.


def alignment_error(x, s) -> float:
    """min over a global phase of ||e^{j t} x - s||^2, in closed form."""
    x = np.asarray(x, dtype=np.complex128)
    s = np.asarray(s, dtype=np.complex128)
    if x.shape != s.shape:
        raise InvalidProblemError("length mismatch")
    raw = (np.vdot(x, x).real + np.vdot(s, s).real - 2.0 * abs(np.vdot(s, x)))
    return max(0.0, float(raw))


def metric_mse(x, s) -> float:
    """Phase-aligned error in dB, floored at -300 for exact matches."""
    err = alignment_error(x, s)
    return max(10.0 * np.log10(max(err, 1e-30)), -300.0)


def pr_violation_values(inst: PhaseRetrievalInstance, x) -> np.ndarray:
    vals = np.abs(inst.sensing.conj().T @ np.asarray(x, dtype=np.complex128)) ** 2
    resid = np.abs(vals - inst.y)
    if inst.noise == "bounded":
        return np.maximum(0.0, resid - inst.eps)
    if inst.noise == "gaussian":
        return np.zeros(inst.m)   # the noise variable absorbs any residual
    return resid


def mb_violation_values(inst: BeamformingInstance, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.complex128)
    snr = np.abs(inst.channels.conj().T @ w) ** 2
    out = np.maximum(0.0, inst.snr_target - snr)
    if inst.primary is not None:
        interf = np.abs(inst.primary.conj().T @ w) ** 2
        out = np.concatenate([out, np.maximum(0.0, interf - inst.interference_cap)])
    return out


def spectral_init(sensing, y, iters: int = 200, rng=None) -> np.ndarray:
    """Leading eigenvector of sum_i y_i a_i a_i^H, scaled to the measured energy.

    Uses power iteration with matrix-vector products only, so the working set
    stays O(m + n).
    """
    sensing = np.asarray(sensing, dtype=np.complex128)
    y = np.asarray(y, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(0)
    v = standard_complex_normal(rng, sensing.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = sensing @ (y * (sensing.conj().T @ v))
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
    scale = np.sqrt(max(float(np.mean(y)), 0.0))
    return v * scale


# ---------------------------------------------------------------------------
# Driver helpers.


class _AppTrace:
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


def _loop(state, stepper, max_iter, tol, trace=None, phase=1, objective_fn=None,
          stop_fn=None):
    """Iterate a compressed stepper until the iterate settles.

    ``stop_fn(state)`` may end the loop early (e.g. on feasibility) and
    doubles as the incumbent hook.
    """
    successive = np.inf
    it = 0
    for t in range(1, max_iter + 1):
        new = stepper(state)
        successive = float(np.linalg.norm(new.x - state.x))
        state = new
        it = t
        if trace:
            obj = objective_fn(state.x) if objective_fn else 0.0
            trace.emit(phase, state.consensus_sq, successive, obj)
        if stop_fn is not None and stop_fn(state):
            break
        if successive < tol:
            break
    return state, it, successive


def _norm_sq(v) -> float:
    v = np.asarray(v)
    return float(np.sum(v.real ** 2 + v.imag ** 2))


def _rank1_stationarity(cols, x, mult, rho) -> float:
    """Stationarity norm of A0=I, b0=0 under recovered multipliers rho*mult."""
    if mult is None:
        return np.inf
    meas = cols.conj().T @ x
    grad = x + cols @ (rho * mult * meas)
    return float(np.linalg.norm(grad))


# ---------------------------------------------------------------------------
# Drivers.


def fpp_solve(inst: FppInstance, cfg: Optional[SolverConfig] = None,
              trace_path=None) -> SolveReport:
    """Minimum-norm feasible point of the indefinite inequality system."""
    cfg = cfg if cfg is not None else SolverConfig()
    return run(inst.to_problem(), cfg, trace_path=trace_path, keep_best=True)


def mb_initial_point(inst: BeamformingInstance, seed: int) -> np.ndarray:
    """Random direction scaled onto the feasible side of every SNR constraint."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        w = standard_complex_normal(rng, inst.n)
        gains = np.abs(inst.channels.conj().T @ w)
        smallest = float(np.min(gains))
        if smallest > 1e-9:
            return w * (np.sqrt(inst.snr_target) / smallest)
    raise InvalidProblemError("could not scale a start onto the constraints")


def mb_single_group(inst: BeamformingInstance, cfg: Optional[SolverConfig] = None,
                    rho: Optional[float] = None, trace_path=None) -> SolveReport:
    """Minimum-power beamformer meeting every receiver's SNR floor.

    The SNR target is absorbed into the channel columns so the engine works
    with unit bounds; the start is feasible by scaling, so every reported
    iterate is feasible and no worse than the start.
    """
    if inst.l:
        raise InvalidProblemError("use mb_secondary for protected-user instances")
    cfg = cfg if cfg is not None else SolverConfig()
    t0 = time.perf_counter()
    m = inst.m
    # absorb the SNR target into the channels; the variable is unchanged
    cols = inst.channels / np.sqrt(inst.snr_target)
    rho = rho if rho is not None else 2.0 * np.sqrt(m)
    w0 = mb_initial_point(inst, cfg.seed)   # min |cols^H w0| = 1 by construction
    best = w0.copy()
    best_norm = _norm_sq(w0)

    trace = _AppTrace(trace_path) if trace_path else None
    state = CompressedState.initial(w0, m)

    def keep_incumbent(st):
        nonlocal best, best_norm
        nrm = _norm_sq(st.x)
        if nrm < best_norm and np.max(mb_violation_values(inst, st.x)) <= cfg.tol_feasibility:
            best, best_norm = st.x.copy(), nrm
        return False

    try:
        state, iters, successive = _loop(
            state,
            lambda st: rank1.step(st, cols, 1.0, ConstraintSense.GREATER_EQUAL,
                                  rho=rho, objective=(None, None)),
            cfg.max_iter_phase2, cfg.tol_successive, trace=trace, phase=2,
            objective_fn=_norm_sq, stop_fn=keep_incumbent)
    finally:
        if trace:
            trace.close()

    kkt = _rank1_stationarity(cols, state.x, state.mult, rho)
    return SolveReport(
        x=best, iterations_phase1=0, iterations_phase2=iters,
        consensus_residual=float(state.consensus_sq or 0.0),
        successive_diff=successive if np.isfinite(successive) else 0.0,
        kkt_stationarity=kkt,
        max_violation=float(np.max(mb_violation_values(inst, best))),
        objective=best_norm, wall_time=time.perf_counter() - t0)


def mb_secondary(inst: BeamformingInstance, cfg: Optional[SolverConfig] = None,
                 rho: Optional[float] = None, trace_path=None) -> SolveReport:
    """Minimum-power beamformer with SNR floors and interference caps.

    No feasible start is constructible here, so a penalty-free feasibility
    phase with restarts precedes the objective-aware phase.
    """
    if inst.l < 1:
        raise InvalidProblemError("secondary instances need at least one protected user")
    cfg = cfg if cfg is not None else SolverConfig()
    t0 = time.perf_counter()
    m, l = inst.m, inst.l
    total = m + l
    cols = np.concatenate([inst.channels, inst.primary], axis=1)
    senses = ([ConstraintSense.GREATER_EQUAL] * m + [ConstraintSense.LESS_EQUAL] * l)
    rhs = np.concatenate([np.full(m, inst.snr_target),
                          np.full(l, inst.interference_cap)])
    rho = rho if rho is not None else 2.0 * np.sqrt(total)
    rng = np.random.default_rng(cfg.seed)
    trace = _AppTrace(trace_path) if trace_path else None

    def feasible(w) -> bool:
        return float(np.max(mb_violation_values(inst, w))) <= cfg.tol_feasibility

    iters1 = 0
    found = False
    state = CompressedState.initial(np.zeros(inst.n, dtype=np.complex128), total)
    try:
        for _attempt in range(cfg.restarts_phase1):
            w0 = standard_complex_normal(rng, inst.n)
            state = CompressedState.initial(w0, total)
            if feasible(state.x):
                found = True
                break
            state, it, _ = _loop(
                state,
                lambda st: rank1.step(st, cols, rhs, senses, objective=None),
                cfg.max_iter_phase1, cfg.tol_successive, trace=trace, phase=1,
                objective_fn=_norm_sq, stop_fn=lambda st: feasible(st.x))
            iters1 += it
            if feasible(state.x):
                found = True
                break

        best = state.x.copy()
        best_norm = _norm_sq(best)
        iters2 = 0
        successive = 0.0
        if found:
            def keep_incumbent(st):
                nonlocal best, best_norm
                nrm = _norm_sq(st.x)
                if nrm < best_norm and feasible(st.x):
                    best, best_norm = st.x.copy(), nrm
                return False

            state, iters2, successive = _loop(
                state,
                lambda st: rank1.step(st, cols, rhs, senses, rho=rho,
                                      objective=(None, None)),
                cfg.max_iter_phase2, cfg.tol_successive, trace=trace, phase=2,
                objective_fn=_norm_sq, stop_fn=keep_incumbent)
    finally:
        if trace:
            trace.close()

    kkt = _rank1_stationarity(cols, state.x, state.mult, rho) if found else np.inf
    return SolveReport(
        x=best, iterations_phase1=iters1, iterations_phase2=iters2,
        consensus_residual=float(state.consensus_sq or 0.0),
        successive_diff=float(successive) if np.isfinite(successive) else 0.0,
        kkt_stationarity=kkt,
        max_violation=float(np.max(mb_violation_values(inst, best))),
        objective=_norm_sq(best), wall_time=time.perf_counter() - t0,
        phase1_feasible=found)


def pr_solve(inst: PhaseRetrievalInstance, cfg: Optional[SolverConfig] = None,
             prior: Optional[PriorSpec] = None, init=None,
             trace_path=None) -> SolveReport:
    """Recover a signal from squared magnitudes under the instance noise model.

    The default start is the spectral one (leading eigenvector of the
    measurement-weighted covariance).  The noiseless and banded models run
    pure feasibility iterations; the Gaussian model estimates a noise term
    per measurement with the penalty fixed by the cubic's uniqueness rule.
    """
    cfg = cfg if cfg is not None else SolverConfig(max_iter_phase2=100000)
    t0 = time.perf_counter()
    cols = inst.sensing
    m = inst.m
    if init is None:
        init = spectral_init(cols, inst.y, rng=np.random.default_rng(cfg.seed))
    x0 = np.asarray(init, dtype=np.complex128)

    gauss_cost = None
    if inst.noise == "gaussian":
        nsq = np.sum(cols.real ** 2 + cols.imag ** 2, axis=0)
        rho = 1.1 * float(np.max(inst.y * nsq))

        def stepper(st):
            return rank1.step_gaussian(st, cols, inst.y, rho, prior=prior)

        def gauss_cost(x):
            return 0.5 * float(np.sum((np.abs(cols.conj().T @ x) ** 2 - inst.y) ** 2))
    elif inst.noise == "bounded":
        def stepper(st):
            return rank1.step(st, cols, inst.y, ConstraintSense.BOUNDED,
                              objective=None, eps=inst.eps, prior=prior)
    else:
        def stepper(st):
            return rank1.step(st, cols, inst.y, ConstraintSense.EQUAL,
                              objective=None, prior=prior)

    state = CompressedState.initial(x0, m)
    iters = 0
    successive = 0.0
    trace = _AppTrace(trace_path) if trace_path else None
    try:
        already = (inst.noise in ("noiseless", "bounded")
                   and float(np.max(pr_violation_values(inst, x0))) <= cfg.tol_feasibility)
        if not already:
            state, iters, successive = _loop(
                state, stepper, cfg.max_iter_phase2, cfg.tol_successive,
                trace=trace, phase=1, objective_fn=gauss_cost)
    finally:
        if trace:
            trace.close()

    x = state.x
    viol = pr_violation_values(inst, x)
    count = int(np.sum(viol > cfg.tol_feasibility)) if inst.noise != "gaussian" else None
    mse = metric_mse(x, inst.truth) if inst.truth is not None else None
    objective = gauss_cost(x) if inst.noise == "gaussian" else 0.0
    # stationarity of the recovered multipliers: zero objective (or the noise
    # term absorbing the cost) makes the gradient a multiplier-weighted sum
    if state.mult is None:
        kkt = 0.0
    else:
        mult = np.where(np.isfinite(state.mult), state.mult, 0.0)
        kkt = float(np.linalg.norm(cols @ (mult * (cols.conj().T @ x))))
    phase1 = iters if inst.noise != "gaussian" else 0
    phase2 = iters if inst.noise == "gaussian" else 0
    return SolveReport(
        x=x, iterations_phase1=phase1, iterations_phase2=phase2,
        consensus_residual=float(state.consensus_sq or 0.0),
        successive_diff=float(successive) if np.isfinite(successive) else 0.0,
        kkt_stationarity=kkt,
        max_violation=float(np.max(viol)),
        objective=objective, wall_time=time.perf_counter() - t0,
        mse_db=mse, violations=count)


# ---------------------------------------------------------------------------
# Instance files.


def instance_to_dict(inst) -> dict:
    if isinstance(inst, FppInstance):
        data = problem_to_dict(inst.to_problem())
        data["kind"] = "fpp"
        data["x_feas"] = encode_vector(inst.x_feas)
        return data
    if isinstance(inst, BeamformingInstance):
        data = {"kind": "mb", "n": inst.n, "m": inst.m, "l": inst.l,
                "H": encode_matrix(inst.channels),
                "tau": inst.snr_target, "eta": inst.interference_cap}
        if inst.primary is not None:
            data["G"] = encode_matrix(inst.primary)
        return data
    if isinstance(inst, PhaseRetrievalInstance):
        data = {"kind": "pr", "n": inst.n, "m": inst.m,
                "A": encode_matrix(inst.sensing),
                "y": [float(v) for v in inst.y], "noise": inst.noise}
        if inst.eps is not None:
            data["eps"] = inst.eps
        if inst.snr_db is not None:
            data["snr_db"] = inst.snr_db
        if inst.truth is not None:
            data["s"] = encode_vector(inst.truth)
        return data
    if isinstance(inst, QcqpProblem):
        return problem_to_dict(inst)
    raise InvalidProblemError(f"cannot serialize {type(inst).__name__}")


def instance_from_dict(data: dict):
    kind = data.get("kind", "qcqp")
    if kind == "qcqp":
        return problem_from_dict(data)
    if kind == "fpp":
        prob = problem_from_dict(data)
        mats = np.stack([q.A for q in prob.constraints])
        rhs = np.array([q.c for q in prob.constraints])
        return FppInstance(matrices=mats, rhs=rhs,
                           x_feas=decode_vector(data["x_feas"]))
    if kind == "mb":
        primary = decode_matrix(data["G"]) if "G" in data else None
        return BeamformingInstance(channels=decode_matrix(data["H"]),
                                   primary=primary,
                                   snr_target=float(data.get("tau", 1.0)),
                                   interference_cap=float(data.get("eta", 1.0)))
    if kind == "pr":
        truth = decode_vector(data["s"]) if "s" in data else None
        return PhaseRetrievalInstance(
            sensing=decode_matrix(data["A"]),
            y=np.array([float(v) for v in data["y"]]),
            noise=data.get("noise", "noiseless"),
            eps=float(data["eps"]) if "eps" in data else None,
            snr_db=float(data["snr_db"]) if "snr_db" in data else None,
            truth=truth)
    raise InvalidProblemError(f"unknown instance kind {kind!r}")


def save_instance(inst, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(inst), fh)


def load_instance(path):
    with open(path, "r", encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))
