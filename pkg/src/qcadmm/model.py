"""Problem data model: quadratic constraints, evaluation, KKT diagnostics, file I/O.

A problem instance is

    minimize    x^H A0 x - 2 Re{b0^H x}
    subject to  x^H Ai x - 2 Re{bi^H x}  (<= | >= | == | within +-eps of)  ci

over complex (or real, embedded as complex) vectors x.  All matrices are dense
Hermitian.  Constraints whose matrix is a rank-one outer product a a^H with
b = 0 carry the vector ``a`` so that downstream solvers can use the cheap
magnitude-constraint updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InvalidProblemError

#: Relative tolerance used when declaring a single constraint satisfied.
FEASIBILITY_RTOL = 1e-6

_HERMITIAN_RTOL = 1e-12
_RANK1_RTOL = 1e-10


class ConstraintSense(Enum):
    LESS_EQUAL = "le"
    GREATER_EQUAL = "ge"
    EQUAL = "eq"
    BOUNDED = "bounded"


def as_vector(x, n: Optional[int] = None, name: str = "vector") -> np.ndarray:
    """Validate and return a read-only complex 1-D array."""
    v = np.array(x, dtype=np.complex128, copy=True)
    if v.ndim != 1 or v.size == 0:
        raise InvalidProblemError(f"{name} must be a nonempty 1-D array")
    if not np.all(np.isfinite(v)):
        raise InvalidProblemError(f"{name} has non-finite entries")
    if n is not None and v.size != n:
        raise InvalidProblemError(f"{name} has length {v.size}, expected {n}")
    v.setflags(write=False)
    return v


def hermitian(a, n: Optional[int] = None, name: str = "matrix") -> np.ndarray:
    """Validate, symmetrize and return a read-only Hermitian matrix.

    The input must already be conjugate-symmetric to within a relative
    tolerance of 1e-12; symmetrization then removes the remaining rounding
    noise, and is exact (bitwise) for inputs that are already Hermitian.
    """
    m = np.array(a, dtype=np.complex128, copy=True)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise InvalidProblemError(f"{name} must be a square matrix")
    if not np.all(np.isfinite(m)):
        raise InvalidProblemError(f"{name} has non-finite entries")
    if n is not None and m.shape[0] != n:
        raise InvalidProblemError(f"{name} has size {m.shape[0]}, expected {n}")
    scale = np.linalg.norm(m)
    if np.linalg.norm(m - m.conj().T) > _HERMITIAN_RTOL * max(1.0, scale):
        raise InvalidProblemError(f"{name} is not Hermitian")
    h = (m + m.conj().T) / 2.0
    h.setflags(write=False)
    return h


def standard_complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly symmetric complex normal samples with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


@dataclass(frozen=True)
class QuadraticConstraint:
    """One quadratic constraint  x^H A x - 2 Re{b^H x}  (sense)  c.

    ``eps`` is the half-width of the admissible band for BOUNDED constraints
    and ignored otherwise.  ``a`` is set when A = a a^H and b = 0.
    """

    A: np.ndarray
    b: np.ndarray
    c: float
    sense: ConstraintSense
    eps: float = 0.0
    a: Optional[np.ndarray] = None

    def __post_init__(self):
        A = hermitian(self.A, name="constraint matrix")
        b = as_vector(self.b, n=A.shape[0], name="constraint linear term")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))
        if not isinstance(self.sense, ConstraintSense):
            raise InvalidProblemError(f"unknown sense {self.sense!r}")
        if self.sense is ConstraintSense.BOUNDED and not self.eps > 0:
            raise InvalidProblemError("BOUNDED constraints require eps > 0")
        if self.a is not None:
            a = as_vector(self.a, n=A.shape[0], name="rank-one factor")
            object.__setattr__(self, "a", a)
            if np.linalg.norm(b) != 0.0:
                raise InvalidProblemError("rank-one constraints require b = 0")
            err = np.linalg.norm(A - np.outer(a, a.conj()))
            if err > _RANK1_RTOL * max(np.linalg.norm(A), 1e-300):
                raise InvalidProblemError("A does not match a a^H for the given factor")

    @classmethod
    def rank_one(cls, a, c: float, sense: ConstraintSense, eps: float = 0.0):
        """Build |a^H x|^2 (sense) c from its factor alone."""
        a = as_vector(a, name="rank-one factor")
        A = np.outer(a, a.conj())
        A = (A + A.conj().T) / 2.0
        return cls(A=A, b=np.zeros(a.size), c=c, sense=sense, eps=eps, a=a)

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class QcqpProblem:
    """Objective pair (a0, b0) plus a non-empty sequence of constraints."""

    a0: np.ndarray
    b0: np.ndarray
    constraints: tuple
    field: str = "complex"

    def __post_init__(self):
        a0 = hermitian(self.a0, name="objective matrix")
        b0 = as_vector(self.b0, n=a0.shape[0], name="objective linear term")
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if len(self.constraints) == 0:
            raise InvalidProblemError("at least one constraint is required")
        for q in self.constraints:
            if q.n != a0.shape[0]:
                raise InvalidProblemError("constraint dimension mismatch")
        if self.field not in ("complex", "real"):
            raise InvalidProblemError("field must be 'complex' or 'real'")

    @property
    def n(self) -> int:
        return self.a0.shape[0]

    @property
    def m(self) -> int:
        return len(self.constraints)

    def canonical(self) -> "QcqpProblem":
        """Rewrite every GREATER_EQUAL constraint as LESS_EQUAL by negation.

        The rank-one marker is dropped on flipped constraints because the
        negated matrix is no longer of the form a a^H.
        """
        out = []
        for q in self.constraints:
            if q.sense is ConstraintSense.GREATER_EQUAL:
                out.append(QuadraticConstraint(A=-q.A, b=-q.b, c=-q.c,
                                               sense=ConstraintSense.LESS_EQUAL))
            else:
                out.append(q)
        return QcqpProblem(self.a0, self.b0, tuple(out), self.field)


def eval_constraint(q: QuadraticConstraint, x) -> float:
    """Signed residual x^H A x - 2 Re{b^H x} - c.

    Non-positive means satisfied for LESS_EQUAL; |residual| <= eps means
    satisfied for BOUNDED.
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.shape != (q.n,):
        raise InvalidProblemError(f"point has shape {x.shape}, expected ({q.n},)")
    quad = np.vdot(x, q.A @ x).real
    lin = np.vdot(q.b, x).real
    return float(quad - 2.0 * lin - q.c)


def violation(q: QuadraticConstraint, x) -> float:
    """Sense-aware constraint violation (0 when satisfied)."""
    r = eval_constraint(q, x)
    if q.sense is ConstraintSense.LESS_EQUAL:
        return max(0.0, r)
    if q.sense is ConstraintSense.GREATER_EQUAL:
        return max(0.0, -r)
    if q.sense is ConstraintSense.EQUAL:
        return abs(r)
    return max(0.0, abs(r) - q.eps)


def is_feasible(q: QuadraticConstraint, x, rtol: float = FEASIBILITY_RTOL) -> bool:
    """Feasibility declaration, relative to max(1, |c|)."""
    return violation(q, x) <= rtol * max(1.0, abs(q.c))


def max_violation(p: QcqpProblem, x) -> float:
    return max(violation(q, x) for q in p.constraints)


def objective_value(p: QcqpProblem, x) -> float:
    x = np.asarray(x, dtype=np.complex128)
    return float(np.vdot(x, p.a0 @ x).real - 2.0 * np.vdot(p.b0, x).real)


@dataclass(frozen=True)
class SolveReport:
    """Outcome of a solver run.

    ``consensus_residual`` is the summed squared disagreement between the
    per-constraint copies and the shared iterate; ``successive_diff`` the
    last step length of the shared iterate.  ``mse_db`` and ``violations``
    are filled by drivers that know a ground truth / count band violations.
    """

    x: np.ndarray
    iterations_phase1: int
    iterations_phase2: int
    consensus_residual: float
    successive_diff: float
    kkt_stationarity: float
    max_violation: float
    objective: float
    wall_time: float
    phase1_feasible: bool = True
    mse_db: Optional[float] = None
    violations: Optional[int] = None

    def __post_init__(self):
        for name in ("consensus_residual", "successive_diff", "max_violation"):
            if getattr(self, name) < 0:
                raise InvalidProblemError(f"{name} must be nonnegative")


class KktResidual(NamedTuple):
    stationarity: float
    complementarity: float
    dual_feasibility: float
    primal_feasibility: float


def kkt_residual(p: QcqpProblem, x, mu: Sequence[float]) -> KktResidual:
    """Residuals of the first-order optimality system at (x, mu).

    The multipliers are interpreted in the canonical orientation, i.e.
    GREATER_EQUAL constraints are negated internally first.  Multipliers of
    EQUAL constraints are sign-free; BOUNDED constraints carry a single
    signed multiplier (positive when the upper bound is active) and are
    exempt from the dual-feasibility check.
    """
    pc = p.canonical()
    x = np.asarray(x, dtype=np.complex128)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (pc.m,):
        raise InvalidProblemError(f"expected {pc.m} multipliers, got {mu.shape}")
    grad = pc.a0 @ x - pc.b0
    comp = 0.0
    dual = 0.0
    primal = 0.0
    for mui, q in zip(mu, pc.constraints):
        grad = grad + mui * (q.A @ x - q.b)
        r = eval_constraint(q, x)
        primal = max(primal, violation(q, x))
        if q.sense is ConstraintSense.LESS_EQUAL:
            comp = max(comp, abs(mui * r))
            dual = max(dual, -mui)
        elif q.sense is ConstraintSense.EQUAL:
            comp = max(comp, abs(mui * r))
        else:  # BOUNDED: slack is measured against the active bound
            if mui != 0.0:
                comp = max(comp, abs(mui * (r - np.sign(mui) * q.eps)))
    return KktResidual(float(np.linalg.norm(grad)), float(comp),
                       float(max(0.0, dual)), float(primal))


# ---------------------------------------------------------------------------
# Instance file format (JSON).  Complex scalars are stored as [re, im] pairs,
# matrices row-major; writers rely on repr-based round-trip full precision.

def encode_vector(v) -> list:
    v = np.asarray(v, dtype=np.complex128)
    return [[float(z.real), float(z.imag)] for z in v]


def decode_vector(data) -> np.ndarray:
    return np.array([complex(re, im) for re, im in data], dtype=np.complex128)


def encode_matrix(m) -> list:
    m = np.asarray(m, dtype=np.complex128)
    return [encode_vector(row) for row in m]


def decode_matrix(data) -> np.ndarray:
    return np.array([decode_vector(row) for row in data], dtype=np.complex128)


def problem_to_dict(p: QcqpProblem) -> dict:
    cons = []
    for q in p.constraints:
        entry: dict = {"c": q.c, "sense": q.sense.value}
        if q.a is not None:
            entry["a"] = encode_vector(q.a)
        else:
            entry["A"] = encode_matrix(q.A)
            entry["b"] = encode_vector(q.b)
        if q.sense is ConstraintSense.BOUNDED:
            entry["eps"] = q.eps
        cons.append(entry)
    return {
        "kind": "qcqp",
        "n": p.n,
        "field": p.field,
        "objective": {"A": encode_matrix(p.a0), "b": encode_vector(p.b0)},
        "constraints": cons,
    }


def problem_from_dict(data: dict) -> QcqpProblem:
    n = int(data["n"])
    a0 = decode_matrix(data["objective"]["A"])
    b0 = decode_vector(data["objective"]["b"])
    cons = []
    for entry in data["constraints"]:
        sense = ConstraintSense(entry["sense"])
        eps = float(entry.get("eps", 0.0))
        if "a" in entry:
            cons.append(QuadraticConstraint.rank_one(
                decode_vector(entry["a"]), float(entry["c"]), sense, eps))
        else:
            b = decode_vector(entry["b"]) if "b" in entry else np.zeros(n)
            cons.append(QuadraticConstraint(
                A=decode_matrix(entry["A"]), b=b, c=float(entry["c"]),
                sense=sense, eps=eps))
    return QcqpProblem(a0, b0, tuple(cons), data.get("field", "complex"))


def save_problem(p: QcqpProblem, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem_to_dict(p), fh)


def load_problem(path) -> QcqpProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))
