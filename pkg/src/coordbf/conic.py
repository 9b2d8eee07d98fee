"""Standard-form second-order cone programs.

A :class:`ConicProgram` holds real variables, a linear objective (always
maximized), affine equalities, affine inequalities ``e >= 0`` and second-order
cone blocks ``||tail||_2 <= head``. Every affine quantity is an :class:`Affine`,
a sparse ``{variable index: coefficient}`` map plus a constant, so programs are
assembled with ordinary arithmetic::

    prog = ConicProgram()
    x, y = prog.add_var("x"), prog.add_var("y")
    prog.add_soc(1.0, [x, y])
    prog.maximize(x + y)
    res = solve(prog)

Complex quantities never appear in a program directly. A complex vector
variable is stored as two real blocks and enters through :func:`lift_complex`.

Solving is delegated to Clarabel, an interior-point conic solver.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from numbers import Real
from typing import Iterable, Sequence

import clarabel
import numpy as np
from scipy import sparse

__all__ = [
    "Affine",
    "ComplexVar",
    "ConicError",
    "ConicProgram",
    "SolveResult",
    "SolveStatus",
    "lift_complex",
    "solve",
]


class ConicError(ValueError):
    """Malformed conic program data."""


class Affine:
    """Sparse affine expression ``sum_i coef_i * x_i + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def var(cls, index: int) -> "Affine":
        return cls({index: 1.0})

    @staticmethod
    def wrap(value: "Affine | float") -> "Affine":
        if isinstance(value, Affine):
            return value
        if isinstance(value, (Real, np.floating, np.integer)):
            return Affine(const=float(value))
        raise ConicError(f"cannot use {value!r} as an affine expression")

    @property
    def is_constant(self) -> bool:
        return not any(self.terms.values())

    def _combine(self, other, sign: float) -> "Affine":
        other = Affine.wrap(other)
        terms = dict(self.terms)
        for i, c in other.terms.items():
            terms[i] = terms.get(i, 0.0) + sign * c
        return Affine(terms, self.const + sign * other.const)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return Affine.wrap(other)._combine(self, -1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, scalar):
        if isinstance(scalar, Affine):
            raise ConicError("product of two affine expressions is not affine")
        s = float(scalar)
        return Affine({i: s * c for i, c in self.terms.items()}, s * self.const)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms.items())

    def __repr__(self) -> str:
        parts = [f"{c:+.6g}*x{i}" for i, c in sorted(self.terms.items()) if c]
        if self.const or not parts:
            parts.append(f"{self.const:+.6g}")
        return "Affine(" + " ".join(parts) + ")"


def affine_sum(items: Iterable["Affine | float"]) -> Affine:
    total = Affine()
    for item in items:
        total = total + item
    return total


@dataclass(frozen=True)
class ComplexVar:
    """Complex vector variable stored as real and imaginary blocks."""

    re: tuple[Affine, ...]
    im: tuple[Affine, ...]

    def __len__(self) -> int:
        return len(self.re)

    def real_parts(self) -> list[Affine]:
        """``[Re f; Im f]`` stacked, the real image of the vector."""
        return list(self.re) + list(self.im)

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.array([r.value(x) + 1j * i.value(x) for r, i in zip(self.re, self.im)])


def lift_complex(h: Sequence[complex], f: ComplexVar | tuple) -> tuple[Affine, Affine]:
    """Real and imaginary parts of the product ``h @ f`` as affine expressions.

    ``h`` is a numeric complex row vector, ``f`` a complex variable given either
    as a :class:`ComplexVar` or as a pair ``(re_parts, im_parts)``.
    """
    re_f, im_f = (f.re, f.im) if isinstance(f, ComplexVar) else f
    h = np.asarray(h, dtype=complex).ravel()
    if not (len(h) == len(re_f) == len(im_f)):
        raise ConicError(
            f"length mismatch: channel has {len(h)} entries, variable has "
            f"{len(re_f)} real and {len(im_f)} imaginary parts"
        )
    real = Affine()
    imag = Affine()
    for hk, a, b in zip(h, re_f, im_f):
        a, b = Affine.wrap(a), Affine.wrap(b)
        real = real + hk.real * a - hk.imag * b
        imag = imag + hk.imag * a + hk.real * b
    return real, imag


@dataclass
class SocBlock:
    head: Affine
    tail: list[Affine]
    label: str


class ConicProgram:
    """Linear objective, affine equalities/inequalities and SOC blocks."""

    def __init__(self):
        self.var_names: list[str] = []
        self.objective = Affine()
        self.equalities: list[tuple[Affine, str]] = []
        self.inequalities: list[tuple[Affine, str]] = []
        self.soc_blocks: list[SocBlock] = []

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    def add_var(self, name: str, nonneg: bool = False) -> Affine:
        self.var_names.append(name)
        v = Affine.var(len(self.var_names) - 1)
        if nonneg:
            self.add_ineq(v, "nonneg")
        return v

    def add_vars(self, name: str, n: int, nonneg: bool = False) -> list[Affine]:
        return [self.add_var(f"{name}[{i}]", nonneg) for i in range(n)]

    def add_complex_var(self, name: str, n: int) -> ComplexVar:
        re = self.add_vars(f"Re {name}", n)
        im = self.add_vars(f"Im {name}", n)
        return ComplexVar(tuple(re), tuple(im))

    def _check(self, expr, what: str) -> Affine:
        expr = Affine.wrap(expr)
        for i, c in expr.terms.items():
            if not 0 <= i < self.n_vars:
                raise ConicError(f"{what}: variable index {i} out of range")
            if not math.isfinite(c):
                raise ConicError(f"{what}: non-finite coefficient on {self.var_names[i]}")
        if not math.isfinite(expr.const):
            raise ConicError(f"{what}: non-finite constant term")
        return expr

    def maximize(self, expr) -> None:
        self.objective = self._check(expr, "objective")

    def add_eq(self, expr, label: str = "eq") -> int:
        """Record ``expr == 0``."""
        self.equalities.append((self._check(expr, label), label))
        return len(self.equalities) - 1

    def add_ineq(self, expr, label: str = "ineq") -> int:
        """Record ``expr >= 0``."""
        self.inequalities.append((self._check(expr, label), label))
        return len(self.inequalities) - 1

    def add_soc(self, head, tail: Sequence, label: str = "soc") -> int:
        """Record ``||tail||_2 <= head``; an empty tail means ``head >= 0``."""
        head = self._check(head, label)
        tail = [self._check(t, label) for t in tail]
        self.soc_blocks.append(SocBlock(head, tail, label))
        return len(self.soc_blocks) - 1

    def hyperbolic(self, z: Sequence, x, y, label: str = "hyperbolic") -> int:
        """Record ``z.z <= x*y, x >= 0, y >= 0`` as ``||[2z; x-y]|| <= x+y``."""
        x, y = Affine.wrap(x), Affine.wrap(y)
        tail = [2.0 * Affine.wrap(zi) for zi in z] + [x - y]
        return self.add_soc(x + y, tail, label)

    def counts(self) -> Counter:
        """Number of constraints per label, across all constraint classes."""
        c: Counter = Counter()
        for _, label in self.equalities:
            c[label] += 1
        for _, label in self.inequalities:
            c[label] += 1
        for block in self.soc_blocks:
            c[block.label] += 1
        return c

    def violation(self, x: np.ndarray) -> float:
        """Largest constraint violation of the point ``x``."""
        worst = 0.0
        for e, _ in self.equalities:
            worst = max(worst, abs(e.value(x)))
        for e, _ in self.inequalities:
            worst = max(worst, -e.value(x))
        for b in self.soc_blocks:
            tail = math.hypot(*(t.value(x) for t in b.tail)) if b.tail else 0.0
            worst = max(worst, tail - b.head.value(x))
        return worst

    def to_text(self) -> str:
        """Plain-text standard-form listing, for debugging and diffing."""

        def fmt(e: Affine) -> str:
            parts = [f"{c:+.17g} {self.var_names[i]}" for i, c in sorted(e.terms.items()) if c]
            if e.const or not parts:
                parts.append(f"{e.const:+.17g}")
            return " ".join(parts)

        lines = [f"# variables {self.n_vars}"]
        lines += [f"var {i} {name}" for i, name in enumerate(self.var_names)]
        lines.append(f"maximize {fmt(self.objective)}")
        lines += [f"eq [{label}] {fmt(e)} == 0" for e, label in self.equalities]
        lines += [f"ineq [{label}] {fmt(e)} >= 0" for e, label in self.inequalities]
        for b in self.soc_blocks:
            tail = "; ".join(fmt(t) for t in b.tail)
            lines.append(f"soc [{b.label}] || {tail} || <= {fmt(b.head)}")
        return "\n".join(lines) + "\n"


class SolveStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    NUMERICAL_FAILURE = "NumericalFailure"
    ITER_LIMIT = "IterLimit"


@dataclass
class SolveResult:
    status: SolveStatus
    x: np.ndarray
    objective_value: float
    residuals: dict = field(default_factory=dict)
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    def value(self, expr) -> float:
        return Affine.wrap(expr).value(self.x)


_STATUS_MAP = {
    "Solved": SolveStatus.OPTIMAL,
    "PrimalInfeasible": SolveStatus.PRIMAL_INFEASIBLE,
    "AlmostPrimalInfeasible": SolveStatus.PRIMAL_INFEASIBLE,
    "DualInfeasible": SolveStatus.DUAL_INFEASIBLE,
    "AlmostDualInfeasible": SolveStatus.DUAL_INFEASIBLE,
    "MaxIterations": SolveStatus.ITER_LIMIT,
    "MaxTime": SolveStatus.ITER_LIMIT,
}


# Stalled solves are retried with tighter KKT refinement, then stronger
# regularization. Tolerances never change between attempts.
_RETRYABLE = {"AlmostSolved", "InsufficientProgress", "NumericalError"}
_REFINE = {
    "iterative_refinement_reltol": 1e-16,
    "iterative_refinement_abstol": 1e-16,
    "iterative_refinement_max_iter": 50,
}
_RETRY_SETTINGS = ({}, _REFINE, {**_REFINE, "static_regularization_constant": 1e-9})


def _infeasible(n: int) -> SolveResult:
    return SolveResult(SolveStatus.PRIMAL_INFEASIBLE, np.full(n, np.nan), -math.inf)


def solve(
    prog: ConicProgram,
    tol_primal: float = 1e-8,
    tol_dual: float = 1e-8,
    tol_gap: float = 1e-8,
    max_iter: int = 200,
) -> SolveResult:
    """Solve ``prog``; infeasibility is reported through the status."""
    n = prog.n_vars
    rows: list[Affine] = []
    cones = []

    # Constraints without variables are decided here; the solver never sees them.
    eqs = []
    for e, _ in prog.equalities:
        if e.is_constant:
            if abs(e.const) > tol_primal:
                return _infeasible(n)
        else:
            eqs.append(e)
    ineqs = []
    for e, _ in prog.inequalities:
        if e.is_constant:
            if e.const < -tol_primal:
                return _infeasible(n)
        else:
            ineqs.append(e)
    socs = []
    for b in prog.soc_blocks:
        if b.head.is_constant and all(t.is_constant for t in b.tail):
            if math.hypot(*(t.const for t in b.tail)) - b.head.const > tol_primal:
                return _infeasible(n)
        elif not b.tail:
            ineqs.append(b.head)
        else:
            socs.append(b)

    if eqs:
        rows += eqs
        cones.append(clarabel.ZeroConeT(len(eqs)))
    if ineqs:
        rows += ineqs
        cones.append(clarabel.NonnegativeConeT(len(ineqs)))
    for b in socs:
        rows.append(b.head)
        rows += b.tail
        cones.append(clarabel.SecondOrderConeT(1 + len(b.tail)))

    # Clarabel form: A x + s = b, s in K. Row e = a.x + c maps to A = -a, b = c.
    ri, ci, vals = [], [], []
    bvec = np.empty(len(rows))
    for r, e in enumerate(rows):
        for i, c in e.terms.items():
            if c:
                ri.append(r)
                ci.append(i)
                vals.append(-c)
        bvec[r] = e.const
    A = sparse.csc_matrix((vals, (ri, ci)), shape=(len(rows), n))
    q = np.zeros(n)
    for i, c in prog.objective.terms.items():
        q[i] = -c
    P = sparse.csc_matrix((n, n))

    if not rows:
        # Unconstrained linear objective.
        if any(q):
            return SolveResult(SolveStatus.DUAL_INFEASIBLE, np.zeros(n), math.inf)
        return SolveResult(SolveStatus.OPTIMAL, np.zeros(n), prog.objective.const)

    for overrides in _RETRY_SETTINGS:
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.max_iter = int(max_iter)
        settings.tol_feas = min(tol_primal, tol_dual)
        settings.tol_gap_abs = tol_gap
        settings.tol_gap_rel = tol_gap
        settings.max_threads = 1
        for key, val in overrides.items():
            setattr(settings, key, val)
        sol = clarabel.DefaultSolver(P, q, A, bvec, cones, settings).solve()
        if str(sol.status) not in _RETRYABLE:
            break
    status = _STATUS_MAP.get(str(sol.status), SolveStatus.NUMERICAL_FAILURE)
    x = np.asarray(sol.x, dtype=float)
    obj = prog.objective.value(x) if status is SolveStatus.OPTIMAL else math.nan
    if status is SolveStatus.PRIMAL_INFEASIBLE:
        obj = -math.inf
    elif status is SolveStatus.DUAL_INFEASIBLE:
        obj = math.inf
    gap = abs(sol.obj_val - sol.obj_val_dual) / max(1.0, abs(sol.obj_val))
    residuals = {
        "primal": float(sol.r_prim),
        "dual": float(sol.r_dual),
        "gap": float(gap),
        # dual objective of the maximization, an upper bound up to the dual residual
        "dual_bound": float(prog.objective.const - sol.obj_val_dual),
        "violation": prog.violation(x) if status is SolveStatus.OPTIMAL else math.nan,
    }
    return SolveResult(status, x, obj, residuals, int(sol.iterations))
