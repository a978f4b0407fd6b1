"""Small dense linear programs solved by a two-phase simplex with Bland's rule.

This is the single numerical backend for verification, bound computation and
geometric queries.  Problems here are dense and small (at most a few thousand
variables), so a plain tableau with deterministic pivoting is preferred over
an external solver: identical inputs always produce identical solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import meter

FEAS_TOL = 1e-7  # max violation allowed in a returned primal
OPT_TOL = 1e-9  # reduced-cost threshold
PIVOT_CAP = 10**6

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class LpError(ValueError):
    pass


class LpPivotLimit(LpError):
    """Raised when the pivot cap is hit; never returns a wrong answer."""


@dataclass
class LinearProgram:
    """min/max objective . x subject to rows of (coeffs, relation, rhs) and bounds."""

    n: int
    objective: np.ndarray | None = None
    sense: str = "min"
    rows: list = field(default_factory=list)
    lower: list = field(default_factory=list)  # per-variable, None = free
    upper: list = field(default_factory=list)

    def __post_init__(self):
        if self.n < 1:
            raise LpError("LP needs at least one variable")
        if self.objective is None:
            self.objective = np.zeros(self.n)
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.n,) or not np.isfinite(self.objective).all():
            raise LpError("objective must be a finite n-vector")
        if self.sense not in ("min", "max"):
            raise LpError("sense must be 'min' or 'max'")
        if not self.lower:
            self.lower = [None] * self.n
        if not self.upper:
            self.upper = [None] * self.n

    def add(self, coeffs, rel: str, rhs: float) -> None:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.n,):
            raise LpError(f"constraint length {coeffs.shape} != ({self.n},)")
        if rel not in ("<=", ">=", "="):
            raise LpError(f"unknown relation {rel!r}")
        if not (np.isfinite(coeffs).all() and np.isfinite(rhs)):
            raise LpError("constraint coefficients must be finite")
        self.rows.append((coeffs, rel, float(rhs)))

    def set_bounds(self, j: int, lo=None, hi=None) -> None:
        self.lower[j] = None if lo is None else float(lo)
        self.upper[j] = None if hi is None else float(hi)


@dataclass(frozen=True)
class LpSolution:
    status: str
    value: float | None
    primal: np.ndarray | None


def _inequality_form(lp: LinearProgram):
    """All constraints as A x <= b (equalities split, bounds appended)."""
    rows, rhs = [], []
    for coeffs, rel, b in lp.rows:
        if rel in ("<=", "="):
            rows.append(coeffs)
            rhs.append(b)
        if rel in (">=", "="):
            rows.append(-coeffs)
            rhs.append(-b)
    for j in range(lp.n):
        e = np.zeros(lp.n)
        if lp.upper[j] is not None:
            e_up = e.copy()
            e_up[j] = 1.0
            rows.append(e_up)
            rhs.append(lp.upper[j])
        if lp.lower[j] is not None:
            e_lo = e.copy()
            e_lo[j] = -1.0
            rows.append(e_lo)
            rhs.append(-lp.lower[j])
    if not rows:
        raise LpError("LP has no constraints; refusing an unbounded feasible set")
    return np.array(rows, dtype=float), np.array(rhs, dtype=float)


def _pivot(T: np.ndarray, basis: np.ndarray, i: int, j: int) -> None:
    T[i] /= T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, T[i])
    basis[i] = j


def _run_simplex(T, basis, cost, active: int):
    """Bland's-rule iterations on tableau columns [0, active); returns status."""
    pivots = 0
    while True:
        cb = cost[basis]
        red = cost[:active] - cb @ T[:, :active]
        entering = np.flatnonzero(red < -OPT_TOL)
        if entering.size == 0:
            meter.add(pivots + 1)
            return OPTIMAL
        j = int(entering[0])
        col = T[:, j]
        rows = np.flatnonzero(col > OPT_TOL)
        if rows.size == 0:
            meter.add(pivots + 1)
            return UNBOUNDED
        ratios = np.maximum(T[rows, -1], 0.0) / col[rows]
        best = ratios.min()
        tied = rows[ratios <= best + 1e-12]
        i = int(tied[np.argmin(basis[tied])])  # lowest basis index breaks ties
        _pivot(T, basis, i, j)
        pivots += 1
        if pivots > PIVOT_CAP:
            raise LpPivotLimit("simplex exceeded the pivot cap")


def solve(lp: LinearProgram) -> LpSolution:
    """Solve the LP; status is always correct, never a silently wrong answer."""
    A, b = _inequality_form(lp)
    m, n = A.shape
    sign = 1.0 if lp.sense == "min" else -1.0
    c = sign * lp.objective

    flip = b < 0
    A = np.where(flip[:, None], -A, A)
    b = np.where(flip, -b, b)
    slack_sign = np.where(flip, -1.0, 1.0)
    art_rows = np.flatnonzero(flip)
    n_art = art_rows.size

    # columns: u (n) | v (n) | slack (m) | artificial (n_art) | rhs
    width = 2 * n + m + n_art + 1
    T = np.zeros((m, width))
    T[:, :n] = A
    T[:, n : 2 * n] = -A
    T[np.arange(m), 2 * n + np.arange(m)] = slack_sign
    for k, r in enumerate(art_rows):
        T[r, 2 * n + m + k] = 1.0
    T[:, -1] = b

    basis = np.empty(m, dtype=int)
    basis[~flip] = 2 * n + np.flatnonzero(~flip)
    basis[art_rows] = 2 * n + m + np.arange(n_art)

    ncols = width - 1
    if n_art:
        cost1 = np.zeros(ncols)
        cost1[2 * n + m :] = 1.0
        status = _run_simplex(T, basis, cost1, active=ncols)
        if status != OPTIMAL:  # phase 1 is bounded below by zero
            raise LpError("phase-1 simplex failed unexpectedly")
        if cost1[basis] @ T[:, -1] > FEAS_TOL:
            return LpSolution(INFEASIBLE, None, None)
        # drive leftover artificials out of the basis (degenerate rows)
        for i in range(m):
            if basis[i] >= 2 * n + m:
                candidates = np.flatnonzero(np.abs(T[i, : 2 * n + m]) > OPT_TOL)
                if candidates.size:
                    _pivot(T, basis, i, int(candidates[0]))
                # else: redundant zero row, leave the artificial at value 0

    cost2 = np.zeros(ncols)
    cost2[:n] = c
    cost2[n : 2 * n] = -c
    status = _run_simplex(T, basis, cost2, active=2 * n + m)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, None, None)

    full = np.zeros(ncols)
    full[basis] = T[:, -1]
    x = full[:n] - full[n : 2 * n]
    value = float(lp.objective @ x)

    if _max_violation(lp, x) > 100 * FEAS_TOL:
        raise LpError("simplex produced a primal with excessive constraint violation")
    return LpSolution(OPTIMAL, value, x)


def _max_violation(lp: LinearProgram, x: np.ndarray) -> float:
    worst = 0.0
    for coeffs, rel, b in lp.rows:
        r = float(coeffs @ x) - b
        if rel == "<=":
            worst = max(worst, r)
        elif rel == ">=":
            worst = max(worst, -r)
        else:
            worst = max(worst, abs(r))
    for j in range(lp.n):
        if lp.lower[j] is not None:
            worst = max(worst, lp.lower[j] - x[j])
        if lp.upper[j] is not None:
            worst = max(worst, x[j] - lp.upper[j])
    return worst
