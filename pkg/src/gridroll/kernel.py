"""Small dense LP/MILP kernel used by every scheduling stage.

The solver is deliberately self-contained: a bounded-variable two-phase
simplex on a dense tableau, plus a best-first branch-and-bound layer for
binary variables, plus a chord-based piecewise-linear reduction for
separable convex quadratic costs.  Problems in this package are desk
scale (tens of rows, hundreds to a couple thousand columns), where a
dense tableau with vectorised row operations is simple and fast enough.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

# Tolerances shared by the simplex and the branch-and-bound layer.
FEAS_TOL = 1e-7
PIVOT_TOL = 1e-9
RCOST_TOL = 1e-9
INT_TOL = 1e-6
GAP_TOL = 1e-6

# Consecutive degenerate pivots before switching to Bland's rule.
_BLAND_TRIGGER = 60

LE, EQ, GE = "<=", "==", ">="
_RELATIONS = (LE, EQ, GE)


class MalformedModel(ValueError):
    """Model references a bad variable index, bound, or coefficient."""


class DegenerateInterval(ValueError):
    """PWL interval is empty or too short to carry segments."""


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"


@dataclass(frozen=True)
class Row:
    """One linear constraint: sum(coef * x[idx]) relation rhs."""

    coeffs: tuple[tuple[int, float], ...]
    relation: str
    rhs: float


@dataclass(frozen=True)
class LinearProgram:
    """min c.x + const  s.t. rows, lo <= x <= hi (hi may be +inf)."""

    num_vars: int
    objective: np.ndarray
    rows: tuple[Row, ...]
    lower: np.ndarray
    upper: np.ndarray
    objective_constant: float = 0.0

    def validate(self) -> None:
        n = self.num_vars
        if n < 0:
            raise MalformedModel("negative variable count")
        for arr, name in ((self.objective, "objective"), (self.lower, "lower"), (self.upper, "upper")):
            if arr.shape != (n,):
                raise MalformedModel(f"{name} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(self.objective)):
            raise MalformedModel("objective has non-finite entries")
        if not np.all(np.isfinite(self.lower)):
            raise MalformedModel("lower bounds must be finite")
        if np.any(np.isnan(self.upper)):
            raise MalformedModel("upper bounds contain NaN")
        if np.any(self.upper < self.lower - FEAS_TOL):
            raise MalformedModel("some upper bound lies below its lower bound")
        for k, row in enumerate(self.rows):
            if row.relation not in _RELATIONS:
                raise MalformedModel(f"row {k}: unknown relation {row.relation!r}")
            if not np.isfinite(row.rhs):
                raise MalformedModel(f"row {k}: non-finite rhs")
            for idx, coef in row.coeffs:
                if not 0 <= idx < n:
                    raise MalformedModel(f"row {k}: variable index {idx} out of range")
                if not np.isfinite(coef):
                    raise MalformedModel(f"row {k}: non-finite coefficient")


@dataclass(frozen=True)
class MilpProblem:
    """A LinearProgram plus the set of variables restricted to {0, 1}."""

    lp: LinearProgram
    binaries: tuple[int, ...]

    def validate(self) -> None:
        self.lp.validate()
        for j in self.binaries:
            if not 0 <= j < self.lp.num_vars:
                raise MalformedModel(f"binary index {j} out of range")
            if self.lp.lower[j] < -FEAS_TOL or self.lp.upper[j] > 1 + FEAS_TOL:
                raise MalformedModel(f"binary variable {j} must have bounds inside [0, 1]")


@dataclass(frozen=True)
class Solution:
    status: SolveStatus
    objective_value: float
    values: np.ndarray | None
    dual_objective: float | None = None
    nodes: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass(frozen=True)
class PwlSegment:
    """Chord linearisation of a*x^2 + b*x on [lo, hi].

    breakpoints has len(slopes) + 1 entries; slopes are nondecreasing
    because the underlying quadratic is convex.  error_bound is the worst
    gap between a chord and the quadratic, attained at segment midpoints.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    error_bound: float

    def value_at_lo(self, a: float, b: float) -> float:
        x0 = float(self.breakpoints[0])
        return a * x0 * x0 + b * x0


class LpBuilder:
    """Incremental construction of LinearProgram / MilpProblem objects."""

    def __init__(self) -> None:
        self._obj: list[float] = []
        self._lo: list[float] = []
        self._hi: list[float] = []
        self._rows: list[Row] = []
        self._binaries: list[int] = []
        self._const = 0.0

    @property
    def num_vars(self) -> int:
        return len(self._obj)

    def add_var(self, lo: float = 0.0, hi: float = np.inf, obj: float = 0.0, *, binary: bool = False) -> int:
        idx = len(self._obj)
        self._obj.append(float(obj))
        self._lo.append(float(lo))
        self._hi.append(float(hi))
        if binary:
            self._binaries.append(idx)
        return idx

    def add_row(self, coeffs: Iterable[tuple[int, float]], relation: str, rhs: float) -> None:
        self._rows.append(Row(tuple((int(i), float(c)) for i, c in coeffs), relation, float(rhs)))

    def add_constant(self, value: float) -> None:
        self._const += float(value)

    def add_objective(self, var: int, coef: float) -> None:
        self._obj[var] += float(coef)

    def build_lp(self) -> LinearProgram:
        lp = LinearProgram(
            num_vars=len(self._obj),
            objective=np.asarray(self._obj, dtype=float),
            rows=tuple(self._rows),
            lower=np.asarray(self._lo, dtype=float),
            upper=np.asarray(self._hi, dtype=float),
            objective_constant=self._const,
        )
        lp.validate()
        return lp

    def build_milp(self) -> MilpProblem:
        prob = MilpProblem(lp=self.build_lp(), binaries=tuple(self._binaries))
        prob.validate()
        return prob


def pwl_convexify(a: float, b: float, lo: float, hi: float, segments: int = 32) -> PwlSegment:
    """Chord PWL model of the convex quadratic a*x^2 + b*x over [lo, hi]."""
    if a <= 0:
        raise MalformedModel("quadratic coefficient must be positive")
    if segments < 1:
        raise MalformedModel("segment count must be at least 1")
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi - lo < 1e-12:
        raise DegenerateInterval(f"interval [{lo}, {hi}] cannot carry a PWL model")
    xs = np.linspace(lo, hi, segments + 1)
    # Chord slope over [x_k, x_{k+1}] of a*x^2 + b*x is a*(x_k + x_{k+1}) + b.
    slopes = a * (xs[:-1] + xs[1:]) + b
    width = (hi - lo) / segments
    return PwlSegment(breakpoints=xs, slopes=slopes, error_bound=a * width * width / 4.0)


def add_pwl_term(builder: LpBuilder, expr: Sequence[tuple[int, float]], pwl: PwlSegment,
                 a: float, b: float, weight: float = 1.0) -> None:
    """Add weight * (a*u^2 + b*u) to the objective, u given by expr.

    Encodes the chord model with fill-in-order segment variables; because
    the slopes are nondecreasing a minimiser fills segments left to right
    without binaries.  Adds one linking equality row.
    """
    lo = float(pwl.breakpoints[0])
    widths = np.diff(pwl.breakpoints)
    seg_vars = []
    for w, s in zip(widths, pwl.slopes):
        seg_vars.append(builder.add_var(0.0, float(w), weight * float(s)))
    coeffs = list(expr) + [(v, -1.0) for v in seg_vars]
    builder.add_row(coeffs, EQ, lo)
    builder.add_constant(weight * pwl.value_at_lo(a, b))


# ---------------------------------------------------------------------------
# Simplex core
# ---------------------------------------------------------------------------


class _Prepared:
    """Row data of an LP in oriented standard form, reusable across nodes."""

    __slots__ = ("n", "c", "A", "rhs", "rels", "const")

    def __init__(self, lp: LinearProgram):
        self.n = lp.num_vars
        self.c = lp.objective.copy()
        m = len(lp.rows)
        self.A = np.zeros((m, self.n))
        self.rhs = np.zeros(m)
        self.rels = []
        for i, row in enumerate(lp.rows):
            for idx, coef in row.coeffs:
                self.A[i, idx] += coef
            self.rhs[i] = row.rhs
            self.rels.append(row.relation)
        self.const = lp.objective_constant


def _simplex_phase(tab: np.ndarray, xB: np.ndarray, basis: np.ndarray, at_upper: np.ndarray,
                   ub: np.ndarray, cost: np.ndarray, allowed: np.ndarray,
                   max_iters: int) -> SolveStatus:
    """Run one simplex phase in place.  Returns OPTIMAL/UNBOUNDED/ITER_LIMIT."""
    m, n_total = tab.shape
    in_basis = np.zeros(n_total, dtype=bool)
    in_basis[basis] = True
    bland = False
    stall = 0
    for _ in range(max_iters):
        rc = cost - cost[basis] @ tab
        enterable = allowed & ~in_basis
        gain = np.where(at_upper, rc, -rc)
        gain[~enterable] = -np.inf
        if bland:
            cand = np.nonzero(enterable & (gain > RCOST_TOL))[0]
            if cand.size == 0:
                return SolveStatus.OPTIMAL
            q = int(cand[0])
        else:
            q = int(np.argmax(gain))
            if gain[q] <= RCOST_TOL:
                return SolveStatus.OPTIMAL
        direction = -1.0 if at_upper[q] else 1.0
        d = direction * tab[:, q]

        # Ratio test: basic variables hitting their lower or upper bound,
        # and the entering variable flipping to its own opposite bound.
        t_rows = np.full(m, np.inf)
        pos = d > PIVOT_TOL
        if np.any(pos):
            t_rows[pos] = np.maximum(xB[pos], 0.0) / d[pos]
        neg = d < -PIVOT_TOL
        if np.any(neg):
            ub_basic = ub[basis[neg]]
            room = ub_basic - xB[neg]
            finite = np.isfinite(ub_basic)
            t = np.full(room.shape, np.inf)
            t[finite] = np.maximum(room[finite], 0.0) / (-d[neg][finite])
            t_rows[neg] = t
        t_flip = ub[q] if np.isfinite(ub[q]) else np.inf
        t_row_min = float(t_rows.min()) if m else np.inf
        t_star = min(t_row_min, t_flip)
        if not np.isfinite(t_star):
            return SolveStatus.UNBOUNDED

        if t_star < PIVOT_TOL:
            stall += 1
            if stall > _BLAND_TRIGGER:
                bland = True
        else:
            stall = 0
            bland = False

        if t_flip <= t_row_min + 1e-12:
            # Bound flip: entering variable jumps to its other bound.
            xB -= d * t_flip
            at_upper[q] = not at_upper[q]
            continue

        hit = np.nonzero(t_rows <= t_star + 1e-12)[0]
        if bland:
            r = int(hit[np.argmin(basis[hit])])
        else:
            r = int(hit[np.argmax(np.abs(d[hit]))])
        p = int(basis[r])

        xB -= d * t_star
        enter_val = (ub[q] - t_star) if at_upper[q] else t_star
        # Leaving variable parks at whichever bound it hit.
        at_upper[p] = d[r] < 0
        in_basis[p] = False
        piv = tab[r, q]
        tab[r] /= piv
        col = tab[:, q].copy()
        col[r] = 0.0
        tab -= np.outer(col, tab[r])
        basis[r] = q
        in_basis[q] = True
        at_upper[q] = False
        xB[r] = enter_val
    return SolveStatus.ITER_LIMIT


def _solve_prepared(prep: _Prepared, lower: np.ndarray, upper: np.ndarray,
                    max_iters: int = 50_000) -> Solution:
    n = prep.n
    m = prep.A.shape[0]
    shift = lower
    ub_struct = upper - lower
    ub_struct = np.where(ub_struct < 0, 0.0, ub_struct)

    b_hat = prep.rhs - prep.A @ shift
    A = prep.A.copy()
    rels = list(prep.rels)
    for i in range(m):
        if b_hat[i] < 0:
            A[i] = -A[i]
            b_hat[i] = -b_hat[i]
            if rels[i] == LE:
                rels[i] = GE
            elif rels[i] == GE:
                rels[i] = LE

    # Column layout: structurals, then slack/surplus, then artificials.
    n_slack = sum(1 for r in rels if r != EQ)
    n_art = sum(1 for r in rels if r != LE)
    n_total = n + n_slack + n_art
    tab = np.zeros((m, n_total))
    tab[:, :n] = A
    ub = np.full(n_total, np.inf)
    ub[:n] = ub_struct
    basis = np.zeros(m, dtype=np.int64)
    id_cols = np.zeros(m, dtype=np.int64)
    s = n
    a = n + n_slack
    art_cols = []
    for i in range(m):
        if rels[i] == LE:
            tab[i, s] = 1.0
            basis[i] = s
            id_cols[i] = s
            s += 1
        elif rels[i] == GE:
            tab[i, s] = -1.0
            tab[i, a] = 1.0
            basis[i] = a
            id_cols[i] = a
            art_cols.append(a)
            s += 1
            a += 1
        else:
            tab[i, a] = 1.0
            basis[i] = a
            id_cols[i] = a
            art_cols.append(a)
            a += 1
    xB = b_hat.copy()
    at_upper = np.zeros(n_total, dtype=bool)
    allowed = np.ones(n_total, dtype=bool)

    if art_cols:
        cost1 = np.zeros(n_total)
        cost1[art_cols] = 1.0
        status = _simplex_phase(tab, xB, basis, at_upper, ub, cost1, allowed, max_iters)
        if status is SolveStatus.ITER_LIMIT:
            return Solution(SolveStatus.ITER_LIMIT, np.inf, None)
        art_mask = np.zeros(n_total, dtype=bool)
        art_mask[art_cols] = True
        phase1_obj = float(xB[art_mask[basis]].sum())
        if phase1_obj > 1e-7:
            return Solution(SolveStatus.INFEASIBLE, np.inf, None)
        # Pin artificials at zero for phase 2.
        ub[art_cols] = 0.0
        allowed[art_cols] = False
        basic_art_rows = np.nonzero(art_mask[basis])[0]
        if basic_art_rows.size:
            xB[basic_art_rows] = 0.0

    cost2 = np.zeros(n_total)
    cost2[:n] = prep.c
    status = _simplex_phase(tab, xB, basis, at_upper, ub, cost2, allowed, max_iters)
    if status is SolveStatus.UNBOUNDED:
        return Solution(SolveStatus.UNBOUNDED, -np.inf, None)
    if status is SolveStatus.ITER_LIMIT:
        return Solution(SolveStatus.ITER_LIMIT, np.inf, None)

    x_all = np.where(at_upper & np.isfinite(ub), ub, 0.0)
    x_all[basis] = xB
    x = x_all[:n] + shift
    obj = float(prep.c @ x + prep.const)

    # Dual objective from the final basis: the initial identity columns of
    # the tableau hold B^-1, so y = c_B B^-1; bound duals come from reduced
    # costs of nonbasic-at-upper columns.
    b_inv = tab[:, id_cols]
    y = cost2[basis] @ b_inv
    rc = cost2 - cost2[basis] @ tab
    nb_upper = at_upper & np.isfinite(ub)
    nb_upper[basis] = False
    dual = float(y @ b_hat + rc[nb_upper] @ ub[nb_upper] + prep.c @ shift + prep.const)
    return Solution(SolveStatus.OPTIMAL, obj, x, dual_objective=dual)


def solve_lp(lp: LinearProgram, *, max_iters: int = 50_000) -> Solution:
    """Solve an LP to a vertex optimum with deterministic pivoting.

    Dantzig pricing with a fixed tie-break, switching to Bland's rule
    after a run of degenerate pivots so cycling cannot occur.
    """
    lp.validate()
    prep = _Prepared(lp)
    return _solve_prepared(prep, lp.lower, lp.upper, max_iters)


def solve_milp(prob: MilpProblem, *, gap_tol: float = GAP_TOL, node_budget: int = 100_000) -> Solution:
    """Best-first branch-and-bound over the binary variables.

    Branches on the binary closest to 0.5 (lowest index on ties), prunes
    on the LP relaxation bound, and stops at an absolute gap of gap_tol.
    """
    prob.validate()
    lp = prob.lp
    prep = _Prepared(lp)
    binaries = np.asarray(sorted(prob.binaries), dtype=np.int64)

    root_lo = lp.lower.copy()
    root_hi = lp.upper.copy()
    if binaries.size:
        root_lo[binaries] = np.maximum(root_lo[binaries], 0.0)
        root_hi[binaries] = np.minimum(root_hi[binaries], 1.0)

    incumbent: Solution | None = None
    best_obj = np.inf
    nodes = 0
    counter = 0
    heap: list[tuple[float, int, np.ndarray, np.ndarray]] = []

    root = _solve_prepared(prep, root_lo, root_hi)
    nodes += 1
    if root.status is SolveStatus.INFEASIBLE:
        return Solution(SolveStatus.INFEASIBLE, np.inf, None, nodes=nodes)
    if root.status is SolveStatus.UNBOUNDED:
        return Solution(SolveStatus.UNBOUNDED, -np.inf, None, nodes=nodes)
    if root.status is SolveStatus.ITER_LIMIT:
        return Solution(SolveStatus.ITER_LIMIT, np.inf, None, nodes=nodes)
    heap.append((root.objective_value, counter, root_lo, root_hi))

    while heap:
        bound, _, lo, hi = heapq.heappop(heap)
        if bound >= best_obj - gap_tol:
            break
        sol = _solve_prepared(prep, lo, hi)
        nodes += 1
        if nodes >= node_budget:
            log.warning("branch-and-bound node budget exhausted (%d nodes)", nodes)
            if incumbent is not None:
                return Solution(SolveStatus.ITER_LIMIT, best_obj, incumbent.values,
                                dual_objective=incumbent.dual_objective, nodes=nodes)
            return Solution(SolveStatus.ITER_LIMIT, np.inf, None, nodes=nodes)
        if sol.status is not SolveStatus.OPTIMAL or sol.objective_value >= best_obj - gap_tol:
            continue
        x = sol.values
        frac = np.abs(x[binaries] - np.round(x[binaries])) if binaries.size else np.zeros(0)
        if frac.size == 0 or frac.max() <= INT_TOL:
            best_obj = sol.objective_value
            incumbent = sol
            continue
        # Most fractional binary, lowest index on ties.
        score = np.abs(x[binaries] - 0.5)
        score[frac <= INT_TOL] = np.inf
        j = int(binaries[np.argmin(score)])
        for fixed in (0.0, 1.0):
            lo2 = lo.copy()
            hi2 = hi.copy()
            lo2[j] = fixed
            hi2[j] = fixed
            counter += 1
            heapq.heappush(heap, (sol.objective_value, counter, lo2, hi2))

    if incumbent is None:
        return Solution(SolveStatus.INFEASIBLE, np.inf, None, nodes=nodes)
    return Solution(SolveStatus.OPTIMAL, best_obj, incumbent.values,
                    dual_objective=incumbent.dual_objective, nodes=nodes)
