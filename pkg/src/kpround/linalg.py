"""Numerical plumbing: null-space bases, maximal step sizes, unbiased extreme-point
walks over small polytopes, and a thin LP front-end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .systems import EPS_EQ, EPS_FRAC

EPS_RANK = 1e-10


class StepError(ValueError):
    """Malformed direction for a line search (zero or unbounded)."""


@dataclass(frozen=True)
class LinearSystem:
    """Equalities a_eq x = b_eq, optional inequalities a_ub x <= b_ub, and a box."""

    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lower: np.ndarray | float = 0.0
    upper: np.ndarray | float = 1.0


def rref(a: np.ndarray, tol: float = EPS_RANK):
    """Reduced row-echelon form with partial pivoting, pivot columns left to right.

    Returns (reduced matrix, pivot column list). Deterministic for a given input.
    """
    m = np.array(a, dtype=float)
    if m.ndim != 2:
        raise ValueError("need a matrix")
    rows, cols = m.shape
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    pivots = []
    pr = 0
    for pc in range(cols):
        if pr >= rows:
            break
        sub = np.abs(m[pr:, pc])
        imax = int(np.argmax(sub))
        if sub[imax] <= tol * scale:
            continue
        if imax != 0:
            m[[pr, pr + imax]] = m[[pr + imax, pr]]
        m[pr] /= m[pr, pc]
        others = np.concatenate([np.arange(pr), np.arange(pr + 1, rows)])
        m[others] -= np.outer(m[others, pc], m[pr])
        pivots.append(pc)
        pr += 1
    return m, pivots


def null_basis(a) -> list:
    """Null-space basis from the reduced row-echelon form, one vector per free
    column in lexicographic order."""
    mat = a.a_eq if isinstance(a, LinearSystem) else np.asarray(a, dtype=float)
    m, pivots = rref(mat)
    cols = mat.shape[1]
    free = [c for c in range(cols) if c not in pivots]
    basis = []
    for fc in free:
        v = np.zeros(cols)
        v[fc] = 1.0
        for row, pc in enumerate(pivots):
            v[pc] = -m[row, fc]
        basis.append(v)
    return basis


def _first_null_vector(rows: list, cols: int, tol: float = EPS_RANK):
    """First null basis vector (lexicographic free column) by forward elimination
    with partial pivoting; plain Python because the hot-path matrices are tiny."""
    m = [row[:] for row in rows]
    nrows = len(m)
    scale = 1.0
    for row in m:
        for x in row:
            ax = x if x >= 0 else -x
            if ax > scale:
                scale = ax
    cut = tol * scale
    piv_cols = []
    pr = 0
    free_col = -1
    for pc in range(cols):
        if pr >= nrows:
            free_col = pc
            break
        best = cut
        best_r = -1
        for r in range(pr, nrows):
            v = m[r][pc]
            if v < 0:
                v = -v
            if v > best:
                best = v
                best_r = r
        if best_r < 0:
            free_col = pc
            break
        if best_r != pr:
            m[pr], m[best_r] = m[best_r], m[pr]
        prow = m[pr]
        inv = 1.0 / prow[pc]
        for r in range(pr + 1, nrows):
            f = m[r][pc]
            if f != 0.0:
                f *= inv
                rrow = m[r]
                for c in range(pc, cols):
                    rrow[c] -= f * prow[c]
        piv_cols.append(pc)
        pr += 1
    if free_col < 0:
        return None
    v = [0.0] * cols
    v[free_col] = 1.0
    for r in range(len(piv_cols) - 1, -1, -1):
        pc = piv_cols[r]
        s = 0.0
        row = m[r]
        for c in range(pc + 1, free_col + 1):
            if v[c] != 0.0:
                s += row[c] * v[c]
        v[pc] = -s / row[pc]
    return v


def null_vector(a) -> np.ndarray | None:
    """First null-space basis vector, or None if the null space is trivial."""
    mat = a.a_eq if isinstance(a, LinearSystem) else np.asarray(a, dtype=float)
    v = _first_null_vector(mat.tolist(), mat.shape[1])
    return None if v is None else np.asarray(v)


def max_step(y: np.ndarray, v: np.ndarray) -> float:
    """Largest a >= 0 with both y + a v and y - a v inside [0,1]^n.

    At the returned step at least one moving coordinate of y+av or y-av sits
    exactly on the box boundary.
    """
    moving = np.abs(v) > EPS_RANK
    if not np.any(moving):
        raise StepError("zero direction: step is unbounded")
    room = np.minimum(y[moving], 1.0 - y[moving])
    a = float(np.min(room / np.abs(v[moving])))
    if a <= 0.0:
        raise StepError("all moving coordinates already at the box boundary")
    return a


def step_limits(y: np.ndarray, v: np.ndarray) -> tuple:
    """(a_plus, a_minus): maximal separate steps along +v and -v within [0,1]^n."""
    moving = np.abs(v) > EPS_RANK
    if not np.any(moving):
        raise StepError("zero direction: step is unbounded")
    vm = v[moving]
    ym = y[moving]
    up = np.where(vm > 0, (1.0 - ym) / np.abs(vm), ym / np.abs(vm))
    dn = np.where(vm > 0, ym / np.abs(vm), (1.0 - ym) / np.abs(vm))
    return float(up.min()), float(dn.min())


def _snap_box(y: np.ndarray) -> None:
    y[y <= EPS_FRAC] = 0.0
    y[y >= 1.0 - EPS_FRAC] = 1.0


def extreme_point_walk(y: np.ndarray, system, rand) -> np.ndarray:
    """Unbiased martingale walk to an extreme point of {a_eq x = a_eq y} cap [0,1]^n.

    Each step moves along a null-space direction restricted to the currently
    fractional coordinates, going to y + a_plus v with probability
    a_minus/(a_plus+a_minus), else to y - a_minus v, until no such direction
    remains (then at most rank(a_eq) coordinates are fractional).
    """
    from .rounding import as_source  # local import to avoid a cycle

    a_eq = system.a_eq if isinstance(system, LinearSystem) else np.asarray(system, dtype=float)
    if a_eq is None:
        a_eq = np.zeros((0, y.shape[0]))
    resid = a_eq @ y
    rand = as_source(rand)
    out = np.array(y, dtype=float)
    walk_inplace(out, a_eq, rand)
    err = 0.0 if resid.size == 0 else np.abs(a_eq @ out - resid).max()
    if err > EPS_EQ * max(1.0, np.abs(resid).max(initial=0.0)):
        raise ArithmeticError(f"walk drifted off the equality manifold by {err:g}")
    return out


def walk_inplace(y: np.ndarray, a_eq: np.ndarray, rand) -> None:
    """In-place unbiased walk; no feasibility re-checks (hot path)."""
    vals = y.tolist()
    rows = a_eq.tolist()
    n = len(vals)
    lo, hi = EPS_FRAC, 1.0 - EPS_FRAC
    for _ in range(4 * n + 8):
        frac = [i for i in range(n) if lo < vals[i] < hi]
        if not frac:
            break
        v = _first_null_vector([[row[i] for i in frac] for row in rows], len(frac))
        if v is None:
            break
        a_plus = a_minus = np.inf
        for j, i in enumerate(frac):
            vj = v[j]
            if -EPS_RANK <= vj <= EPS_RANK:
                continue
            if vj > 0:
                up, dn = (1.0 - vals[i]) / vj, vals[i] / vj
            else:
                up, dn = vals[i] / -vj, (1.0 - vals[i]) / -vj
            if up < a_plus:
                a_plus = up
            if dn < a_minus:
                a_minus = dn
        if not np.isfinite(a_plus) or not np.isfinite(a_minus):
            raise StepError("null direction has no moving coordinate")
        step = a_plus if rand.walk_branch(a_minus / (a_plus + a_minus)) else -a_minus
        for j, i in enumerate(frac):
            nv = vals[i] + step * v[j]
            if nv <= lo:
                nv = 0.0
            elif nv >= hi:
                nv = 1.0
            vals[i] = nv
    else:
        raise ArithmeticError("extreme-point walk failed to terminate")
    y[:] = vals


@dataclass(frozen=True)
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    value: float | None

    def require_optimal(self) -> "LpResult":
        if self.status != "optimal":
            raise ArithmeticError(f"LP not solved to optimality: {self.status}")
        return self


def lp_solve(objective, system: LinearSystem) -> LpResult:
    """Minimize objective . x subject to the given system. Deterministic for a
    fixed input (HiGHS backend); infeasible and unbounded are reported as such."""
    c = np.asarray(objective, dtype=float)
    nv = c.shape[0]
    lo = np.broadcast_to(np.asarray(system.lower, dtype=float), (nv,))
    hi = np.broadcast_to(np.asarray(system.upper, dtype=float), (nv,))
    res = linprog(
        c,
        A_ub=system.a_ub, b_ub=system.b_ub,
        A_eq=system.a_eq, b_eq=system.b_eq,
        bounds=np.column_stack([lo, hi]),
        method="highs",
    )
    if res.status == 2:
        return LpResult("infeasible", None, None)
    if res.status == 3:
        return LpResult("unbounded", None, None)
    if not res.success:
        raise ArithmeticError(f"LP solver failure: {res.message}")
    return LpResult("optimal", np.asarray(res.x, dtype=float), float(res.fun))
