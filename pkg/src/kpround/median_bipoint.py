"""Bi-factor knapsack-median rounding (one knapsack row): star-based dependent
rounding of a two-set convex solution, the min-of-two restart wrapper, and
big-facility guessing for multiplicative feasibility."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .alteration import PseudoSolution, certify_pseudo
from .bruteforce import subset_tables
from .instances import FacilityInstance
from .rounding import as_source, kpr_depround
from .systems import EPS_EQ

SQ3 = math.sqrt(3.0)


class BiPointError(ValueError):
    pass


class RestartCapExceeded(RuntimeError):
    def __init__(self, message, best_set=None, best_cost=None):
        super().__init__(message)
        self.best_set = best_set
        self.best_cost = best_cost


@dataclass(frozen=True, eq=False)
class BiPointSolution:
    """Convex combination of a budget-feasible facility set and a heavier one,
    with per-client nearest members and the star map onto the feasible side."""

    f1: np.ndarray
    f2: np.ndarray
    b: float
    sigma: np.ndarray       # position into f1, one per f2 member
    i1: np.ndarray          # nearest f1 facility per client
    i2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    vacuous: bool = False   # knapsack carries no bite (total weight < 1)

    @property
    def d1_total(self) -> float:
        return float(self.d1.sum())

    @property
    def d2_total(self) -> float:
        return float(self.d2.sum())

    def mixed_cost(self) -> float:
        return (1.0 - self.b) * self.d1_total + self.b * self.d2_total


def _nearest(inst: FacilityInstance, subset: np.ndarray):
    d = inst.d_fc[subset]
    pos = np.argmin(d, axis=0)  # ties: first (lowest facility index; subset sorted)
    return subset[pos], d[pos, np.arange(inst.n_clients)]


def make_bipoint(inst: FacilityInstance, f1, f2, b: float,
                 vacuous: bool = False) -> BiPointSolution:
    """Assemble and validate a bi-point solution from its raw sets."""
    if inst.m != 1:
        raise BiPointError("bi-point rounding handles a single knapsack row")
    f1 = np.asarray(sorted(f1), dtype=np.intp)
    f2 = np.asarray(sorted(f2), dtype=np.intp)
    if f1.size == 0 or f2.size == 0:
        raise BiPointError("bi-point sets must be non-empty")
    w = inst.weights[0]
    m1, m2 = float(w[f1].sum()), float(w[f2].sum())
    if m1 > 1.0 + EPS_EQ:
        raise BiPointError(f"feasible side overweight: {m1}")
    if not vacuous and m2 < 1.0 - EPS_EQ:
        raise BiPointError(f"heavy side underweight: {m2}")
    if not 0.0 <= b <= 1.0 or (1.0 - b) * m1 + b * m2 > 1.0 + EPS_EQ:
        raise BiPointError("mixing weight violates the budget line")
    d_f2_f1 = inst.d_ff[np.ix_(f2, f1)]
    sigma = np.argmin(d_f2_f1, axis=1)
    i1, d1 = _nearest(inst, f1)
    i2, d2 = _nearest(inst, f2)
    return BiPointSolution(f1=f1, f2=f2, b=float(b), sigma=sigma,
                           i1=i1, i2=i2, d1=d1, d2=d2, vacuous=vacuous)


def bipoint_oracle(inst: FacilityInstance) -> BiPointSolution:
    """Exhaustive desk-scale substitute for the bi-point construction: among all
    set pairs satisfying the contract, return one of minimum mixed cost (<= OPT,
    strictly stronger than the contract's 2*OPT)."""
    if inst.m != 1:
        raise BiPointError("bi-point rounding handles a single knapsack row")
    _, costs, _, wt, feasible = subset_tables(inst)
    w = wt[:, 0]
    heavy = w >= 1.0 - EPS_EQ
    heavy[0] = False
    if not heavy.any():
        # knapsack is vacuous: every set fits, best set is everything
        full = (1 << inst.n_facilities) - 1
        all_f = np.arange(inst.n_facilities)
        return make_bipoint(inst, all_f, all_f, b=0.0, vacuous=True)
    best = None
    idx_heavy = np.nonzero(heavy)[0]
    w2, c2 = w[idx_heavy], costs[idx_heavy]
    for mask in np.nonzero(feasible)[0]:
        m1, c1 = w[mask], costs[mask]
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(w2 > m1 + 1e-15, (1.0 - m1) / (w2 - m1), 1.0)
        b = np.clip(b, 0.0, 1.0)
        mixed = (1.0 - b) * c1 + b * c2
        ok = (1.0 - b) * m1 + b * w2 <= 1.0 + EPS_EQ
        if not ok.any():
            continue
        mixed = np.where(ok, mixed, np.inf)
        k = int(np.argmin(mixed))
        if best is None or mixed[k] < best[0]:
            best = (float(mixed[k]), int(mask), int(idx_heavy[k]), float(b[k]))
    if best is None:
        raise BiPointError("no admissible bi-point pair at desk scale")
    _, mask1, mask2, b = best

    def bits(mask):
        return [f for f in range(inst.n_facilities) if mask >> f & 1]

    return make_bipoint(inst, bits(mask1), bits(mask2), b)


@dataclass(frozen=True, eq=False)
class RoundStarsResult:
    open_set: np.ndarray
    closed_frac: np.ndarray      # rounded closure indicators over f1
    star_sel: np.ndarray         # rounded openings over f2
    certificate: PseudoSolution
    weight_identity_err: float
    n_fractional: int


def round_stars(inst: FacilityInstance, bp: BiPointSolution, t: int,
                rand) -> RoundStarsResult:
    """Dependent rounding of the star structure: closure indicators over the
    feasible side are rounded against the star-surplus row, then star openings
    against the true weights. The output is a 4t-additive pseudo-solution with
    probability one."""
    rand = as_source(rand)
    if t <= 12:
        raise BiPointError("need t > 12 for the single-row rounding")
    w = inst.weights[0]
    star_weight = np.zeros(bp.f1.size)
    np.add.at(star_weight, bp.sigma, w[bp.f2])
    surplus = star_weight - w[bp.f1]
    x = np.full(bp.f1.size, bp.b)
    closed = kpr_depround(x, surplus[None, :], t, rand)
    z = closed[bp.sigma]
    star_sel = kpr_depround(z, w[bp.f2][None, :], t, rand)
    open_set = np.union1d(bp.f1[closed < 1.0], bp.f2[star_sel > 0.0])

    # exact accounting: closed/open fractional survivors are the discard set
    lhs = float(w[bp.f1] @ (1.0 - closed) + w[bp.f2] @ star_sel)
    rhs = (1.0 - bp.b) * float(w[bp.f1].sum()) + bp.b * float(w[bp.f2].sum())
    n_frac = int(((closed > 0) & (closed < 1)).sum() + ((star_sel > 0) & (star_sel < 1)).sum())
    cert = certify_pseudo(open_set, inst.weights, 4 * t)
    if not cert:
        raise AssertionError(f"4t-additive guarantee violated: {cert}")
    return RoundStarsResult(open_set=open_set, closed_frac=closed,
                            star_sel=star_sel, certificate=cert,
                            weight_identity_err=abs(lhs - rhs),
                            n_fractional=n_frac)


@dataclass(frozen=True, eq=False)
class BifactorResult:
    open_set: np.ndarray
    cost: float
    certificate: PseudoSolution
    t: int
    restarts: int
    accept_threshold: float


def km_bifactor(inst: FacilityInstance, gamma: float, rand,
                t_override: int | None = None) -> BifactorResult:
    """Restart loop: round stars until the better of the rounded set and the
    feasible side beats the bi-point acceptance threshold."""
    rand = as_source(rand)
    if not 0.0 < gamma < 1.0:
        raise BiPointError("gamma must lie in (0,1)")
    bp = bipoint_oracle(inst)
    t = t_override if t_override is not None else max(math.ceil(1.0 / gamma), 13)
    if t <= 12:
        raise BiPointError("t override too small")
    threshold = (1.0 + SQ3 + 10.0 * gamma) / 2.0 * bp.mixed_cost()
    cost_f1 = inst.cost(bp.f1)
    cap = math.ceil(1000.0 / gamma)
    best_set, best_cost = bp.f1, cost_f1
    for restarts in range(cap):
        if best_cost <= threshold + EPS_EQ:
            q = 0 if best_set is bp.f1 else 4 * t
            cert = certify_pseudo(best_set, inst.weights, q)
            if not cert:
                raise AssertionError(f"acceptance certificate failed: {cert}")
            return BifactorResult(open_set=np.asarray(best_set, dtype=np.intp),
                                  cost=best_cost, certificate=cert, t=t,
                                  restarts=restarts, accept_threshold=threshold)
        rounded = round_stars(inst, bp, t, rand)
        cost_s = inst.cost(rounded.open_set)
        if cost_s < best_cost:
            best_set, best_cost = rounded.open_set, cost_s
    raise RestartCapExceeded(f"no acceptable rounding in {cap} restarts",
                             best_set=best_set, best_cost=best_cost)


def _residual(inst: FacilityInstance, guess: tuple, rho: float):
    """Residual instance for a guessed big-open set: other bigs dropped, the
    guessed ones free, remaining budget renormalized."""
    w = inst.weights[0]
    big = np.nonzero(w >= rho - EPS_EQ)[0]
    small = np.setdiff1d(np.arange(inst.n_facilities), big)
    keep = np.concatenate([np.asarray(guess, dtype=np.intp), small]).astype(np.intp)
    keep.sort()
    spare = 1.0 - float(w[list(guess)].sum())
    new_w = w[keep].copy()
    guess_pos = np.isin(keep, np.asarray(guess, dtype=np.intp))
    new_w[guess_pos] = 0.0
    if spare <= EPS_EQ:
        usable = new_w <= EPS_EQ
        keep = keep[usable]
        new_w = np.zeros(keep.size)
    else:
        new_w = new_w / spare
    order = np.concatenate([keep, inst.n_facilities + np.arange(inst.n_clients)])
    dist = inst.dist[np.ix_(order, order)]
    res = FacilityInstance.build(keep.size, inst.n_clients, dist, new_w[None, :],
                                 validate=False)
    return res, keep


@dataclass(frozen=True, eq=False)
class MultiplicativeResult:
    open_set: np.ndarray
    cost: float
    max_weight: float
    guess: tuple
    rho: float


def km_multiplicative(inst: FacilityInstance, gamma: float, eps: float, rand,
                      guess_budget: int = 20000) -> MultiplicativeResult:
    """Guess the big facilities of the solution, solve each residual instance
    additively, return the best candidate within (1+O(eps)) of every budget."""
    rand = as_source(rand)
    rho = eps * gamma
    w = inst.weights[0]
    big = np.nonzero(w >= rho - EPS_EQ)[0]
    max_in = max(1, math.floor(1.0 / rho)) if rho > 0 else inst.n_facilities
    guesses = [()]
    for k in range(1, min(max_in, big.size) + 1):
        guesses.extend(g for g in itertools.combinations(big.tolist(), k)
                       if w[list(g)].sum() <= 1.0 + EPS_EQ)
        if len(guesses) > guess_budget:
            raise BiPointError(f"guess enumeration exceeds {guess_budget}")
    best = None
    for guess in guesses:
        res, keep = _residual(inst, guess, rho)
        if res.n_facilities == 0:
            continue
        try:
            sub = km_bifactor(res, gamma, rand)
        except (BiPointError, RestartCapExceeded):
            continue
        opened = np.union1d(keep[sub.open_set], np.asarray(guess, dtype=np.intp))
        cost = inst.cost(opened)
        max_w = float(inst.weight_of(opened).max())
        if max_w > 1.0 + 2.0 * eps + EPS_EQ:
            continue
        if best is None or cost < best.cost:
            best = MultiplicativeResult(open_set=opened.astype(np.intp), cost=cost,
                                        max_weight=max_w, guess=guess, rho=rho)
    if best is None:
        raise BiPointError("no feasible multiplicative candidate found")
    return best
