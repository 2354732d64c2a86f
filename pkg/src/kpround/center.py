"""Knapsack center: optimal-radius guessing, the covering LP with all-or-nothing
assignments, block construction with no-open placeholders, density-driven
branch-and-fix (sparsification), the exact single-row rounding and the additive
multi-row rounding, and the multiplicative-weights outer loop that turns
per-weighting guarantees into per-client ones."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .alteration import PseudoSolution, certify_pseudo
from .instances import FacilityInstance
from .linalg import LinearSystem, lp_solve
from .rounding import as_source, full_kpr, kpr
from .systems import (EPS_EQ, EPS_FRAC, PartitionSystem, q_potential, snap)

BALL_EPS = 1e-9
E_BASE = 1.0 + 2.0 / math.e


class CenterError(ValueError):
    pass


class RadiusInfeasible(RuntimeError):
    """The pipeline cannot be completed at this radius guess; advance it."""


class InnerCapExceeded(RuntimeError):
    pass


def guess_radius(inst: FacilityInstance) -> np.ndarray:
    """All candidate optimal radii: the pairwise distances (plus zero),
    deduplicated ascending."""
    d = inst.dist[np.triu_indices_from(inst.dist, k=1)]
    return np.unique(np.concatenate([[0.0], d]))


def _ball(inst: FacilityInstance, radius: float) -> np.ndarray:
    """Facility-client incidence of the closed radius ball."""
    return inst.d_fc <= radius * (1.0 + BALL_EPS) + 1e-12


def center_feasible_y(inst: FacilityInstance, radius: float,
                      fixed: dict | None = None) -> np.ndarray | None:
    """Fractional openings covering every client within the radius and obeying
    the budgets, or None. Minimizes total weighted mass for determinism."""
    nf = inst.n_facilities
    cover = _ball(inst, radius)
    lo = np.zeros(nf)
    hi = np.ones(nf)
    for i, v in (fixed or {}).items():
        lo[i] = hi[i] = float(v)
    a_ub = np.vstack([-cover.T.astype(float), inst.weights])
    b_ub = np.concatenate([-np.ones(inst.n_clients), np.ones(inst.m)])
    res = lp_solve(inst.weights.sum(axis=0), LinearSystem(a_ub=a_ub, b_ub=b_ub,
                                                          lower=lo, upper=hi))
    if res.status != "optimal":
        return None
    return np.clip(res.x, lo, hi)


def smallest_feasible_radius(inst: FacilityInstance) -> float:
    """Ascending-candidate search (bisection; feasibility is monotone in the
    radius). At most the brute-force optimal radius."""
    cands = guess_radius(inst)
    lo, hi = 0, cands.size - 1
    if center_feasible_y(inst, cands[lo]) is not None:
        return float(cands[lo])
    if center_feasible_y(inst, cands[hi]) is None:
        raise CenterError("no feasible radius: budgets too tight")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if center_feasible_y(inst, cands[mid]) is None:
            lo = mid
        else:
            hi = mid
    return float(cands[hi])


@dataclass(frozen=True, eq=False)
class CenterLpSolution:
    """Radius-scaled covering solution after preprocessing and splitting.

    Copies carry the full original weight; `f_sets` are the per-client blocks of
    copies (disjoint across the filtered clients), `f0` the leftover copies."""

    inst: FacilityInstance
    radius: float
    fixed: dict
    forced_open: np.ndarray       # original facility ids opened by preprocessing
    active_clients: np.ndarray    # original client ids still needing coverage
    copy_origin: np.ndarray       # split copy -> original facility id
    copy_y: np.ndarray
    x: np.ndarray                 # copies x active clients, all-or-nothing
    f_sets: list                  # per active client: copy index array
    filtered: np.ndarray          # positions into active_clients with disjoint f_sets
    f0: np.ndarray                # copies outside every filtered block
    density: np.ndarray | None = None  # per original facility, for the last weighting


def build_center_solution(inst: FacilityInstance, radius: float,
                          fixed: dict | None = None) -> CenterLpSolution | None:
    fixed = dict(fixed or {})
    y = center_feasible_y(inst, radius, fixed)
    if y is None:
        return None
    nf, nc = inst.n_facilities, inst.n_clients
    cover = _ball(inst, radius)
    forced = np.nonzero(y >= 1.0 - EPS_FRAC)[0]
    covered = cover[forced].any(axis=0) if forced.size else np.zeros(nc, dtype=bool)
    active = np.nonzero(~covered)[0]
    frac = np.nonzero((y > EPS_FRAC) & (y < 1.0 - EPS_FRAC))[0]

    # greedy nearest-first all-or-nothing fill per active client
    x_raw = np.zeros((frac.size, active.size))
    for col, j in enumerate(active):
        in_ball = [k for k, i in enumerate(frac) if cover[i, j]]
        in_ball.sort(key=lambda k: (inst.d_fc[frac[k], j], frac[k]))
        need = 1.0
        for k in in_ball:
            take = min(need, y[frac[k]])
            x_raw[k, col] = take
            need -= take
            if need <= EPS_EQ:
                break
        else:
            return None  # ball mass below one: radius too small for this branch
    # level-set split of each fractional facility
    copy_origin, copy_y, cols = [], [], []
    for k, i in enumerate(frac):
        served = x_raw[k]
        levels = np.sort(np.unique(np.concatenate(
            [served[served > EPS_FRAC], [y[i]]])))
        keep = [levels[0]] if levels.size else []
        for v in levels[1:]:
            if v - keep[-1] > 1e-9:
                keep.append(v)
        prev = 0.0
        for lv in keep:
            copy_origin.append(i)
            copy_y.append(lv - prev)
            cols.append(np.where(served >= lv - 1e-9, lv - prev, 0.0))
            prev = lv
    copy_origin = np.asarray(copy_origin, dtype=np.intp)
    copy_y = np.asarray(copy_y)
    x = np.stack(cols) if cols else np.zeros((0, active.size))

    f_sets = [np.nonzero(x[:, c] > EPS_FRAC)[0] for c in range(active.size)]
    used = np.zeros(copy_y.size, dtype=bool)
    filtered = []
    for c in range(active.size):
        if not used[f_sets[c]].any():
            filtered.append(c)
            used[f_sets[c]] = True
    f0 = np.nonzero(~used)[0]
    return CenterLpSolution(inst=inst, radius=radius, fixed=fixed,
                            forced_open=forced, active_clients=active,
                            copy_origin=copy_origin, copy_y=copy_y, x=x,
                            f_sets=f_sets,
                            filtered=np.asarray(filtered, dtype=np.intp), f0=f0)


def facility_density(sol: CenterLpSolution, a: np.ndarray) -> np.ndarray:
    """Weighted client mass served by each original facility (its fractional
    copies pooled); a is a unit weighting over all original clients."""
    nf = sol.inst.n_facilities
    out = np.zeros(nf)
    if sol.x.size == 0:
        return out
    served = sol.x > EPS_FRAC
    for i in np.unique(sol.copy_origin):
        rows = np.nonzero(sol.copy_origin == i)[0]
        clients = np.nonzero(served[rows].any(axis=0))[0]
        out[i] = a[sol.active_clients[clients]].sum()
    return out


def sparsify(inst: FacilityInstance, radius: float, a: np.ndarray, delta: float,
             cache: dict | None = None, fixed: dict | None = None):
    """Branch-and-fix over dense fractional facilities: yields every feasible
    delta-sparse leaf (depth-first, closed branch first). The LP work is cached
    by fixing set so repeated weightings stay cheap."""
    if not 0.0 < delta <= 1.0:
        raise CenterError("delta must lie in (0, 1]")
    cache = cache if cache is not None else {}
    fixed = dict(fixed or {})

    key = frozenset(fixed.items())
    if key not in cache:
        cache[key] = build_center_solution(inst, radius, fixed)
    sol = cache[key]
    if sol is None:
        return
    dens = facility_density(sol, a)
    frac_orig = np.unique(sol.copy_origin)
    dense = [i for i in frac_orig if dens[i] > delta + EPS_EQ]
    if not dense:
        yield CenterLpSolution(**{**sol.__dict__, "density": dens})
        return
    pick = max(dense, key=lambda i: (dens[i], -i))
    for val in (0, 1):
        yield from sparsify(inst, radius, a, delta, cache,
                            {**fixed, int(pick): val})


def first_sparse_solution(inst, radius, a, delta, cache=None) -> CenterLpSolution:
    for leaf in sparsify(inst, radius, a, delta, cache):
        return leaf
    raise RadiusInfeasible(f"no feasible sparse branch at radius {radius}")


def build_center_blocks(sol: CenterLpSolution):
    """Knapsack-partition system: one block per filtered client (its copies),
    one {copy, placeholder} block per leftover copy. Placeholders carry zero
    weight and stand for not opening."""
    n_copies = sol.copy_y.size
    blocks, item_copy = [], []
    y_items = []
    for c in sol.filtered:
        members = sol.f_sets[c]
        blocks.append(list(range(len(item_copy), len(item_copy) + members.size)))
        item_copy.extend(int(k) for k in members)
        y_items.extend(float(sol.copy_y[k]) for k in members)
    for k in sol.f0:
        blocks.append([len(item_copy), len(item_copy) + 1])
        item_copy.extend([int(k), -1])
        y_items.extend([float(sol.copy_y[k]), 1.0 - float(sol.copy_y[k])])
    if not blocks:
        return None
    item_copy = np.asarray(item_copy, dtype=np.intp)
    y_items = np.asarray(y_items)
    m = sol.inst.m
    weights = np.zeros((m, item_copy.size))
    real = item_copy >= 0
    weights[:, real] = sol.inst.weights[:, sol.copy_origin[item_copy[real]]]
    ps = PartitionSystem.build(item_copy.size, blocks, weights=weights)
    snap(y_items, ps)
    return ps, y_items, item_copy


def check_block_potentials(sol: CenterLpSolution) -> float:
    """Largest no-open potential over the filtered clients' blocks (must be at
    most 1/e for a covering solution)."""
    built = build_center_blocks(sol)
    if built is None:
        return 0.0
    ps, y_items, _ = built
    worst = 0.0
    for c in range(sol.filtered.size):
        worst = max(worst, q_potential(ps.blocks[c], y_items, ps))
    return worst


@dataclass(frozen=True, eq=False)
class CenterRound:
    open_set: np.ndarray          # original facility ids
    dists_scaled: np.ndarray      # per original client, in radius units
    max_weight: np.ndarray        # per budget row
    n_modified: int               # fractional entries forced by the finish
    certificate: PseudoSolution | None = None


def _finish_min_weight(ps: PartitionSystem, y: np.ndarray,
                       weights: np.ndarray) -> tuple:
    """Move each block's leftover fractional mass onto its minimum-weight item
    (total weighted sum can only drop). Returns the selection and touch count."""
    z = y.copy()
    modified = 0
    total_w = weights.sum(axis=0)
    for b in ps.blocks:
        vals = z[b]
        frac = (vals > EPS_FRAC) & (vals < 1.0 - EPS_FRAC)
        if not frac.any():
            continue
        modified += int(frac.sum())
        cand = b[frac]
        pick = cand[np.lexsort((cand, total_w[cand]))[0]]
        z[b] = 0.0
        z[pick] = 1.0
    return z, modified


def _open_and_distances(sol: CenterLpSolution, ps, selection, item_copy):
    real = (selection >= 1.0 - EPS_FRAC) & (item_copy >= 0)
    opened_orig = np.unique(sol.copy_origin[item_copy[real]])
    opened = np.union1d(sol.forced_open, opened_orig).astype(np.intp)
    if opened.size == 0:
        raise RadiusInfeasible("rounding opened nothing")
    dists = sol.inst.d_fc[opened].min(axis=0) / max(sol.radius, 1e-30)
    return opened, dists


def standard_center_round(sol: CenterLpSolution, rand, t: int = 13) -> CenterRound:
    """Single-row rounding with an exact finish: rounds, then opens the lightest
    fractional item of each block. The budget is met exactly and every client
    lands within three radii."""
    if sol.inst.m != 1:
        raise CenterError("the exact finish needs a single budget row")
    rand = as_source(rand)
    built = build_center_blocks(sol)
    if built is None:
        opened = sol.forced_open.astype(np.intp)
        dists = sol.inst.d_fc[opened].min(axis=0) / max(sol.radius, 1e-30)
        return CenterRound(open_set=opened, dists_scaled=dists,
                           max_weight=sol.inst.weight_of(opened), n_modified=0)
    ps, y_items, item_copy = built
    y_rounded = kpr(ps, ps.weights, y_items, t, rand)
    z, modified = _finish_min_weight(ps, y_rounded, ps.weights)
    opened, dists = _open_and_distances(sol, ps, z, item_copy)
    return CenterRound(open_set=opened, dists_scaled=dists,
                       max_weight=sol.inst.weight_of(opened), n_modified=modified)


def multi_center_round(sol: CenterLpSolution, rand, t: int,
                       q_limit: int | None = None) -> CenterRound:
    """Multi-row rounding finished by independent selection; additive budget
    certificate attached when a limit is supplied."""
    rand = as_source(rand)
    built = build_center_blocks(sol)
    if built is None:
        opened = sol.forced_open.astype(np.intp)
        dists = sol.inst.d_fc[opened].min(axis=0) / max(sol.radius, 1e-30)
        return CenterRound(open_set=opened, dists_scaled=dists,
                           max_weight=sol.inst.weight_of(opened), n_modified=0,
                           certificate=certify_pseudo(opened, sol.inst.weights,
                                                      max(q_limit or 0, 0)) or None)
    ps, y_items, item_copy = built
    sel = full_kpr(ps, ps.weights, y_items, t, rand)
    opened, dists = _open_and_distances(sol, ps, sel, item_copy)
    cert = None
    if q_limit is not None:
        cert = certify_pseudo(opened, sol.inst.weights, q_limit)
        cert = cert if cert else None
    return CenterRound(open_set=opened, dists_scaled=dists,
                       max_weight=sol.inst.weight_of(opened),
                       n_modified=int(((sel != y_items) &
                                       ((y_items > EPS_FRAC) & (y_items < 1 - EPS_FRAC))).sum()),
                       certificate=cert)


@dataclass(frozen=True, eq=False)
class MwuResult:
    chosen: CenterRound
    rounds: list
    round_weighted: list          # achieved weighted distance per round
    regret_bound: float           # deterministic bound on per-client averages
    per_client_mean: np.ndarray
    gamma: float
    n_rounds: int


def knapsack_mwu(inner, n_clients: int, gamma: float, rand,
                 n_rounds: int | None = None) -> MwuResult:
    """Multiplicative-weights outer loop: reweight clients by their distances
    each round, output a uniformly random round's solution."""
    rand = as_source(rand)
    v = n_rounds if n_rounds is not None else \
        math.ceil(math.log(max(n_clients, 2)) / gamma ** 2)
    a = np.ones(n_clients)
    rounds, weighted = [], []
    for _ in range(v):
        aw = a / a.sum()
        res = inner(aw, rand)
        rounds.append(res)
        weighted.append(float(aw @ res.dists_scaled))
        a = a * np.exp(gamma * res.dists_scaled)
        a /= a.max()
    pick = rand.pick(np.arange(1, v + 1) / v)
    per_client = np.mean([r.dists_scaled for r in rounds], axis=0)
    beta_run = max(weighted)
    bound = beta_run * (1.0 + 3.0 * gamma) + math.log(max(n_clients, 2)) / (v * gamma)
    return MwuResult(chosen=rounds[pick], rounds=rounds, round_weighted=weighted,
                     regret_bound=bound, per_client_mean=per_client,
                     gamma=gamma, n_rounds=v)


MODES = ("standard", "multi-1", "multi-2", "multi-3")


def _mode_params(mode: str, m: int, gamma: float, eps: float | None):
    if mode == "standard":
        if m != 1:
            raise CenterError("standard mode requires one budget row")
        return {"t": 13, "delta": gamma / math.log(1.0 / gamma), "q_limit": None}
    if mode == "multi-1":
        t_raw = math.ceil(m * m / gamma)
        return {"t": max(t_raw, 12 * m + 1), "delta": 1.0,
                "t_clamped": t_raw <= 12 * m, "q_limit": "mode1"}
    if mode == "multi-2":
        return {"t": 12 * m * m + 1,
                "delta": gamma / (m * m * math.log(1.0 / gamma)),
                "q_limit": "mode2"}
    raise CenterError(f"unknown mode {mode!r} (multi-3 wraps multi-2 externally)")


def _q_limit(kind: str, m: int, gamma: float, c6: float) -> int:
    if kind == "mode1":
        return math.ceil(c6 * m * math.sqrt(math.log(m / gamma) / gamma))
    return math.ceil(c6 * math.sqrt(max(m * math.log(max(m, 2)), 1.0)) *
                     math.sqrt(math.log(1.0 / gamma) + 1.0))


@dataclass(frozen=True, eq=False)
class CenterSolveResult:
    radius: float
    mwu: MwuResult
    mode: str
    delta: float
    t: int
    t_clamped: bool
    inner_retries_max: int


def solve_center(inst: FacilityInstance, gamma: float, rand, mode: str = "standard",
                 eps: float | None = None, delta_override: float | None = None,
                 n_rounds: int | None = None, c6: float | None = None,
                 inner_cap: int = 1000) -> CenterSolveResult:
    """Full pipeline: scan radius candidates ascending from the first LP-feasible
    one; at each, run the multiplicative-weights loop with the mode's rounding
    backend, advancing the radius if any branch-and-fix dead-ends."""
    rand = as_source(rand)
    if mode == "multi-3":
        return _solve_center_guessing(inst, gamma, rand, eps, n_rounds, c6, inner_cap)
    if not 0.0 < gamma < 1.0:
        raise CenterError("gamma must lie in (0,1)")
    params = _mode_params(mode, inst.m, gamma, eps)
    delta = delta_override if delta_override is not None else params["delta"]
    q_kind = params["q_limit"]
    q_limit = None
    if q_kind is not None:
        if c6 is None:
            from .fixtures import constant
            c6 = constant("c6_center_additive")
        q_limit = _q_limit(q_kind, inst.m, gamma, c6)
    threshold = E_BASE + 10.0 * gamma
    cands = guess_radius(inst)
    start = cands.searchsorted(smallest_feasible_radius(inst) - 1e-12)
    retry_hwm = 0
    for radius in cands[start:]:
        cache: dict = {}

        def inner(aw, rnd):
            nonlocal retry_hwm
            leaf = first_sparse_solution(inst, float(radius), aw, delta, cache)
            for attempt in range(inner_cap):
                if mode == "standard":
                    res = standard_center_round(leaf, rnd, t=params["t"])
                else:
                    res = multi_center_round(leaf, rnd, t=params["t"],
                                             q_limit=q_limit)
                    if q_limit is not None and res.certificate is None:
                        continue
                if float(aw @ res.dists_scaled) <= threshold + EPS_EQ:
                    retry_hwm = max(retry_hwm, attempt)
                    return res
            raise InnerCapExceeded(f"inner loop failed at radius {radius}")

        try:
            mwu = knapsack_mwu(inner, inst.n_clients, gamma, rand, n_rounds)
        except (RadiusInfeasible, InnerCapExceeded):
            continue
        return CenterSolveResult(radius=float(radius), mwu=mwu, mode=mode,
                                 delta=delta, t=params["t"],
                                 t_clamped=bool(params.get("t_clamped", False)),
                                 inner_retries_max=retry_hwm)
    raise CenterError("no radius candidate admits a complete rounding pipeline")


def _solve_center_guessing(inst, gamma, rand, eps, n_rounds, c6, inner_cap):
    """Multiplicative mode: guess the big-open set, zero its weights, drop other
    bigs, run the additive mode on the residual, certify multiplicatively."""
    if eps is None or eps <= 0:
        raise CenterError("multi-3 needs eps > 0")
    m = inst.m
    rho = eps / max(math.sqrt(m * math.log(max(m, 2))), 1e-9)
    w = inst.weights
    big = np.nonzero((w >= rho - EPS_EQ).any(axis=0))[0]
    small = np.setdiff1d(np.arange(inst.n_facilities), big)
    max_in = min(big.size, max(1, math.floor(m / rho))) if rho > 0 else big.size
    best = None
    for k in range(0, max_in + 1):
        for guess in itertools.combinations(big.tolist(), k):
            if guess and np.any(w[:, list(guess)].sum(axis=1) > 1.0 + EPS_EQ):
                continue
            keep = np.sort(np.concatenate([np.asarray(guess, dtype=np.intp), small])
                           .astype(np.intp))
            if keep.size == 0:
                continue
            spare = 1.0 - (w[:, list(guess)].sum(axis=1) if guess else np.zeros(m))
            if np.any(spare <= EPS_EQ):
                continue
            new_w = w[:, keep] / spare[:, None]
            new_w[:, np.isin(keep, np.asarray(guess, dtype=np.intp))] = 0.0
            order = np.concatenate([keep, inst.n_facilities + np.arange(inst.n_clients)])
            res_inst = FacilityInstance.build(keep.size, inst.n_clients,
                                              inst.dist[np.ix_(order, order)],
                                              new_w, validate=False)
            try:
                sub = solve_center(res_inst, gamma, rand, mode="multi-2",
                                   n_rounds=n_rounds, c6=c6, inner_cap=inner_cap)
            except (CenterError, RadiusInfeasible, InnerCapExceeded):
                continue
            opened = np.union1d(keep[sub.mwu.chosen.open_set],
                                np.asarray(guess, dtype=np.intp)).astype(np.intp)
            max_w = float(inst.weight_of(opened).max())
            if max_w > 1.0 + 2.0 * eps + EPS_EQ:
                continue
            radius_val = float(inst.d_fc[opened].min(axis=0).max())
            if best is None or radius_val < best[0]:
                rescaled = CenterRound(open_set=opened,
                                       dists_scaled=inst.d_fc[opened].min(axis=0)
                                       / max(sub.radius, 1e-30),
                                       max_weight=inst.weight_of(opened),
                                       n_modified=sub.mwu.chosen.n_modified,
                                       certificate=sub.mwu.chosen.certificate)
                best = (radius_val, CenterSolveResult(
                    radius=sub.radius,
                    mwu=MwuResult(chosen=rescaled, rounds=sub.mwu.rounds,
                                  round_weighted=sub.mwu.round_weighted,
                                  regret_bound=sub.mwu.regret_bound,
                                  per_client_mean=sub.mwu.per_client_mean,
                                  gamma=gamma, n_rounds=sub.mwu.n_rounds),
                    mode="multi-3", delta=sub.delta, t=sub.t,
                    t_clamped=sub.t_clamped,
                    inner_retries_max=sub.inner_retries_max))
    if best is None:
        raise CenterError("no multiplicative candidate survived")
    return best[1]
