"""Multi-knapsack median: LP relaxation, facility splitting, bundling into
disjoint facility sets with a near-perfect matching, the pair system over
two-facility selections, and rounding of that system (independent baseline and
the knapsack-partition rounding path)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .alteration import PseudoSolution, certify_pseudo
from .instances import FacilityInstance
from .linalg import LinearSystem, lp_solve
from .rounding import as_source, full_kpr, ind_select
from .systems import EPS_EQ, EPS_FRAC, PartitionSystem, q_potential

DUMMY = -1


class MedianError(ValueError):
    pass


class BundlingError(RuntimeError):
    """A bundling invariant failed; carries the offending rule for diagnosis."""


@dataclass(frozen=True, eq=False)
class MedianLpSolution:
    inst: FacilityInstance
    x: np.ndarray          # nf x nc assignment fractions
    y: np.ndarray          # nf openings
    r: np.ndarray          # per-client fractional connection cost
    objective: float
    origin: np.ndarray     # facility -> original facility id (identity pre-split)


def solve_median_lp(inst: FacilityInstance) -> MedianLpSolution:
    """The assignment LP: minimize total fractional connection cost subject to
    unit assignment per client, openings dominating assignments, and the
    budget-normalized knapsack rows."""
    nf, nc, m = inst.n_facilities, inst.n_clients, inst.m
    nv = nf + nf * nc
    c = np.concatenate([np.zeros(nf), inst.d_fc.flatten()])
    a_eq = np.zeros((nc, nv))
    for j in range(nc):
        a_eq[j, nf + j::nc] = 1.0
    b_eq = np.ones(nc)
    a_ub = np.zeros((nf * nc + m, nv))
    for i in range(nf):
        rows = slice(i * nc, (i + 1) * nc)
        a_ub[rows, nf + i * nc:nf + (i + 1) * nc] = np.eye(nc)
        a_ub[rows, i] = -1.0
    a_ub[nf * nc:, :nf] = inst.weights
    b_ub = np.concatenate([np.zeros(nf * nc), np.ones(m)])
    res = lp_solve(c, LinearSystem(a_eq=a_eq, b_eq=b_eq, a_ub=a_ub, b_ub=b_ub))
    if res.status == "infeasible":
        raise MedianError("budgets admit no fractional assignment")
    res.require_optimal()
    y = np.clip(res.x[:nf], 0.0, 1.0)
    x = np.clip(res.x[nf:].reshape(nf, nc), 0.0, 1.0)
    r = (x * inst.d_fc).sum(axis=0)
    return MedianLpSolution(inst=inst, x=x, y=y, r=r, objective=float(res.value),
                            origin=np.arange(nf, dtype=np.intp))


def _merge_levels(vals: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Ascending distinct positive values, merging float-noise neighbours."""
    pos = np.sort(vals[vals > tol])
    if pos.size == 0:
        return pos
    keep = [pos[0]]
    for v in pos[1:]:
        if v - keep[-1] > tol:
            keep.append(v)
    return np.asarray(keep)


def split_facilities(sol: MedianLpSolution) -> MedianLpSolution:
    """Split facilities into co-located copies so every assignment is all-or-
    nothing against its copy's opening. Copies keep the full original weight
    (the only choice that preserves every weighted opening sum and makes the
    final accounting charge a partially-opened facility in full)."""
    inst = sol.inst
    new_y, new_x_cols, new_w, new_origin, new_rows = [], [], [], [], []
    for i in range(inst.n_facilities):
        served = sol.x[i]
        top = float(served.max(initial=0.0))
        if top <= EPS_FRAC:
            continue  # serves nobody; contributes nothing to the objective
        levels = _merge_levels(served)
        prev = 0.0
        for lv in levels:
            size = lv - prev
            col = np.where(served >= lv - 1e-9, size, 0.0)
            new_y.append(size)
            new_x_cols.append(col)
            new_w.append(inst.weights[:, i])
            new_origin.append(sol.origin[i])
            new_rows.append(i)
            prev = lv
    if not new_y:
        raise MedianError("empty split: the LP assigned nothing")
    nf2 = len(new_y)
    order = np.concatenate([np.asarray(new_rows, dtype=np.intp),
                            inst.n_facilities + np.arange(inst.n_clients)])
    dist = inst.dist[np.ix_(order, order)]
    inst2 = FacilityInstance.build(nf2, inst.n_clients, dist,
                                   np.stack(new_w, axis=1), validate=False)
    x2 = np.stack(new_x_cols)
    y2 = np.asarray(new_y)
    r2 = (x2 * inst2.d_fc).sum(axis=0)
    return MedianLpSolution(inst=inst2, x=x2, y=y2, r=r2,
                            objective=float((x2 * inst2.d_fc).sum()),
                            origin=np.asarray(new_origin, dtype=np.intp))


@dataclass(frozen=True, eq=False)
class Bundling:
    sol: MedianLpSolution
    filtered: np.ndarray          # C' in admission order
    sigma: np.ndarray             # per client: its anchor in C'
    radii: dict                   # j in C' -> R_j (may be inf when |C'| = 1)
    bundles: dict                 # j in C' -> facility index array U_j
    edges: list                   # matching over C'
    unmatched: int | None


def _validate_bundling(bnd: Bundling) -> None:
    sol = bnd.sol
    r = sol.r
    # (B4) both halves, by construction of the anchor rule
    for j in range(sol.inst.n_clients):
        s = bnd.sigma[j]
        if r[s] > r[j] + EPS_EQ:
            raise BundlingError(f"anchor of client {j} has larger base cost")
        if sol.inst.dist[sol.inst.n_facilities + j, sol.inst.n_facilities + s] \
                > 4.0 * r[j] + EPS_EQ:
            raise BundlingError(f"anchor of client {j} is farther than 4r")
    seen = np.zeros(sol.inst.n_facilities, dtype=bool)
    for j in bnd.filtered:
        u = bnd.bundles[j]
        if np.any(seen[u]):
            raise BundlingError("bundles overlap")
        seen[u] = True
        mass = float(sol.y[u].sum())
        if not 0.5 - EPS_EQ <= mass <= 1.0 + EPS_EQ:
            raise BundlingError(f"bundle mass {mass:.6f} outside [1/2, 1]")
        # (B6): supported facilities strictly inside the half-separation ball
        rj = bnd.radii[j]
        d_fj = sol.inst.d_fc[:, j]
        ball = (d_fj < rj) & (sol.x[:, j] > EPS_FRAC)
        if np.any(ball & ~np.isin(np.arange(sol.inst.n_facilities), u)):
            raise BundlingError(f"bundle of client {j} misses a supported ball facility")


def bundle(sol: MedianLpSolution) -> Bundling:
    """Filter clients greedily by base cost, claim disjoint facility bundles,
    and match filtered clients by a greedy closest-pair rule. All structural
    invariants are validated; a failure aborts rather than propagating."""
    inst = sol.inst
    nf, nc = inst.n_facilities, inst.n_clients
    d_cc = inst.dist[nf:, nf:]
    order = np.lexsort((np.arange(nc), sol.r))
    filtered = []
    blocker = np.full(nc, -1, dtype=np.intp)
    for j in order:
        near = [c for c in filtered if d_cc[j, c] <= 4.0 * sol.r[j]]
        if near:
            blocker[j] = min(near, key=lambda c: (d_cc[j, c], c))
        else:
            filtered.append(int(j))
            blocker[j] = j
    filtered = np.asarray(filtered, dtype=np.intp)
    sigma = blocker  # nearest already-processed filtered client, or itself

    radii = {}
    for j in filtered:
        others = filtered[filtered != j]
        radii[int(j)] = float(d_cc[j, others].min()) / 2.0 if others.size else math.inf

    # every facility is claimed by its best filtered client (distance, index)
    d_fc = inst.d_fc
    best_client = np.full(nf, -1, dtype=np.intp)
    best_dist = np.full(nf, np.inf)
    for j in filtered:
        better = (d_fc[:, j] < best_dist - 1e-12) | \
                 (np.isclose(d_fc[:, j], best_dist) & (j < best_client))
        best_client[better] = j
        best_dist[better] = d_fc[better, j]
    bundles = {}
    for j in filtered:
        mine = np.nonzero((best_client == j) & (sol.x[:, j] > EPS_FRAC)
                          & (d_fc[:, j] <= 1.5 * radii[int(j)]))[0]
        # drop farthest facilities while the claimed mass exceeds one
        order_far = mine[np.lexsort((mine, d_fc[mine, j]))]
        csum = np.cumsum(sol.y[order_far])
        keep = int(np.searchsorted(csum, 1.0 + EPS_EQ, side="right"))
        bundles[int(j)] = np.sort(order_far[:keep])

    # greedy closest-pair matching
    left = set(int(j) for j in filtered)
    edges = []
    while len(left) > 1:
        pairs = sorted((d_cc[a, b], a, b) for a in left for b in left if a < b)
        _, a, b = pairs[0]
        edges.append((a, b))
        left.discard(a)
        left.discard(b)
    unmatched = left.pop() if left else None
    bnd = Bundling(sol=sol, filtered=filtered, sigma=sigma, radii=radii,
                   bundles=bundles, edges=edges, unmatched=unmatched)
    _validate_bundling(bnd)
    return bnd


@dataclass(frozen=True, eq=False)
class PairSystem:
    """Ground set of facility pairs (one per way an edge can open), one block per
    matching edge; the weight of a pair is the sum of its members' weights."""

    ps: PartitionSystem
    z: np.ndarray
    pairs: np.ndarray            # n_items x 2 facility ids (DUMMY for none)
    edge_of: np.ndarray
    bundling: Bundling

    def lift(self, facility_set) -> np.ndarray:
        """Items containing any facility of the set (the pair-space image)."""
        fs = np.asarray(list(facility_set), dtype=np.intp)
        if fs.size == 0:
            return np.empty(0, dtype=np.intp)
        return np.nonzero(np.isin(self.pairs[:, 0], fs)
                          | np.isin(self.pairs[:, 1], fs))[0]

    def open_facilities(self, selection: np.ndarray) -> np.ndarray:
        sel = self.pairs[selection >= 1.0 - EPS_FRAC]
        out = np.unique(sel[sel != DUMMY])
        return out.astype(np.intp)


def build_pair_system(bnd: Bundling, sol: MedianLpSolution) -> PairSystem:
    y = sol.y
    inst = sol.inst
    items, zs, blocks, edge_of = [], [], [], []

    def push(edge_idx, i, i2, zval):
        if zval <= 1e-15:
            return
        items.append((i, i2))
        zs.append(zval)
        edge_of.append(edge_idx)
        blocks[-1].append(len(items) - 1)

    for e, (a, b) in enumerate(bnd.edges):
        ua, ub = bnd.bundles[a], bnd.bundles[b]
        ya, yb = float(y[ua].sum()), float(y[ub].sum())
        blocks.append([])
        for i in ua:
            push(e, int(i), DUMMY, (1.0 - yb) * y[i] / ya)
        for i2 in ub:
            push(e, DUMMY, int(i2), (1.0 - ya) * y[i2] / yb)
        joint = ya + yb - 1.0
        if joint > 1e-15:
            for i in ua:
                for i2 in ub:
                    push(e, int(i), int(i2), joint * y[i] * y[i2] / (ya * yb))
    if bnd.unmatched is not None:
        j = bnd.unmatched
        uj = bnd.bundles[j]
        yj = float(y[uj].sum())
        e = len(bnd.edges)
        blocks.append([])
        for i in uj:
            push(e, int(i), DUMMY, float(y[i]))
        push(e, DUMMY, DUMMY, 1.0 - yj)
        if not blocks[-1]:
            raise MedianError("unmatched bundle carries no mass")
    if not blocks:
        raise MedianError("no matching edges: pair system is empty")

    pairs = np.asarray(items, dtype=np.intp)
    z = np.asarray(zs)
    for bi, blk in enumerate(blocks):
        mass = z[blk].sum()
        if abs(mass - 1.0) > EPS_EQ:
            raise MedianError(f"block {bi} mass {mass:.9f} != 1")
        z[blk] /= mass
    lifted = np.zeros((inst.m, len(items)))
    real0 = pairs[:, 0] != DUMMY
    real1 = pairs[:, 1] != DUMMY
    lifted[:, real0] += inst.weights[:, pairs[real0, 0]]
    lifted[:, real1] += inst.weights[:, pairs[real1, 1]]
    ps = PartitionSystem.build(len(items), blocks, weights=lifted)
    return PairSystem(ps=ps, z=z, pairs=pairs,
                      edge_of=np.asarray(edge_of, dtype=np.intp), bundling=bnd)


def cl_independent_selection(pairsys: PairSystem, rand) -> np.ndarray:
    """Baseline: select one pair per edge independently with the pair masses."""
    sel = ind_select(pairsys.ps, pairsys.z, as_source(rand))
    return pairsys.open_facilities(sel)


@dataclass(frozen=True, eq=False)
class MedianPipeline:
    """LP + splitting + bundling done once; rounding repeated cheaply."""

    inst: FacilityInstance
    sol: MedianLpSolution        # split solution
    bundling: Bundling
    pairsys: PairSystem
    lp_objective: float
    r: np.ndarray                # original per-client LP costs

    @staticmethod
    def build(inst: FacilityInstance) -> "MedianPipeline":
        base = solve_median_lp(inst)
        split = split_facilities(base)
        bnd = bundle(split)
        pairsys = build_pair_system(bnd, split)
        return MedianPipeline(inst=inst, sol=split, bundling=bnd, pairsys=pairsys,
                              lp_objective=base.objective, r=base.r)

    def to_original(self, split_set: np.ndarray) -> np.ndarray:
        return np.unique(self.sol.origin[split_set])

    def client_dists(self, original_set: np.ndarray) -> np.ndarray:
        if original_set.size == 0:
            return np.full(self.inst.n_clients, np.inf)
        return self.inst.d_fc[original_set].min(axis=0)


@dataclass(frozen=True, eq=False)
class MedianRoundResult:
    open_set: np.ndarray       # original facility ids
    dists: np.ndarray
    cost: float
    out_of_regime: bool
    beta_measured: float       # max d(j, S)/R_j over matched filtered clients


def _measure_beta(pipe: MedianPipeline, split_open: np.ndarray) -> float:
    bnd = pipe.bundling
    matched = [j for e in bnd.edges for j in e]
    if not matched or split_open.size == 0:
        return 0.0
    d = pipe.sol.inst.d_fc[split_open]
    best = 0.0
    for j in matched:
        rj = bnd.radii[j]
        if not math.isfinite(rj) or rj <= 0:
            continue
        best = max(best, float(d[:, j].min()) / rj)
    return best


def knapsack_median_rounding(inst_or_pipe, t: int, rand) -> MedianRoundResult:
    """Round the pair system through the knapsack-partition machinery and open
    the selected pairs' facilities."""
    rand = as_source(rand)
    pipe = inst_or_pipe if isinstance(inst_or_pipe, MedianPipeline) \
        else MedianPipeline.build(inst_or_pipe)
    m = pipe.inst.m
    if t <= 12 * m:
        raise MedianError(f"need t > 12m (got {t}, m={m})")
    sel = full_kpr(pipe.pairsys.ps, pipe.pairsys.ps.weights, pipe.pairsys.z, t, rand)
    split_open = pipe.pairsys.open_facilities(sel)
    opened = pipe.to_original(split_open)
    dists = pipe.client_dists(opened)
    return MedianRoundResult(open_set=opened, dists=dists, cost=float(dists.sum()),
                             out_of_regime=t < 10000 * m * m,
                             beta_measured=_measure_beta(pipe, split_open))


class RetryCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MkmResult:
    open_set: np.ndarray
    cost: float
    certificate: PseudoSolution
    t: int
    q_limit: int
    retries: int
    t_clamped: bool
    lp_objective: float


def mkm_additive(inst: FacilityInstance, gamma: float, rand,
                 c4: float | None = None, pipe: MedianPipeline | None = None,
                 t_override: int | None = None) -> MkmResult:
    """Retry rounding until the cost beats (3.25 + 2 gamma) times the LP bound
    and the additive certificate at the frozen constant succeeds."""
    from .fixtures import constant

    rand = as_source(rand)
    if not 0.0 < gamma < 1.0:
        raise MedianError("gamma must lie in (0,1)")
    if c4 is None:
        c4 = constant("c4_fullkpr_additive")
    pipe = pipe if pipe is not None else MedianPipeline.build(inst)
    m = inst.m
    t_raw = math.ceil(m * m / gamma)
    t = t_override if t_override is not None else max(t_raw, 12 * m + 1)
    q_limit = 2 * math.ceil(c4 * math.sqrt(t * math.log(m / gamma)))
    target = (3.25 + 2.0 * gamma) * pipe.lp_objective
    cap = math.ceil(1000.0 / gamma)
    for retries in range(cap):
        res = knapsack_median_rounding(pipe, t, rand)
        if res.cost > target + EPS_EQ:
            continue
        cert = certify_pseudo(res.open_set, inst.weights, q_limit)
        if cert:
            return MkmResult(open_set=res.open_set, cost=res.cost, certificate=cert,
                             t=t, q_limit=q_limit, retries=retries,
                             t_clamped=t != t_raw, lp_objective=pipe.lp_objective)
    raise RetryCapExceeded(f"no acceptable rounding in {cap} retries")


def mkm_multiplicative(inst: FacilityInstance, gamma: float, eps: float, rand,
                       guess_budget: int = 20000,
                       c4: float | None = None) -> MkmResult:
    """Big-facility guessing wrapper: zero out a guessed big-open set, renormalize
    the spare budgets, solve additively, keep the best candidate within
    (1 + 2 eps) of every budget row."""
    import itertools

    rand = as_source(rand)
    m = inst.m
    rho = eps / (m * math.sqrt(math.log(m / gamma) / gamma))
    w = inst.weights
    big = np.nonzero((w >= rho - EPS_EQ).any(axis=0))[0]
    small = np.setdiff1d(np.arange(inst.n_facilities), big)
    max_in = min(big.size, max(1, math.floor(m / rho)))
    guesses = [()]
    for k in range(1, max_in + 1):
        for g in itertools.combinations(big.tolist(), k):
            if np.all(w[:, list(g)].sum(axis=1) <= 1.0 + EPS_EQ):
                guesses.append(g)
        if len(guesses) > guess_budget:
            raise MedianError(f"guess enumeration exceeds {guess_budget}")
    best = None
    for guess in guesses:
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
                                          inst.dist[np.ix_(order, order)], new_w,
                                          validate=False)
        try:
            sub = mkm_additive(res_inst, gamma, rand, c4=c4)
        except (MedianError, RetryCapExceeded, BundlingError):
            continue
        opened = np.union1d(keep[sub.open_set], np.asarray(guess, dtype=np.intp)) \
            .astype(np.intp)
        max_w = float(inst.weight_of(opened).max())
        if max_w > 1.0 + 2.0 * eps + EPS_EQ:
            continue
        cost = inst.cost(opened)
        if best is None or cost < best.cost:
            best = MkmResult(open_set=opened, cost=cost, certificate=sub.certificate,
                             t=sub.t, q_limit=sub.q_limit, retries=sub.retries,
                             t_clamped=sub.t_clamped, lp_objective=sub.lp_objective)
    if best is None:
        raise MedianError("no feasible multiplicative candidate")
    return best
