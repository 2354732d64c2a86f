import itertools
import math

import numpy as np
import pytest

from kpround.bruteforce import brute_force_opt
from kpround.instances import FacilityInstance, gen_instance
from kpround.median_pairs import (DUMMY, BundlingError, MedianPipeline,
                                  MedianError, bundle, build_pair_system,
                                  cl_independent_selection,
                                  knapsack_median_rounding, mkm_additive,
                                  mkm_multiplicative, solve_median_lp,
                                  split_facilities)
from kpround.rounding import ind_select
from kpround.stats import spawn_rng
from kpround.systems import EPS_EQ, q_potential

MEDIUM_SPEC = {"n_facilities": 8, "n_clients": 10, "m": 2, "budget_frac": 0.5}


def test_lp_single_facility():
    pts = np.array([0.0, 2.0])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(1, 1, dist, [[0.5]], budgets=[1.0])
    sol = solve_median_lp(inst)
    assert sol.y[0] == pytest.approx(1.0)
    assert sol.objective == pytest.approx(2.0)


def test_lp_below_integral_opt():
    for k in range(20):
        inst = gen_instance({"n_facilities": 7, "n_clients": 9, "m": 2}, spawn_rng(k, "lpo"))
        sol = solve_median_lp(inst)
        opt, _ = brute_force_opt(inst, "median")
        assert sol.objective <= opt + 1e-7
        # constraint validation
        assert np.abs(sol.x.sum(axis=0) - 1).max() <= 1e-7
        assert np.all(sol.x <= sol.y[:, None] + 1e-9)
        assert np.all(inst.weights @ sol.y <= 1 + 1e-7)


def test_lp_infeasible_budgets():
    pts = np.array([0.0, 2.0])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(1, 1, dist, [[2.0]], budgets=[1.0])
    with pytest.raises(MedianError):
        solve_median_lp(inst)


def test_split_hand_example():
    # one facility with assignments 0.6 and 0.4 -> copies of size 0.4 and 0.2
    pts = np.array([0.0, 1.0, 2.0, 3.0])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(2, 2, dist, [[0.3, 0.3]], budgets=[1.0])
    sol = solve_median_lp(inst)
    hand = sol.__class__(inst=inst, x=np.array([[0.6, 0.4], [0.4, 0.6]]),
                         y=np.array([0.6, 0.6]),
                         r=(np.array([[0.6, 0.4], [0.4, 0.6]]) * inst.d_fc).sum(axis=0),
                         objective=0.0, origin=np.arange(2))
    split = split_facilities(hand)
    sizes = sorted(split.y[split.origin == 0].tolist())
    assert sizes == [pytest.approx(0.2), pytest.approx(0.4)]
    # all-or-nothing assignments against copy openings
    mask = split.x > 0
    assert np.allclose(split.x[mask], np.broadcast_to(split.y[:, None], split.x.shape)[mask])


def test_split_preserves_objective_and_weighted_openings():
    for k in range(15):
        inst = gen_instance(MEDIUM_SPEC, spawn_rng(k, "spl"))
        sol = solve_median_lp(inst)
        split = split_facilities(sol)
        assert split.objective == pytest.approx(sol.objective, abs=1e-6)
        # weighted opening mass per original facility is preserved up to trimming
        for i in range(inst.n_facilities):
            copies = split.origin == i
            trimmed = min(float(sol.y[i]), float(sol.x[i].max(initial=0.0)))
            assert split.y[copies].sum() == pytest.approx(trimmed, abs=1e-7)
        assert np.all(split.inst.weights @ split.y <= 1 + 1e-6)


def test_split_identity_when_already_split():
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(99, "spi"))
    split = split_facilities(solve_median_lp(inst))
    again = split_facilities(split)
    assert again.y.shape == split.y.shape
    assert np.allclose(np.sort(again.y), np.sort(split.y), atol=1e-9)


def test_bundle_single_client_single_facility():
    pts = np.array([0.0, 0.5])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(1, 1, dist, [[0.5]], budgets=[1.0])
    pipe = MedianPipeline.build(inst)
    bnd = pipe.bundling
    assert bnd.filtered.tolist() == [0]
    assert bnd.edges == [] and bnd.unmatched == 0
    assert bnd.bundles[0].size == 1


def test_bundle_two_far_clients():
    pts = np.array([0.0, 100.0, 0.0, 100.0])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(2, 2, dist, [[0.5, 0.5]], budgets=[1.0])
    pipe = MedianPipeline.build(inst)
    bnd = pipe.bundling
    assert sorted(bnd.filtered.tolist()) == [0, 1]
    assert len(bnd.edges) == 1 and bnd.unmatched is None
    for j in bnd.filtered:
        assert pipe.sol.y[bnd.bundles[int(j)]].sum() == pytest.approx(1.0)


def test_bundle_validator_sweep():
    bad = 0
    for k in range(60):
        inst = gen_instance({"n_facilities": 7, "n_clients": 9,
                             "m": int(1 + k % 3)}, spawn_rng(k, "bsw"))
        try:
            MedianPipeline.build(inst)
        except BundlingError:
            bad += 1
    assert bad == 0


def test_pair_masses_match_displayed_formulas():
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(7, "pm"))
    pipe = MedianPipeline.build(inst)
    ps, z = pipe.pairsys.ps, pipe.pairsys.z
    y = pipe.sol.y
    bnd = pipe.bundling
    for e, (a, b) in enumerate(bnd.edges):
        ua, ub = bnd.bundles[a], bnd.bundles[b]
        ya, yb = y[ua].sum(), y[ub].sum()
        blk = ps.blocks[e]
        assert z[blk].sum() == pytest.approx(1.0, abs=1e-9)
        for v in blk:
            i, i2 = pipe.pairsys.pairs[v]
            if i2 == DUMMY:
                assert z[v] == pytest.approx((1 - yb) * y[i] / ya, abs=1e-9)
            elif i == DUMMY:
                assert z[v] == pytest.approx((1 - ya) * y[i2] / yb, abs=1e-9)
            else:
                assert z[v] == pytest.approx((ya + yb - 1) * y[i] * y[i2] / (ya * yb),
                                             abs=1e-9)
    # facility marginal mass in z equals its opening
    for j in bnd.filtered:
        for i in bnd.bundles[int(j)]:
            items = pipe.pairsys.lift([i])
            assert z[items].sum() == pytest.approx(y[i], abs=1e-9)


def test_mass_degenerate_formulas():
    # both bundles full: only two-facility pairs carry mass
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(7, "pm"))
    pipe = MedianPipeline.build(inst)
    y = pipe.sol.y
    bnd = pipe.bundling
    for e, (a, b) in enumerate(bnd.edges):
        ya, yb = y[bnd.bundles[a]].sum(), y[bnd.bundles[b]].sum()
        blk = pipe.pairsys.ps.blocks[e]
        if ya > 1 - 1e-9 and yb > 1 - 1e-9:
            kinds = {tuple(pipe.pairsys.pairs[v] == DUMMY) for v in blk}
            assert kinds <= {(False, False)}


def test_lift_correctness_exhaustive():
    # (no open facility in W) iff (no selected pair meets the lifted set), over
    # every integral selection of a small system
    inst = gen_instance({"n_facilities": 5, "n_clients": 6, "m": 1}, spawn_rng(3, "lift"))
    pipe = MedianPipeline.build(inst)
    ps = pipe.pairsys.ps
    if ps.r > 4:
        pytest.skip("system larger than the exhaustive budget")
    nf_split = pipe.sol.inst.n_facilities
    choices = [b.tolist() for b in ps.blocks]
    for combo in itertools.product(*choices):
        sel = np.zeros(ps.n)
        sel[list(combo)] = 1.0
        opened = pipe.pairsys.open_facilities(sel)
        for _ in range(3):
            w = np.nonzero(np.asarray([hash((_, f, 7)) % 3 == 0 for f in range(nf_split)]))[0]
            lifted = pipe.pairsys.lift(w)
            no_open = np.intersect1d(opened, w).size == 0
            q = q_potential(lifted, sel, ps)
            assert no_open == (q == 1.0)


def test_qbnd_pair_potential_bound():
    # potential of a lifted set restricted to one edge is at most the unclaimed
    # bundle mass of the probed client
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(11, "qb"))
    pipe = MedianPipeline.build(inst)
    y = pipe.sol.y
    bnd = pipe.bundling
    rng = np.random.default_rng(0)
    nf_split = pipe.sol.inst.n_facilities
    for e, (a, b) in enumerate(bnd.edges):
        for j in (a, b):
            for _ in range(5):
                x_set = rng.choice(nf_split, size=nf_split // 2, replace=False)
                uj = bnd.bundles[j]
                lifted = pipe.pairsys.lift(np.intersect1d(uj, x_set))
                blk = np.asarray(pipe.pairsys.ps.blocks[e])
                lifted_e = np.intersect1d(lifted, blk)
                q = q_potential(lifted_e, pipe.pairsys.z, pipe.pairsys.ps)
                assert q <= 1.0 - y[np.intersect1d(uj, x_set)].sum() + 1e-9


def test_independent_selection_properties():
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(13, "cli"))
    pipe = MedianPipeline.build(inst)
    trials = 3000
    nf = inst.n_facilities
    opens = np.zeros(nf)
    cost_acc = 0.0
    for k in range(trials):
        s = cl_independent_selection(pipe.pairsys, spawn_rng(k, "clis"))
        orig = pipe.to_original(s)
        opens[orig] += 1
        cost_acc += pipe.client_dists(orig).sum()
    y_orig = np.zeros(nf)
    np.add.at(y_orig, pipe.sol.origin, pipe.sol.y)
    stderr = math.sqrt(0.25 / trials)
    # (B1): open probability at most the LP opening
    assert np.all(opens / trials <= y_orig + 4 * stderr)
    # (B3): mean cost at most 3.25 times the LP cost vector
    r_total = pipe.r.sum()
    assert cost_acc / trials <= 3.25 * r_total + 4 * stderr * inst.n_clients * inst.dist.max()


def test_rounding_integral_system_matches_independent_support():
    # fully integral pair masses: rounding is deterministic
    pts = np.array([0.0, 100.0, 0.0, 100.0])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(2, 2, dist, [[0.5, 0.5]], budgets=[1.0])
    pipe = MedianPipeline.build(inst)
    if np.any((pipe.pairsys.z > 1e-9) & (pipe.pairsys.z < 1 - 1e-9)):
        pytest.skip("system not integral for this draw")
    a = knapsack_median_rounding(pipe, 30, spawn_rng(0, "int"))
    b_ = cl_independent_selection(pipe.pairsys, spawn_rng(1, "int2"))
    assert np.array_equal(a.open_set, pipe.to_original(b_))


def test_rounding_flags_regime_and_weights():
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(17, "reg"))
    pipe = MedianPipeline.build(inst)
    res = knapsack_median_rounding(pipe, 25, spawn_rng(0, "regr"))
    assert res.out_of_regime
    assert res.open_set.size > 0
    assert np.isfinite(res.cost)


def test_mean_weight_conservation():
    inst = gen_instance(MEDIUM_SPEC, spawn_rng(19, "mw"))
    pipe = MedianPipeline.build(inst)
    ps, z = pipe.pairsys.ps, pipe.pairsys.z
    trials = 3000
    acc = np.zeros(ps.m)
    from kpround.rounding import full_kpr
    for k in range(trials):
        sel = full_kpr(ps, ps.weights, z, 25, spawn_rng(k, "mwc"))
        acc += ps.weights @ sel
    base = ps.weights @ z
    spread = np.sqrt((ps.weights ** 2 @ (z * (1 - z))) / trials)
    assert np.all(np.abs(acc / trials - base) <= 4 * spread + 1e-3)


def test_mkm_additive_integral_lp():
    # an instance whose LP is integral: accepted instantly with a zero-order need
    pts = np.array([0.0, 50.0, 0.0, 50.0])
    dist = np.abs(pts[:, None] - pts[None, :])
    inst = FacilityInstance.build(2, 2, dist, [[0.4, 0.4]], budgets=[1.0])
    res = mkm_additive(inst, gamma=0.25, rand=spawn_rng(0, "mka"), c4=1.0)
    assert res.cost == pytest.approx(res.lp_objective, abs=1e-6)
    assert res.certificate.order == 0


def test_mkm_additive_accepts_and_certifies():
    for k in range(6):
        inst = gen_instance({"n_facilities": 8, "n_clients": 10, "m": 2,
                             "budget_frac": 0.55}, spawn_rng(k, "mkaa"))
        res = mkm_additive(inst, gamma=0.25, rand=spawn_rng(k, "mkar"), c4=1.0)
        assert res.cost <= (3.25 + 0.5) * res.lp_objective + 1e-9
        assert res.certificate.order <= res.q_limit
        assert res.retries <= 40


def test_mkm_multiplicative_budget_cap():
    for k in range(4):
        inst = gen_instance({"n_facilities": 7, "n_clients": 8, "m": 2,
                             "weights": "two_scale", "budget_frac": 0.6},
                            spawn_rng(k, "mkm"))
        eps = 0.4
        res = mkm_multiplicative(inst, gamma=0.3, eps=eps, rand=spawn_rng(k, "mkmr"), c4=1.0)
        assert np.all(inst.weight_of(res.open_set) <= 1 + 2 * eps + 1e-7)
        opt, _ = brute_force_opt(inst, "median")
        assert res.cost <= (3.25 + 10 * 0.3) * opt + 1e-6
