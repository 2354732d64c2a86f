import math

import numpy as np
import pytest

from kpround.alteration import PseudoSolution, certify_pseudo
from kpround.bruteforce import brute_force_opt
from kpround.instances import FacilityInstance, gen_instance
from kpround.median_bipoint import (SQ3, BiPointError, bipoint_oracle,
                                    km_bifactor, km_multiplicative,
                                    make_bipoint, round_stars)
from kpround.stats import spawn_rng
from kpround.systems import EPS_EQ


def line_instance(fac_pts, cli_pts, weights, budget=1.0):
    pts = np.asarray(list(fac_pts) + list(cli_pts), dtype=float)
    dist = np.abs(pts[:, None] - pts[None, :])
    return FacilityInstance.build(len(fac_pts), len(cli_pts), dist,
                                  [list(weights)], budgets=[budget])


def test_oracle_exact_budget_set():
    # some feasible set has weight exactly 1: it can appear on both sides
    inst = line_instance([0.0, 4.0], [0.0, 4.0], [0.5, 0.5])
    bp = bipoint_oracle(inst)
    assert bp.mixed_cost() == pytest.approx(0.0)
    val, _ = brute_force_opt(inst, "median")
    assert bp.mixed_cost() <= 2 * val + EPS_EQ


def test_oracle_two_halves_example():
    # weights (0.6, 0.6): the heavy side must mix with b <= 2/3
    inst = line_instance([0.0, 10.0], [0.0, 10.0], [0.6, 0.6])
    bp = bipoint_oracle(inst)
    m1 = float(inst.weights[0][bp.f1].sum())
    m2 = float(inst.weights[0][bp.f2].sum())
    assert m1 <= 1.0 + EPS_EQ <= m2 + 2 * EPS_EQ
    assert (1 - bp.b) * m1 + bp.b * m2 <= 1.0 + EPS_EQ
    if bp.f2.size == 2 and bp.f1.size == 1:
        assert bp.b <= 2.0 / 3.0 + EPS_EQ


def test_oracle_validates_contract_on_random_instances():
    for k in range(25):
        inst = gen_instance({"n_facilities": 6, "n_clients": 8, "m": 1,
                             "budget_frac": 0.45}, spawn_rng(k, "bor"))
        bp = bipoint_oracle(inst)
        opt, _ = brute_force_opt(inst, "median")
        assert bp.mixed_cost() <= 2 * opt + EPS_EQ
        # sigma maps each heavy facility to its nearest feasible-side one
        d = inst.d_ff[np.ix_(bp.f2, bp.f1)]
        assert np.allclose(d[np.arange(bp.f2.size), bp.sigma], d.min(axis=1))


def test_make_bipoint_rejects_bad_inputs():
    inst = line_instance([0.0, 10.0], [1.0], [0.6, 0.6])
    with pytest.raises(BiPointError):
        make_bipoint(inst, [0, 1], [0, 1], 0.5)  # feasible side overweight
    with pytest.raises(BiPointError):
        make_bipoint(inst, [0], [1], 0.5)  # heavy side underweight


def test_round_stars_degenerate_b():
    inst = line_instance([0.0, 10.0], [0.0, 10.0], [0.6, 0.6])
    bp = bipoint_oracle(inst)
    zero = make_bipoint(inst, bp.f1, bp.f2, 0.0)
    res = round_stars(inst, zero, 13, spawn_rng(0, "b0"))
    assert np.array_equal(res.open_set, zero.f1)
    # b=1 requires the heavy side alone to fit the budget line
    inst2 = line_instance([0.0, 10.0], [0.0, 10.0], [0.4, 0.6])
    bp2 = make_bipoint(inst2, [0], [0, 1], 1.0)
    res2 = round_stars(inst2, bp2, 13, spawn_rng(1, "b1"))
    assert np.array_equal(res2.open_set, bp2.f2)


def test_round_stars_weight_identity_and_cap():
    rng = spawn_rng(2, "rs")
    for k in range(40):
        inst = gen_instance({"n_facilities": 8, "n_clients": 10, "m": 1,
                             "budget_frac": 0.45}, spawn_rng(k, "rsi"))
        bp = bipoint_oracle(inst)
        t = 13
        res = round_stars(inst, bp, t, spawn_rng(k, "rsr"))
        assert res.weight_identity_err <= 1e-7
        assert res.n_fractional <= 4 * t
        assert isinstance(res.certificate, PseudoSolution)
        assert res.certificate.order <= 4 * t


def test_round_stars_heavy_nearest_marginals():
    # opening a heavy-side facility only gains from fractional survivors:
    # E[opening mass] = b exactly, Pr(i2 in S) >= b, and on integral outcomes
    # Pr(i2 not in S) = 1 - b
    inst = line_instance([0.0, 6.0, 12.0], [5.5], [0.6, 0.5, 0.5])
    b = 0.3
    bp = make_bipoint(inst, [0], [1, 2], b)
    i2 = bp.i2[0]
    assert i2 not in bp.f1
    pos2 = int(np.nonzero(bp.f2 == i2)[0][0])
    trials = 4000
    open_count = 0
    mass = 0.0
    integral = 0
    closed_integral = 0
    for k in range(trials):
        res = round_stars(inst, bp, 13, spawn_rng(k, "marg"))
        val = res.star_sel[pos2]
        mass += val
        open_count += val > 0.0
        if val in (0.0, 1.0):
            integral += 1
            closed_integral += val == 0.0
    stderr = math.sqrt(0.25 / trials)
    assert abs(mass / trials - b) <= 4 * stderr + 0.01
    assert open_count / trials >= b - 4 * stderr
    if integral > 100:
        assert abs(closed_integral / integral - (1 - b)) <= 4 * math.sqrt(0.25 / integral) + 0.01


def test_round_stars_pair_closure_bound():
    # Pr(i1 and i2 both closed) <= b(1-b)(1 + O(1/t)); valid with fractional
    # survivors because closure only loses mass to them
    # seed/client chosen so the client's two anchors are distinct across sides
    inst = gen_instance({"n_facilities": 10, "n_clients": 6, "m": 1,
                         "budget_frac": 0.45}, spawn_rng(24, "pairi"))
    bp = bipoint_oracle(inst)
    assert 0.05 < bp.b < 0.95
    j = 3
    i1, i2 = bp.i1[j], bp.i2[j]
    assert i1 not in bp.f2 and i2 not in bp.f1
    pos1 = int(np.nonzero(bp.f1 == i1)[0][0])
    pos2 = int(np.nonzero(bp.f2 == i2)[0][0])
    trials = 4000
    both = 0
    for k in range(trials):
        res = round_stars(inst, bp, 13, spawn_rng(k, "pair"))
        both += (res.closed_frac[pos1] >= 1.0) and (res.star_sel[pos2] <= 0.0)
    bound = bp.b * (1 - bp.b) * (1 + 8.0 / 13.0)
    assert both / trials <= bound + 4 * math.sqrt(0.25 / trials)


def test_km_bifactor_returns_certified_solution():
    wins = 0
    total = 20
    for k in range(total):
        inst = gen_instance({"n_facilities": 7, "n_clients": 9, "m": 1,
                             "budget_frac": 0.5}, spawn_rng(k, "bif"))
        res = km_bifactor(inst, gamma=0.1, rand=spawn_rng(k, "bifr"))
        opt, _ = brute_force_opt(inst, "median")
        assert res.certificate.order <= 4 * res.t
        if res.cost <= (1 + SQ3 + 0.2) * opt + EPS_EQ:
            wins += 1
    assert wins >= 0.95 * total


def test_km_bifactor_optimal_feasible_side():
    # the feasible side is optimal: accepted instantly with a zero-order certificate
    inst = line_instance([0.0, 0.1], [0.0, 0.05], [0.9, 0.9])
    res = km_bifactor(inst, gamma=0.2, rand=spawn_rng(3, "opt"))
    assert res.restarts == 0
    opt, _ = brute_force_opt(inst, "median")
    assert res.cost <= opt + EPS_EQ


def test_km_multiplicative_no_big_facilities():
    # rho = eps*gamma above every weight: single empty guess, identical to the
    # plain additive solver on the same stream
    inst = gen_instance({"n_facilities": 6, "n_clients": 8, "m": 1,
                         "weights": "uniform", "budget_frac": 0.5},
                        spawn_rng(4, "mul"))
    gamma, eps = 0.9, 0.9
    assert np.all(inst.weights[0] < gamma * eps)
    res = km_multiplicative(inst, gamma=gamma, eps=eps, rand=spawn_rng(4, "mulr"))
    direct = km_bifactor(inst, gamma=gamma, rand=spawn_rng(4, "mulr"))
    assert np.array_equal(res.open_set, direct.open_set)
    assert res.cost == direct.cost


def test_km_multiplicative_respects_budget_cap():
    for k in range(8):
        inst = gen_instance({"n_facilities": 7, "n_clients": 8, "m": 1,
                             "weights": "two_scale", "budget_frac": 0.6},
                            spawn_rng(k, "mw"))
        res = km_multiplicative(inst, gamma=0.25, eps=0.25, rand=spawn_rng(k, "mwr"))
        assert res.max_weight <= 1.0 + 2 * 0.25 + EPS_EQ
        opt, _ = brute_force_opt(inst, "median")
        assert res.cost <= (1 + SQ3 + 10 * 0.25) * opt + 1e-6


def test_scalar_mixing_inequality_grid():
    # min(d1, (1-b)d1 + b d2 + 2 b(1-b) d2) <= (1+sqrt(3))/2 ((1-b)d1 + b d2)
    rng = np.random.default_rng(0)
    n = 10 ** 6
    d1 = rng.uniform(0, 1, n)
    d2 = rng.uniform(0, 1, n)
    b = rng.uniform(0, 1, n)
    lhs = np.minimum(d1, (1 - b) * d1 + b * d2 + 2 * b * (1 - b) * d2)
    rhs = (1 + SQ3) / 2 * ((1 - b) * d1 + b * d2)
    assert np.all(lhs <= rhs + 1e-12)
    # boundary case d1=1, d2=0, b=1
    assert min(1.0, 0.0) <= (1 + SQ3) / 2 * 0.0 + EPS_EQ
