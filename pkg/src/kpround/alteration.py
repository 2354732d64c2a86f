"""Additive pseudo-solution machinery: minimum discard sets, per-constraint
certificates, and the discard-size concentration experiment for independent and
balls-in-bins generators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .systems import EPS_EQ

# Continuity noise added to atomic generators so the threshold equation has a
# root; sized so the bisection can resolve the root in float64 (the residual
# slope on the noise ramp is ~n/NOISE, and ulp(alpha)*slope must stay tiny).
NOISE = 1e-6


def min_discard_set(values, budget: float) -> np.ndarray:
    """Minimum-cardinality index set whose removal brings the sum under budget.

    Removes items in decreasing value order (ties: lower index first); greedy is
    cardinality-optimal because swapping any discarded item for a larger kept one
    never helps.
    """
    vals = np.asarray(values, dtype=float)
    if np.any(vals < 0) or budget < 0:
        raise ValueError("values and budget must be non-negative")
    excess = vals.sum() - budget
    if excess <= EPS_EQ:
        return np.empty(0, dtype=np.intp)
    order = np.lexsort((np.arange(vals.shape[0]), -vals))
    removed = np.cumsum(vals[order])
    k = int(np.searchsorted(removed, excess - EPS_EQ, side="left")) + 1
    return order[:k]


@dataclass(frozen=True)
class PseudoSolution:
    """Selected set plus, per constraint row, a budget-feasible core and a small
    discard set; order = largest discard cardinality over the rows."""

    selected: np.ndarray
    kept: list
    discarded: list
    order: int


@dataclass(frozen=True)
class CertificationFailure:
    row: int
    required: int
    limit: int

    def __bool__(self) -> bool:
        return False


def certify_pseudo(selected, weights, q: int):
    """Certify that `selected` is within additive order q of every budget row;
    returns a PseudoSolution, or the first violating row as a failure value."""
    sel = np.asarray(sorted(selected), dtype=np.intp)
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    kept, discarded, order = [], [], 0
    for k in range(w.shape[0]):
        local = min_discard_set(w[k, sel], 1.0)
        if local.shape[0] > q:
            return CertificationFailure(row=k, required=int(local.shape[0]), limit=q)
        out = sel[local]
        discarded.append(out)
        kept.append(np.setdiff1d(sel, out, assume_unique=True))
        order = max(order, int(local.shape[0]))
    return PseudoSolution(selected=sel, kept=kept, discarded=discarded, order=order)


# ---------------------------------------------------------------------------
# Generators for the concentration experiment. Each produces n non-negative
# variables with known total mean and an analytic per-variable survival function
# (of the noise-smoothed law, so the threshold equation always has a root).


class Generator:
    name = "generator"

    def __init__(self, n: int, mean: float):
        if mean <= 0 or mean > 1 + EPS_EQ:
            raise ValueError("total mean must lie in (0, 1]")
        self.n = n
        self.mean = float(mean)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def survival_one(self, alpha: float) -> float:
        """Pr(X_1 > alpha) for the noise-smoothed variable."""
        raise NotImplementedError


def _atom_survival(atoms, probs, noise, alpha):
    # survival of X + U[0, noise] where X has the given atoms
    s = 0.0
    for a, p in zip(atoms, probs):
        if alpha <= a:
            s += p
        elif alpha < a + noise:
            s += p * (a + noise - alpha) / noise
    return s


class BernoulliScaled(Generator):
    """n i.i.d. Bernoulli(p) scaled so the total mean is `mean`."""

    name = "bernoulli"

    def __init__(self, n: int, mean: float, p: float = 0.5):
        super().__init__(n, mean)
        self.p = float(p)
        self.scale = mean / (n * p)

    def sample(self, rng):
        hits = rng.random(self.n) < self.p
        return hits * self.scale + rng.random(self.n) * NOISE

    def survival_one(self, alpha):
        return _atom_survival([0.0, self.scale], [1.0 - self.p, self.p], NOISE, alpha)


class UniformGenerator(Generator):
    """n i.i.d. U[0, 2*mean/n]."""

    name = "uniform"

    def __init__(self, n: int, mean: float):
        super().__init__(n, mean)
        self.hi = 2.0 * mean / n

    def sample(self, rng):
        return rng.random(self.n) * self.hi

    def survival_one(self, alpha):
        if alpha < 0:
            return 1.0
        return max(0.0, 1.0 - alpha / self.hi)


class ParetoTruncated(Generator):
    """i.i.d. Pareto(shape) conditioned to [x_m, cap*x_m] (continuous, no atom at
    the cap), rescaled to the target mean."""

    name = "pareto"

    def __init__(self, n: int, mean: float, shape: float = 1.5, cap: float = 50.0):
        super().__init__(n, mean)
        if shape <= 1.0:
            raise ValueError("need shape > 1 for a finite mean")
        self.shape = float(shape)
        self.cap = float(cap)
        a = self.shape
        unit_mean = (a / (a - 1.0)) * (1.0 - cap ** (1.0 - a)) / (1.0 - cap ** (-a))
        self.xm = mean / (n * unit_mean)

    def sample(self, rng):
        u = rng.random(self.n)
        z = 1.0 - u * (1.0 - self.cap ** (-self.shape))
        return self.xm * z ** (-1.0 / self.shape)

    def survival_one(self, alpha):
        if alpha <= self.xm:
            return 1.0
        if alpha >= self.xm * self.cap:
            return 0.0
        a = self.shape
        return ((self.xm / alpha) ** a - self.cap ** (-a)) / (1.0 - self.cap ** (-a))


class BallsInBins(Generator):
    """Load vector of `balls` uniform throws into n bins, scaled to the target
    mean; negatively associated but not independent."""

    name = "binbin"

    def __init__(self, n: int, mean: float, balls: int | None = None):
        super().__init__(n, mean)
        self.balls = int(balls if balls is not None else max(n // 2, 1))
        self.scale = mean / self.balls

    def sample(self, rng):
        loads = np.bincount(rng.integers(0, self.n, size=self.balls), minlength=self.n)
        return loads * self.scale + rng.random(self.n) * NOISE

    def survival_one(self, alpha):
        # marginal load is Binomial(balls, 1/n); noise smears each atom k*scale
        from scipy.stats import binom

        if alpha <= 0.0:
            return 1.0
        k0 = math.ceil(alpha / self.scale)  # smallest k with k*scale >= alpha
        s = float(binom.sf(k0 - 1, self.balls, 1.0 / self.n))
        k_part = k0 - 1
        atom = k_part * self.scale
        if 0 <= k_part <= self.balls and atom < alpha < atom + NOISE:
            s += float(binom.pmf(k_part, self.balls, 1.0 / self.n)) \
                * (atom + NOISE - alpha) / NOISE
        return s


_GENERATORS = {g.name: g for g in
               (BernoulliScaled, UniformGenerator, ParetoTruncated, BallsInBins)}


def make_generator(name: str, n: int, mean: float = 1.0, **params) -> Generator:
    try:
        cls = _GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; have {sorted(_GENERATORS)}")
    return cls(n, mean, **params)


def solve_alpha(gen: Generator, delta: float, tol: float = 1e-10) -> float:
    """Threshold with sum of survival probabilities equal to 10*ln(1/delta),
    by bisection on the (continuous) smoothed survival function."""
    lam = math.log(1.0 / delta)
    target = 10.0 * lam
    if gen.n * gen.survival_one(0.0) <= target:
        return 0.0
    lo, hi = 0.0, max(gen.mean, 1.0)
    while gen.n * gen.survival_one(hi) > target:
        hi *= 2.0
        if hi > 1e12:
            raise ArithmeticError("threshold search diverged")
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        resid = gen.n * gen.survival_one(mid) - target
        if abs(resid) <= tol:
            return mid
        if resid > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(hi, 1.0):
            break
    return 0.5 * (lo + hi)


@dataclass
class ConcentrationStats:
    generator: str
    n: int
    delta: float
    trials: int
    greedy_sizes: np.ndarray = field(repr=False, default=None)
    threshold_sizes: np.ndarray = field(repr=False, default=None)
    alpha: float = 0.0
    quantile: float = 0.0          # (1-delta)-quantile of the greedy discard size
    ratio: float = 0.0             # quantile / sqrt(n ln(1/delta))
    threshold_quantile: float = 0.0
    threshold_ok_fraction: float = 0.0  # fraction of trials where the alpha-cut restores the budget

    def rows(self) -> list:
        base = (self.n, self.delta)
        return [base + (self.quantile, self.ratio, "greedy"),
                base + (self.threshold_quantile,
                        self.threshold_quantile / math.sqrt(self.n * math.log(1 / self.delta)),
                        "threshold")]


def concentration_trial(gen: Generator, delta: float, trials: int, rand) -> ConcentrationStats:
    """Repeatedly sample, compute the discard sets (greedy minimum and analytic
    threshold) that restore the mean budget, and summarize their sizes."""
    from .rounding import as_source

    rng = as_source(rand).rng
    alpha = solve_alpha(gen, delta)
    greedy = np.empty(trials, dtype=np.intp)
    thres = np.empty(trials, dtype=np.intp)
    ok = 0
    budget = gen.mean
    for i in range(trials):
        x = gen.sample(rng)
        greedy[i] = min_discard_set(x, budget).shape[0]
        cut = x > alpha
        thres[i] = int(cut.sum())
        # noise inflates the kept sum by at most n*NOISE
        if x[~cut].sum() <= budget + gen.n * NOISE + EPS_EQ:
            ok += 1
    qi = min(trials - 1, int(math.ceil((1.0 - delta) * trials)) - 1)
    gs = np.sort(greedy)
    ts = np.sort(thres)
    return ConcentrationStats(
        generator=gen.name, n=gen.n, delta=delta, trials=trials,
        greedy_sizes=greedy, threshold_sizes=thres, alpha=alpha,
        quantile=float(gs[qi]),
        ratio=float(gs[qi]) / math.sqrt(gen.n * math.log(1.0 / delta)),
        threshold_quantile=float(ts[qi]),
        threshold_ok_fraction=ok / trials,
    )


def binomial_deviation_oracle(n: int, p: float, delta: float) -> float:
    """Exact (1-delta)-quantile deviation of Binomial(n,p) above its mean: the
    discard size the scaled-Bernoulli system needs, computed from the CDF."""
    from scipy.stats import binom

    q = binom.ppf(1.0 - delta, n, p)
    return float(max(0.0, q - n * p))
