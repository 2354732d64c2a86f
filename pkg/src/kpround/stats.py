"""Seed management and Monte-Carlo aggregation with standard errors and Wilson
confidence intervals."""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

Z95 = 1.959963984540054


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode())


def spawn_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for (seed, key...) - adding trials never perturbs
    existing ones because each trial owns its own key path."""
    ints = [int(seed)] + [tag_code(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(ints))


def wilson_interval(successes: int, trials: int, z: float = Z95) -> tuple:
    if trials <= 0:
        raise ValueError("need at least one trial")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def mean_stderr(values: np.ndarray) -> tuple:
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    if n == 0:
        raise ValueError("no samples")
    mean = v.mean(axis=0)
    if n == 1:
        return mean, np.zeros_like(mean)
    return mean, v.std(axis=0, ddof=1) / math.sqrt(n)


@dataclass(frozen=True)
class MonteCarloSummary:
    trials: int
    mean: np.ndarray
    stderr: np.ndarray
    values: np.ndarray | None = None

    def quantile(self, q: float) -> np.ndarray:
        if self.values is None:
            raise ValueError("summary was aggregated without sample retention")
        return np.quantile(self.values, q, axis=0)


def _chunk(fn, seed, tag, lo, hi):
    return [np.asarray(fn(spawn_rng(seed, tag, i)), dtype=float) for i in range(lo, hi)]


def monte_carlo(fn, trials: int, seed: int, tag: str = "mc", keep: bool = True,
                workers: int = 1) -> MonteCarloSummary:
    """Run fn(rng) on per-trial derived streams and aggregate. Aggregation is
    associative, so worker count never changes the result."""
    if trials <= 0:
        raise ValueError("need at least one trial")
    code = tag_code(tag)
    if workers <= 1:
        rows = _chunk(fn, seed, code, 0, trials)
    else:
        edges = np.linspace(0, trials, workers + 1, dtype=int)
        rows = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_chunk, fn, seed, code, int(lo), int(hi))
                    for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
            for f in futs:
                rows.extend(f.result())
    vals = np.stack(rows)
    mean, err = mean_stderr(vals)
    return MonteCarloSummary(trials=trials, mean=mean, stderr=err,
                             values=vals if keep else None)
