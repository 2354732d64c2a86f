"""Exhaustive oracles over facility subsets (desk scale)."""

from __future__ import annotations

import numpy as np

from .instances import FacilityInstance
from .systems import EPS_EQ

MAX_FACILITIES = 20


def _check_size(nf: int) -> None:
    if nf > MAX_FACILITIES:
        raise ValueError(f"exhaustive oracle capped at {MAX_FACILITIES} facilities")


def subset_tables(inst: FacilityInstance):
    """Per-subset minimum client distances, aggregated costs/radii, weights and
    feasibility, indexed by bitmask. Row 0 (empty set) is +inf cost."""
    nf, nc = inst.n_facilities, inst.n_clients
    _check_size(nf)
    size = 1 << nf
    mind = np.empty((size, nc))
    mind[0] = np.inf
    d = inst.d_fc
    low_idx = np.zeros(size, dtype=np.intp)
    for f in range(nf):
        low_idx[1 << f] = f
    for s in range(1, size):
        low = s & (-s)
        rest = s ^ low
        mind[s] = np.minimum(mind[rest], d[low_idx[low]]) if rest else d[low_idx[low]]
    costs = mind.sum(axis=1)
    radii = mind.max(axis=1)
    wt = np.zeros((size, inst.m))
    for f in range(nf):
        bit = 1 << f
        block = np.arange(size) & bit > 0
        wt[block] += inst.weights[:, f]
    feasible = np.all(wt <= 1.0 + EPS_EQ, axis=1)
    feasible[0] = False
    return mind, costs, radii, wt, feasible


def bits_to_set(mask: int) -> tuple:
    out = []
    f = 0
    while mask:
        if mask & 1:
            out.append(f)
        mask >>= 1
        f += 1
    return tuple(out)


def brute_force_opt(inst: FacilityInstance, objective: str = "median"):
    """Exact optimum over all feasible non-empty facility subsets."""
    _, costs, radii, _, feasible = subset_tables(inst)
    values = costs if objective == "median" else radii
    if objective not in ("median", "center"):
        raise ValueError("objective must be 'median' or 'center'")
    if not feasible.any():
        raise ValueError("no feasible facility subset")
    masked = np.where(feasible, values, np.inf)
    best = int(np.argmin(masked))
    return float(masked[best]), bits_to_set(best)
