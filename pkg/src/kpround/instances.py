"""Facility-location instances: container, metric validation, seeded generators,
and JSON round-tripping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .systems import EPS_EQ

EPS_METRIC = 1e-9


class InstanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FacilityInstance:
    """Clients and facilities over one metric; weight rows are budget-normalized
    (budget 1 per row), original budgets kept for reporting. Point order in the
    distance matrix: facilities first, then clients."""

    n_facilities: int
    n_clients: int
    dist: np.ndarray
    weights: np.ndarray        # m x n_facilities, normalized
    budgets: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def d_fc(self) -> np.ndarray:
        """Facility-to-client block, shape (n_facilities, n_clients)."""
        return self.dist[:self.n_facilities, self.n_facilities:]

    @property
    def d_ff(self) -> np.ndarray:
        return self.dist[:self.n_facilities, :self.n_facilities]

    def cost(self, subset) -> float:
        """Total client connection cost of a facility set."""
        idx = np.asarray(list(subset), dtype=np.intp)
        if idx.size == 0:
            return float("inf")
        return float(self.d_fc[idx].min(axis=0).sum())

    def radius(self, subset) -> float:
        idx = np.asarray(list(subset), dtype=np.intp)
        if idx.size == 0:
            return float("inf")
        return float(self.d_fc[idx].min(axis=0).max())

    def weight_of(self, subset) -> np.ndarray:
        idx = np.asarray(list(subset), dtype=np.intp)
        if idx.size == 0:
            return np.zeros(self.m)
        return self.weights[:, idx].sum(axis=1)

    @staticmethod
    def build(n_facilities: int, n_clients: int, dist, weights, budgets=None,
              validate: bool = True) -> "FacilityInstance":
        dist = np.asarray(dist, dtype=float)
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        if w.shape[1] != n_facilities:
            raise InstanceError("weight rows must cover the facilities")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InstanceError("weights must be finite and non-negative")
        if budgets is not None:
            budgets = np.asarray(budgets, dtype=float)
            if np.any(budgets <= 0):
                raise InstanceError("budgets must be positive")
            w = w / budgets[:, None]
        if validate:
            validate_metric(dist)
        dist = dist.copy()
        dist.setflags(write=False)
        w.setflags(write=False)
        return FacilityInstance(n_facilities=n_facilities, n_clients=n_clients,
                                dist=dist, weights=w, budgets=budgets)


def validate_metric(dist: np.ndarray, eps: float = EPS_METRIC) -> None:
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise InstanceError("distance matrix must be square")
    if np.any(np.abs(np.diag(dist)) > eps):
        raise InstanceError("non-zero self distance")
    if np.any(np.abs(dist - dist.T) > eps):
        raise InstanceError("asymmetric distances")
    if np.any(dist < -eps):
        raise InstanceError("negative distance")
    scale = max(1.0, float(dist.max(initial=0.0)))
    # triangle inequality, vectorized over the middle point
    for k in range(n):
        if np.any(dist > dist[:, k][:, None] + dist[k, :][None, :] + eps * scale):
            raise InstanceError(f"triangle inequality fails through point {k}")


def _tree_metric(n: int, rng: np.random.Generator) -> np.ndarray:
    parent = np.zeros(n, dtype=np.intp)
    depth = np.zeros(n)
    dist = np.zeros((n, n))
    for v in range(1, n):
        parent[v] = rng.integers(0, v)
        w = rng.uniform(0.2, 1.0)
        depth[v] = depth[parent[v]] + w
        # distance to earlier nodes via the tree path
        anc_v = []
        u = v
        while u != 0:
            anc_v.append(u)
            u = parent[u]
        anc_v.append(0)
        anc_set = {int(a): depth[v] - depth[a] for a in anc_v}
        for u in range(v):
            x = u
            while x not in anc_set:
                x = int(parent[x])
            dist[u, v] = dist[v, u] = (depth[u] - depth[x]) + anc_set[x]
    return dist


def _points_metric(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def _weight_model(model: str, nf: int, rng: np.random.Generator) -> np.ndarray:
    if model == "uniform":
        return rng.uniform(0.1, 1.0, size=nf)
    if model == "two_scale":
        big = rng.random(nf) < 0.25
        w = rng.uniform(0.05, 0.2, size=nf)
        w[big] = rng.uniform(0.5, 0.9, size=int(big.sum()))
        return w
    if model == "unit":
        return np.ones(nf)
    raise InstanceError(f"unknown weight model {model!r}")


def gen_instance(spec: dict, rand) -> FacilityInstance:
    """Seeded instance from a generator spec:
    {"metric": uniform|tree|clusters, "n_facilities", "n_clients",
     "m": rows, "weights": uniform|two_scale|unit, "budget_frac": fraction of
     total weight available per row (default 0.5)}."""
    from .rounding import as_source

    rng = as_source(rand).rng
    nf = int(spec.get("n_facilities", 8))
    nc = int(spec.get("n_clients", 2 * nf))
    n = nf + nc
    metric = spec.get("metric", "uniform")
    if metric == "uniform":
        dist = _points_metric(rng.uniform(0.0, 10.0, size=(n, 2)))
    elif metric == "clusters":
        k = max(2, n // 6)
        centers = rng.uniform(0.0, 10.0, size=(k, 2))
        pts = centers[rng.integers(0, k, size=n)] + rng.normal(0.0, 0.8, size=(n, 2))
        dist = _points_metric(pts)
    elif metric == "tree":
        dist = _tree_metric(n, rng)
    else:
        raise InstanceError(f"unknown metric {metric!r}")
    m = int(spec.get("m", 1))
    model = spec.get("weights", "uniform")
    rows = np.stack([_weight_model(model, nf, rng) for _ in range(m)])
    frac = float(spec.get("budget_frac", 0.5))
    budgets = np.maximum(rows.sum(axis=1) * frac, rows.max(axis=1) * 1.05)
    return FacilityInstance.build(nf, nc, dist, rows, budgets=budgets)


def instance_to_json(inst: FacilityInstance) -> dict:
    out = {"n_facilities": inst.n_facilities, "n_clients": inst.n_clients,
           "dist": inst.dist.tolist(), "M": inst.weights.tolist()}
    if inst.budgets is not None:
        out["budgets_original"] = inst.budgets.tolist()
    return out


def instance_from_json(data: dict) -> FacilityInstance:
    return FacilityInstance.build(int(data["n_facilities"]), int(data["n_clients"]),
                                  np.asarray(data["dist"], dtype=float),
                                  np.asarray(data["M"], dtype=float))
