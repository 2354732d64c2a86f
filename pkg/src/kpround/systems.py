"""Knapsack-partition systems: blocks, the no-selection potential, fractional-entry
counters and validators for the exact rounding guarantees."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Integrality classification / equality tolerances; see README for rationale.
EPS_FRAC = 1e-9
EPS_EQ = 1e-7

_q_clamp_count = 0


def q_clamp_count() -> int:
    """How many potential evaluations were clamped up from a small negative value."""
    return _q_clamp_count


class SystemError_(ValueError):
    """Malformed knapsack-partition input."""


@dataclass(frozen=True, eq=False)
class PartitionSystem:
    """Ground set [n] partitioned into blocks, plus optional knapsack weight rows.

    Weight rows are stored budget-normalized (budget 1 per row); the raw budgets are
    kept for reporting only.
    """

    n: int
    blocks: tuple
    weights: np.ndarray | None = None
    budgets: np.ndarray | None = None
    block_of: np.ndarray = field(repr=False, default=None)

    @property
    def r(self) -> int:
        return len(self.blocks)

    @property
    def m(self) -> int:
        return 0 if self.weights is None else self.weights.shape[0]

    @staticmethod
    def build(n: int, blocks, weights=None, budgets=None) -> "PartitionSystem":
        if n < 1:
            raise SystemError_("empty ground set")
        blks = tuple(np.asarray(sorted(b), dtype=np.intp) for b in blocks)
        if not blks:
            raise SystemError_("need at least one block")
        block_of = np.full(n, -1, dtype=np.intp)
        for bi, b in enumerate(blks):
            if b.size == 0:
                raise SystemError_(f"block {bi} is empty")
            if b.min() < 0 or b.max() >= n:
                raise SystemError_(f"block {bi} has out-of-range indices")
            if np.any(block_of[b] != -1):
                raise SystemError_(f"block {bi} overlaps another block")
            block_of[b] = bi
        if np.any(block_of < 0):
            raise SystemError_("blocks do not cover the ground set")
        w = None
        if weights is not None:
            w = np.array(weights, dtype=float)
            if w.ndim == 1:
                w = w[None, :]
            if w.shape != (w.shape[0], n) or w.shape[0] < 1:
                raise SystemError_(f"weight matrix shape {w.shape} != (m, {n})")
            if not np.all(np.isfinite(w)):
                raise SystemError_("non-finite weights")
            if budgets is not None:
                budgets = np.asarray(budgets, dtype=float)
                if budgets.shape != (w.shape[0],) or np.any(budgets <= 0):
                    raise SystemError_("budgets must be positive, one per row")
                w = w / budgets[:, None]
            if np.any(w < 0):
                raise SystemError_("negative weights")
            w.setflags(write=False)
        block_of.setflags(write=False)
        return PartitionSystem(n=n, blocks=blks, weights=w,
                               budgets=None if budgets is None else budgets.copy(),
                               block_of=block_of)


def q_potential(w_set, y: np.ndarray, ps: PartitionSystem) -> float:
    """prod over blocks of (1 - mass of y on the block's part of w_set).

    Equals the probability that independent selection opens nothing in w_set.
    Tiny negative values from float error are clamped to 0 (and counted).
    """
    global _q_clamp_count
    idx = np.asarray(list(w_set) if not isinstance(w_set, np.ndarray) else w_set,
                     dtype=np.intp)
    if idx.size == 0:
        return 1.0
    if idx.min() < 0 or idx.max() >= ps.n:
        raise IndexError("w_set index out of range")
    touched = ps.block_of[idx]
    mass = np.zeros(ps.r)
    np.add.at(mass, touched, y[idx])
    val = float(np.prod(1.0 - mass[np.unique(touched)]))
    if val < 0.0:
        _q_clamp_count += 1
        val = 0.0
    return val


def support(w_set, ps: PartitionSystem) -> np.ndarray:
    """Blocks intersecting w_set, ascending."""
    idx = np.asarray(list(w_set) if not isinstance(w_set, np.ndarray) else w_set,
                     dtype=np.intp)
    if idx.size == 0:
        return np.empty(0, dtype=np.intp)
    return np.unique(ps.block_of[idx])


def wedge(w_set, x_blocks, ps: PartitionSystem) -> np.ndarray:
    """Restriction of w_set to the blocks in x_blocks."""
    idx = np.asarray(list(w_set) if not isinstance(w_set, np.ndarray) else w_set,
                     dtype=np.intp)
    if idx.size == 0:
        return idx
    keep = np.isin(ps.block_of[idx], np.asarray(list(x_blocks), dtype=np.intp))
    return idx[keep]


def frac_mask(y: np.ndarray) -> np.ndarray:
    return (y > EPS_FRAC) & (y < 1.0 - EPS_FRAC)


@dataclass(frozen=True)
class FracProfile:
    per_block: np.ndarray  # max(0, #fractional in block - 1)
    total: int
    frac_set: np.ndarray


def frac_profile(y: np.ndarray, ps: PartitionSystem) -> FracProfile:
    mask = frac_mask(y)
    counts = np.zeros(ps.r, dtype=np.intp)
    np.add.at(counts, ps.block_of[mask], 1)
    per_block = np.maximum(counts - 1, 0)
    return FracProfile(per_block=per_block, total=int(per_block.sum()),
                       frac_set=np.nonzero(mask)[0])


def t_counter(y: np.ndarray, ps: PartitionSystem) -> int:
    mask = frac_mask(y)
    counts = np.zeros(ps.r, dtype=np.intp)
    np.add.at(counts, ps.block_of[mask], 1)
    return int(np.maximum(counts - 1, 0).sum())


def block_sums(y: np.ndarray, ps: PartitionSystem) -> np.ndarray:
    out = np.zeros(ps.r)
    np.add.at(out, ps.block_of, y)
    return out


def is_kps_feasible(y: np.ndarray, ps: PartitionSystem, eps: float = EPS_EQ) -> bool:
    if y.shape != (ps.n,):
        return False
    if np.any(y < -eps) or np.any(y > 1.0 + eps):
        return False
    return bool(np.all(np.abs(block_sums(y, ps) - 1.0) <= eps))


def check_kps_feasible(y: np.ndarray, ps: PartitionSystem, eps: float = EPS_EQ) -> None:
    if not is_kps_feasible(y, ps, eps):
        raise SystemError_("vector is not feasible for the partition system")


def snap_block(y: np.ndarray, block: np.ndarray) -> None:
    """Snap near-integral entries of one block to {0,1} exactly and restore the
    block sum to exactly 1 by adjusting one remaining fractional coordinate.

    In-place; the renormalization shift is O(accumulated float error) << EPS_EQ.
    """
    yb = y[block]
    yb[yb <= EPS_FRAC] = 0.0
    yb[yb >= 1.0 - EPS_FRAC] = 1.0
    defect = 1.0 - yb.sum()
    if defect != 0.0:
        frac = np.nonzero((yb > 0.0) & (yb < 1.0))[0]
        if frac.size:
            yb[frac[0]] += defect
            if yb[frac[0]] <= EPS_FRAC:
                yb[frac[0]] = 0.0
            elif yb[frac[0]] >= 1.0 - EPS_FRAC:
                yb[frac[0]] = 1.0
        elif abs(defect) > EPS_EQ:
            raise SystemError_(f"integral block sum off by {defect:g}")
    y[block] = yb


def snap(y: np.ndarray, ps: PartitionSystem, touched=None) -> None:
    blocks = range(ps.r) if touched is None else touched
    for bi in blocks:
        snap_block(y, ps.blocks[bi])


@dataclass(frozen=True)
class EPropertyReport:
    e3: bool  # block sums preserved at 1
    e4: bool  # weighted sums preserved
    e5: bool  # at most 2t fractional entries
    e6: bool  # at most m+1 fractional entries per block
    max_block_err: float
    max_weight_err: float
    n_fractional: int
    max_frac_per_block: int

    @property
    def ok(self) -> bool:
        return self.e3 and self.e4 and self.e5 and self.e6


def validate_e_properties(y_in: np.ndarray, y_out: np.ndarray, ps: PartitionSystem,
                          t: int, weights: np.ndarray | None = None) -> EPropertyReport:
    """Check the exact invariants of a rounding output against its input."""
    w = ps.weights if weights is None else np.atleast_2d(np.asarray(weights, dtype=float))
    if y_in.shape != (ps.n,) or y_out.shape != (ps.n,):
        raise SystemError_("vector length mismatch")
    m = 0 if w is None else w.shape[0]
    block_err = float(np.abs(block_sums(y_out, ps) - 1.0).max())
    weight_err = 0.0 if w is None else float(np.abs(w @ y_out - w @ y_in).max())
    mask = frac_mask(y_out)
    counts = np.zeros(ps.r, dtype=np.intp)
    np.add.at(counts, ps.block_of[mask], 1)
    return EPropertyReport(
        e3=block_err <= EPS_EQ,
        e4=weight_err <= EPS_EQ,
        e5=int(mask.sum()) <= 2 * t,
        e6=int(counts.max(initial=0)) <= m + 1,
        max_block_err=block_err,
        max_weight_err=weight_err,
        n_fractional=int(mask.sum()),
        max_frac_per_block=int(counts.max(initial=0)),
    )


def kps_to_json(ps: PartitionSystem, y: np.ndarray | None = None) -> dict:
    out = {"n": ps.n, "blocks": [b.tolist() for b in ps.blocks]}
    if ps.weights is not None:
        out["M"] = ps.weights.tolist()
    if y is not None:
        out["y"] = np.asarray(y, dtype=float).tolist()
    return out


def kps_from_json(data: dict):
    ps = PartitionSystem.build(int(data["n"]), data["blocks"],
                               weights=data.get("M"))
    y = None if "y" not in data else np.asarray(data["y"], dtype=float)
    return ps, y
