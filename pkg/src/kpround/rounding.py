"""The knapsack-partition rounding family: per-block reduction to extreme points,
the randomized multi-block iteration, the main loop, independent selection, and
the dummy-element reduction that recovers plain dependent rounding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import max_step, null_vector, walk_inplace
from .systems import (EPS_FRAC, PartitionSystem, check_kps_feasible, frac_mask,
                      snap_block)


class RoundingError(ValueError):
    pass


@dataclass
class RoundingTranscript:
    """Seeded record of every random choice; replaying reproduces a run bit-exactly.

    Events: ["J", [block ids]]  subset draw of one iteration
            ["s", +1|-1]        symmetric step sign
            ["w", 0|1]          walk branch (1 = move along +v)
            ["p", k]            independent-selection pick inside one block
    Delta vectors are kept for audit only; replay re-derives them from the state.
    """

    seed: object = None
    events: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    deltas: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "events": self.events,
                           "flags": self.flags, "deltas": self.deltas})

    @staticmethod
    def from_json(text: str) -> "RoundingTranscript":
        d = json.loads(text)
        return RoundingTranscript(seed=d.get("seed"), events=d["events"],
                                  flags=d.get("flags", []), deltas=d.get("deltas", []))


class RandomSource:
    """Uniform-draw provider for the rounding operations, optionally recording."""

    def __init__(self, rng: np.random.Generator, record: bool = False, seed=None):
        self.rng = rng
        self.transcript = RoundingTranscript(seed=seed) if record else None

    def block_subset(self, r: int, p: float) -> np.ndarray:
        mask = self.rng.random(r) < p
        if self.transcript is not None:
            self.transcript.events.append(["J", np.nonzero(mask)[0].tolist()])
        return mask

    def sign(self) -> int:
        s = 1 if self.rng.random() < 0.5 else -1
        if self.transcript is not None:
            self.transcript.events.append(["s", s])
        return s

    def walk_branch(self, p_plus: float) -> bool:
        up = bool(self.rng.random() < p_plus)
        if self.transcript is not None:
            self.transcript.events.append(["w", int(up)])
        return up

    def pick(self, cum: np.ndarray) -> int:
        k = int(np.searchsorted(cum, self.rng.random() * cum[-1], side="right"))
        k = min(k, cum.shape[0] - 1)
        if self.transcript is not None:
            self.transcript.events.append(["p", k])
        return k

    def flag(self, name: str) -> None:
        if self.transcript is not None and name not in self.transcript.flags:
            self.transcript.flags.append(name)

    def record_delta(self, idx: np.ndarray, delta: np.ndarray) -> None:
        if self.transcript is not None:
            self.transcript.deltas.append([idx.tolist(), delta.tolist()])


class ReplaySource(RandomSource):
    """Feeds back the recorded choices of a transcript instead of drawing."""

    def __init__(self, transcript: RoundingTranscript):
        super().__init__(rng=None)
        self._events = transcript.events
        self._pos = 0

    def _pop(self, tag: str):
        if self._pos >= len(self._events):
            raise RoundingError("transcript exhausted during replay")
        etag, payload = self._events[self._pos]
        if etag != tag:
            raise RoundingError(f"transcript out of sync: expected {tag}, got {etag}")
        self._pos += 1
        return payload

    def block_subset(self, r: int, p: float) -> np.ndarray:
        mask = np.zeros(r, dtype=bool)
        mask[np.asarray(self._pop("J"), dtype=np.intp)] = True
        return mask

    def sign(self) -> int:
        return int(self._pop("s"))

    def walk_branch(self, p_plus: float) -> bool:
        return bool(self._pop("w"))

    def pick(self, cum: np.ndarray) -> int:
        return int(self._pop("p"))

    def flag(self, name: str) -> None:
        pass

    def record_delta(self, idx, delta) -> None:
        pass


def as_source(rand) -> RandomSource:
    if isinstance(rand, RandomSource):
        return rand
    if isinstance(rand, np.random.Generator):
        return RandomSource(rand)
    return RandomSource(np.random.default_rng(rand))


def recording_source(seed) -> RandomSource:
    return RandomSource(np.random.default_rng(seed), record=True, seed=seed)


def _weight_rows(ps: PartitionSystem, weights) -> np.ndarray:
    w = ps.weights if weights is None else np.atleast_2d(np.asarray(weights, dtype=float))
    if w is None:
        raise RoundingError("no weight rows given and the system carries none")
    if w.shape[1] != ps.n or not np.all(np.isfinite(w)):
        raise RoundingError(f"weight rows must be finite with shape (m, {ps.n})")
    return w


def ind_select(ps: PartitionSystem, y: np.ndarray, rand) -> np.ndarray:
    """One item per block, item j of its block with probability y_j."""
    rand = as_source(rand)
    check_kps_feasible(y, ps)
    out = np.zeros(ps.n)
    for b in ps.blocks:
        yb = y[b]
        top = int(np.argmax(yb))
        if yb[top] >= 1.0 - EPS_FRAC:
            out[b[top]] = 1.0
            continue
        k = rand.pick(np.cumsum(yb))
        out[b[k]] = 1.0
    return out


def intra_block_reduce(ps: PartitionSystem, weights, y: np.ndarray, rand) -> np.ndarray:
    """Unbiased walk to an extreme point of {w y' = w y, y'(G)=1} inside each block;
    leaves at most m+1 fractional entries per block and preserves the weighted sums
    and every potential value in expectation."""
    rand = as_source(rand)
    w = _weight_rows(ps, weights)
    check_kps_feasible(y, ps)
    out = np.array(y, dtype=float)
    ones = np.ones((1,))
    for b in ps.blocks:
        sub = out[b]
        if np.count_nonzero((sub > EPS_FRAC) & (sub < 1.0 - EPS_FRAC)) <= 1:
            continue
        a_eq = np.vstack([w[:, b], np.broadcast_to(ones, (1, b.size))])
        walk_inplace(sub, a_eq, rand)
        out[b] = sub
        snap_block(out, b)
    return out


def _profile(y: np.ndarray, ps: PartitionSystem):
    mask = frac_mask(y)
    counts = np.bincount(ps.block_of[mask], minlength=ps.r)
    per_block = np.maximum(counts - 1, 0)
    return mask, per_block, int(per_block.sum())


def _iteration(ps: PartitionSystem, w: np.ndarray, y: np.ndarray, rand: RandomSource,
               mask: np.ndarray, per_block: np.ndarray, total: int) -> np.ndarray:
    m = w.shape[0]
    p = 3.0 * m / total
    if p > 1.0:
        p = 1.0
        rand.flag("subset_probability_clamped")
    chosen = rand.block_subset(ps.r, p)
    if int(per_block[chosen].sum()) < m + 1:
        return y
    var_idx = np.nonzero(mask & chosen[ps.block_of])[0]
    var_blocks = ps.block_of[var_idx]
    uniq, inverse = np.unique(var_blocks, return_inverse=True)
    a_eq = np.zeros((m + uniq.size, var_idx.size))
    a_eq[:m] = w[:, var_idx]
    a_eq[m + inverse, np.arange(var_idx.size)] = 1.0
    v = null_vector(a_eq)
    if v is None:
        raise RoundingError("no admissible direction despite the counter guard")
    step = max_step(y[var_idx], v)
    delta = step * v
    out = np.array(y, dtype=float)
    out[var_idx] += rand.sign() * delta
    rand.record_delta(var_idx, delta)
    for bi in uniq:
        snap_block(out, ps.blocks[bi])
    return out


def kpr_iteration(ps: PartitionSystem, weights, y: np.ndarray, rand) -> np.ndarray:
    """One randomized multi-block step: sample blocks with probability 3m/T(y),
    move +-delta along a null-space direction of the sampled fractional
    coordinates. Returns y unchanged when the sampled mass is too small."""
    rand = as_source(rand)
    w = _weight_rows(ps, weights)
    mask, per_block, total = _profile(y, ps)
    if total == 0:
        return np.array(y, dtype=float)
    return _iteration(ps, w, y, rand, mask, per_block, total)


def kpr(ps: PartitionSystem, weights, y: np.ndarray, t: int, rand) -> np.ndarray:
    """Round y until at most t excess fractional entries remain (so at most 2t
    fractional coordinates overall), preserving block sums and weighted sums
    exactly and every coordinate in expectation. Requires t > 12m."""
    rand = as_source(rand)
    w = _weight_rows(ps, weights)
    if t <= 12 * w.shape[0]:
        raise RoundingError(f"need t > 12m (got t={t}, m={w.shape[0]})")
    out = intra_block_reduce(ps, w, y, rand)
    mask, per_block, total = _profile(out, ps)
    budget = 1000 + 400 * max(total, 1)
    while total > t:
        if budget == 0:
            raise RoundingError("iteration budget exhausted; rounding stalled")
        budget -= 1
        out = _iteration(ps, w, out, rand, mask, per_block, total)
        mask, per_block, total = _profile(out, ps)
    return out


def full_kpr(ps: PartitionSystem, weights, y: np.ndarray, t: int, rand) -> np.ndarray:
    """Rounding followed by independent selection on the leftover fractional part;
    fully integral output, one item per block."""
    rand = as_source(rand)
    return ind_select(ps, kpr(ps, weights, y, t, rand), rand)


def depround_system(v: int) -> PartitionSystem:
    """Two-item blocks {i, v+i}: item i paired with its not-selected placeholder."""
    idx = np.arange(v, dtype=np.intp)
    return PartitionSystem.build(2 * v, [np.array([i, v + i]) for i in idx])


def kpr_depround(x: np.ndarray, weights, t: int, rand) -> np.ndarray:
    """Dependent rounding of x in [0,1]^v under weight rows, via placeholder items
    with zero weight. Preserves every weighted sum exactly; at most 2t fractional
    entries remain (values strictly between 0 and 1 in the output)."""
    rand = as_source(rand)
    x = np.asarray(x, dtype=float)
    v = x.shape[0]
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if w.shape[1] != v:
        raise RoundingError(f"weight rows must have {v} columns")
    ps = depround_system(v)
    y = np.concatenate([x, 1.0 - x])
    for b in ps.blocks:
        snap_block(y, b)
    w2 = np.hstack([w, np.zeros_like(w)])
    return kpr(ps, w2, y, t, rand)[:v]
