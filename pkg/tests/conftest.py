import numpy as np
import pytest

from kpround.systems import PartitionSystem


@pytest.fixture
def two_blocks():
    # blocks {0,1}, {2,3}
    return PartitionSystem.build(4, [[0, 1], [2, 3]])


def random_kps(rng, n_blocks=6, block_lo=2, block_hi=5, m=1, slack=0.85):
    """Random feasible knapsack-partition state: blocks, a dirichlet vector per
    block, and weight rows normalized so the fractional point is inside budget."""
    sizes = rng.integers(block_lo, block_hi + 1, size=n_blocks)
    n = int(sizes.sum())
    blocks, y, start = [], np.empty(n), 0
    for s in sizes:
        blocks.append(np.arange(start, start + s))
        y[start:start + s] = rng.dirichlet(np.ones(s))
        start += s
    raw = rng.uniform(0.05, 1.0, size=(m, n))
    budgets = (raw @ y) / slack
    ps = PartitionSystem.build(n, blocks, weights=raw, budgets=budgets)
    return ps, y
