"""Deterministic batch iteration."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, ParameterError


def batch_iter(dataset, batch_size: int, seed):
    """Yield shuffled batches; the final partial batch is included.

    ``seed`` feeds numpy's generator (an int or a sequence of ints), so a
    fixed (dataset, batch_size, seed) triple always yields the same
    batches in the same order.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot iterate an empty dataset")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield [dataset[int(i)] for i in order[start : start + batch_size]]
