"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError, ParameterError
from .tensor import Tape, Tensor, backward


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-4,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative deviation between tape gradients and central differences.

    ``f`` must be a deterministic scalar-valued function of the given
    tensors, all float64. Each checked coordinate costs two extra forward
    evaluations; ``sample`` limits the check to that many coordinates
    drawn without replacement across all inputs. The deviation per
    coordinate is |ad - fd| / max(|ad|, |fd|, 1).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    if not inputs:
        raise ParameterError("finite_diff_check needs at least one input tensor")
    if not 1e-6 <= eps <= 1e-3:
        raise ParameterError(f"eps {eps} outside supported range [1e-6, 1e-3]")
    for t in inputs:
        if t.dtype != np.float64:
            raise ParameterError("finite differences require float64 inputs")
        if not t.requires_grad:
            raise ContractError("all checked inputs must have requires_grad set")

    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ContractError(f"f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("f produced a non-finite value at the base point")
    grads = backward(tape, out, params=inputs)

    coords = [(ti, j) for ti, t in enumerate(inputs) for j in range(t.size)]
    if sample is not None and sample < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[int(i)] for i in picks]

    def _eval_at(ti: int, j: int, delta: float) -> float:
        moved = inputs[ti].data.copy()
        moved.reshape(-1)[j] += delta
        args = list(inputs)
        shifted = Tensor._wrap(moved)
        shifted.requires_grad = True
        args[ti] = shifted
        val = f(*args)
        if val.size != 1 or not np.isfinite(val.data).all():
            raise NumericError(f"f non-finite or non-scalar at perturbed coordinate {(ti, j)}")
        return float(val.data.reshape(()))

    worst = 0.0
    for ti, j in coords:
        fp = _eval_at(ti, j, eps)
        fm = _eval_at(ti, j, -eps)
        fd = (fp - fm) / (2.0 * eps)
        ad = float(grads[inputs[ti]].reshape(-1)[j])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
        worst = max(worst, rel)
    return worst
