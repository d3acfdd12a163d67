"""Analytic FLOP models for the three attention kernels.

Counts follow the operation signatures: standard_attention receives
ready-made q/k/v so its cost is purely the quadratic score/value math;
efficient_attention owns its projections and every term is linear in the
token count; reduced attention exposes a term breakdown so callers can
reason about the dominant quadratic part separately from projections.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def softmax_flops(elements: int) -> int:
    # max subtraction, exp, sum, divide: ~5 scalar ops per element
    return 5 * elements


def standard_attention_flops(n: int, d_k: int, d_v: int) -> dict:
    terms = {
        "scores": matmul_flops(n, d_k, n),
        "scale": n * n,
        "softmax": softmax_flops(n * n),
        "weighted_values": matmul_flops(n, n, d_v),
    }
    total = sum(terms.values())
    return {"terms": terms, "total": total, "quadratic": total}


def efficient_attention_flops(n: int, d: int, d_k: int | None = None, d_v: int | None = None) -> dict:
    d_k = d // 2 if d_k is None else d_k
    d_v = d if d_v is None else d_v
    terms = {
        "proj_q": matmul_flops(n, d, d_k),
        "proj_k": matmul_flops(n, d, d_k),
        "proj_v": matmul_flops(n, d, d_v),
        "norm_q": softmax_flops(n * d_k),
        "norm_k": softmax_flops(n * d_k),
        "context": matmul_flops(d_k, n, d_v),
        "aggregate": matmul_flops(n, d_k, d_v),
        "proj_out": matmul_flops(n, d_v, d),
    }
    return {"terms": terms, "total": sum(terms.values()), "quadratic": 0}


def reduced_attention_flops(n: int, c: int, ratio: int, heads: int) -> dict:
    if n % ratio:
        raise ParameterError(f"ratio {ratio} must divide token count {n}")
    m = n // ratio
    terms = {
        "proj_q": matmul_flops(n, c, c),
        "proj_k": matmul_flops(n, c, c),
        "proj_v": matmul_flops(n, c, c),
        "reduce_k": matmul_flops(m, c * ratio, c),
        "reduce_v": matmul_flops(m, c * ratio, c),
        "scores": 2 * n * m * c,
        "softmax": softmax_flops(heads * n * m),
        "weighted_values": 2 * n * m * c,
        "proj_out": matmul_flops(n, c, c),
    }
    quadratic = terms["scores"] + terms["softmax"] + terms["weighted_values"]
    return {"terms": terms, "total": sum(terms.values()), "quadratic": quadratic}


def fit_exponent(ns, values) -> float:
    """Least-squares slope of log(value) against log(n)."""
    ns = np.asarray(ns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if ns.size < 2 or np.any(ns <= 0) or np.any(values <= 0):
        raise ParameterError("exponent fit needs >= 2 positive samples")
    slope, _ = np.polyfit(np.log(ns), np.log(values), 1)
    return float(slope)
