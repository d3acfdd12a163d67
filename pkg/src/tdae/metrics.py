"""Overlap and boundary-distance metrics for labeled segmentation masks.

Everything here is brute force on purpose: boundary extraction is a
full-neighborhood complement test and Hausdorff distances come from
all-pairs Euclidean distances between boundary points. Correctness over
speed; masks at evaluation scale are small.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Dice overlap 2|A n B| / (|A| + |B|) for one label; 1.0 when both empty."""
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = pred == cls
    b = gt == cls
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _shifted(mask: np.ndarray, offset: tuple[int, ...]) -> np.ndarray:
    """Mask translated by offset with False filled in; no wraparound."""
    out = np.zeros_like(mask)
    src = []
    dst = []
    for size, off in zip(mask.shape, offset):
        src.append(slice(max(0, -off), size - max(0, off)))
        dst.append(slice(max(0, off), size - max(0, -off)))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with any full-neighborhood background
    neighbor (8-connectivity in 2D); image border counts as background."""
    mask = mask.astype(bool)
    interior = mask.copy()
    for offset in itertools.product((-1, 0, 1), repeat=mask.ndim):
        if all(o == 0 for o in offset):
            continue
        interior &= _shifted(mask, offset)
    return np.argwhere(mask & ~interior)


def _directed_min_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of a, the distance to the nearest point of b."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    out = np.empty(len(a))
    chunk = max(1, 2_000_000 // max(1, len(b)))
    for start in range(0, len(a), chunk):
        block = a[start : start + chunk]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        out[start : start + len(block)] = np.sqrt(d2.min(axis=1))
    return out


def hausdorff(pred: np.ndarray, gt: np.ndarray, cls: int, percentile: float = 100.0) -> float | None:
    """Symmetric boundary Hausdorff distance for one label.

    ``percentile=100`` gives the classic max-min distance; 95 gives the
    robust variant. Returns None when either boundary set is empty.
    """
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not 0 < percentile <= 100:
        raise DimensionError(f"percentile {percentile} outside (0, 100]")
    a = boundary_points(pred == cls)
    b = boundary_points(gt == cls)
    if len(a) == 0 or len(b) == 0:
        return None
    d_ab = _directed_min_distances(a, b)
    d_ba = _directed_min_distances(b, a)
    if percentile == 100.0:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


@dataclass
class EvalReport:
    """Per-class metric averages plus foreground means.

    ``per_class_hd``/``per_class_hd95`` hold None for classes whose
    boundary sets were empty in every volume; such classes are excluded
    from ``mean_hd``.
    """

    per_class_dice: dict[int, float]
    per_class_hd: dict[int, float | None]
    per_class_hd95: dict[int, float | None]
    mean_dice: float
    mean_hd: float | None

    def to_json(self) -> str:
        per_class = {
            f"class_{c}": {
                "dice": self.per_class_dice[c],
                "hd": self.per_class_hd[c],
                "hd95": self.per_class_hd95[c],
            }
            for c in sorted(self.per_class_dice)
        }
        return json.dumps(
            {"per_class": per_class, "mean_dice": self.mean_dice, "mean_hd": self.mean_hd},
            indent=2,
            sort_keys=True,
        )


def evaluate(preds, gts, num_classes: int) -> EvalReport:
    """Average per-class metrics over volumes; means cover foreground only."""
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts) or not preds:
        raise ContractError(
            f"prediction/ground-truth counts differ or empty: {len(preds)} vs {len(gts)}"
        )
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ContractError(f"mask shapes differ: {p.shape} vs {g.shape}")
    per_dice: dict[int, float] = {}
    per_hd: dict[int, float | None] = {}
    per_hd95: dict[int, float | None] = {}
    for c in range(num_classes):
        dices = [dice(p, g, c) for p, g in zip(preds, gts)]
        hds = [hausdorff(p, g, c) for p, g in zip(preds, gts)]
        hd95s = [hausdorff(p, g, c, percentile=95.0) for p, g in zip(preds, gts)]
        hds = [v for v in hds if v is not None]
        hd95s = [v for v in hd95s if v is not None]
        per_dice[c] = float(np.mean(dices))
        per_hd[c] = float(np.mean(hds)) if hds else None
        per_hd95[c] = float(np.mean(hd95s)) if hd95s else None
    fg = range(1, num_classes)
    defined_hd = [per_hd[c] for c in fg if per_hd[c] is not None]
    return EvalReport(
        per_class_dice=per_dice,
        per_class_hd=per_hd,
        per_class_hd95=per_hd95,
        mean_dice=float(np.mean([per_dice[c] for c in fg])),
        mean_hd=float(np.mean(defined_hd)) if defined_hd else None,
    )
