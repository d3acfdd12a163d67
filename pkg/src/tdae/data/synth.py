"""Synthetic segmentation data: disks, rectangles, and rings on noise.

Every draw comes from one generator seeded by the SynthSpec, so a given
(spec, count) pair reproduces bitwise. Shape class is drawn uniformly,
shape kind is a fixed function of class, and each shape is placed fully
inside the image so rasterized geometry is exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ContractError
from .tensorfile import read_tensor, write_tensor

SHAPE_KINDS = ("disk", "rect", "ring")


@dataclass(frozen=True)
class SynthSpec:
    size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (3, 6)
    scale_range: tuple[float, float] = (0.04, 0.5)
    noise_std: float = 0.05
    background: float = 0.08
    intensity_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.size
        if h < 8 or w < 8:
            raise ConfigurationError(f"image size {self.size} too small")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"bad shapes_per_image range {self.shapes_per_image}")
        slo, shi = self.scale_range
        if not 0 < slo <= shi <= 0.5:
            raise ConfigurationError(f"scale_range {self.scale_range} outside (0, 0.5]")
        if self.noise_std < 0 or self.intensity_jitter < 0:
            raise ConfigurationError("noise_std and intensity_jitter must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["shapes_per_image"] = list(self.shapes_per_image)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kw = dict(d)
        for key in ("size", "shapes_per_image", "scale_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def kind_for_class(cls: int) -> str:
    return SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]


def _class_intensities(num_classes: int) -> np.ndarray:
    return np.linspace(0.35, 0.9, num_classes - 1)


def _paint(img, mask, sel, value, cls):
    img[sel] = value
    mask[sel] = cls


def _draw_shape(img, mask, rng, spec: SynthSpec) -> dict:
    h, w = spec.size
    side = min(h, w)
    cls = int(rng.integers(1, spec.num_classes))
    kind = kind_for_class(cls)
    extent = rng.uniform(*spec.scale_range) * side  # shape diameter in pixels
    r = max(1.5, extent / 2.0)
    margin = int(np.ceil(r)) + 1
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    value = _class_intensities(spec.num_classes)[cls - 1] + rng.uniform(
        -spec.intensity_jitter, spec.intensity_jitter
    )
    yy, xx = np.mgrid[0:h, 0:w]
    meta = {"kind": kind, "cls": cls, "center": (cy, cx), "radius": r}
    if kind == "disk":
        sel = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "rect":
        ry = r
        rx = r * rng.uniform(0.6, 1.4)
        sel = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= min(rx, margin - 1))
        meta["half_sides"] = (ry, rx)
    else:  # ring
        inner = 0.55 * r
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        sel = (d2 <= r * r) & (d2 >= inner * inner)
        meta["inner_radius"] = inner
    _paint(img, mask, sel, value, cls)
    meta["area"] = int(sel.sum())
    return meta


def synth_generate_detailed(spec: SynthSpec, count: int) -> list[tuple[np.ndarray, np.ndarray, list[dict]]]:
    """(image, mask, shape metadata) triples; metadata records draw order."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    out = []
    for _ in range(count):
        img = np.full((h, w), spec.background, dtype=np.float64)
        mask = np.zeros((h, w), dtype=np.uint8)
        n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        metas = [_draw_shape(img, mask, rng, spec) for _ in range(n_shapes)]
        img += rng.normal(0.0, spec.noise_std, size=(h, w))
        out.append((img.astype(np.float32), mask, metas))
    return out


def synth_generate(spec: SynthSpec, count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """List of (float32 image, uint8 label mask) pairs, (H, W) each."""
    return [(img, mask) for img, mask, _ in synth_generate_detailed(spec, count)]


# --------------------------------------------------------------------------
# on-disk dataset layout: images/NNNN.tdae, masks/NNNN.tdae, manifest.json

def save_dataset(root, samples, spec: SynthSpec | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(samples):
        write_tensor(root / "images" / f"{i:04d}.tdae", np.asarray(img, dtype=np.float32))
        write_tensor(root / "masks" / f"{i:04d}.tdae", np.asarray(mask, dtype=np.uint8))
    manifest = {
        "count": len(samples),
        "height": int(samples[0][0].shape[0]),
        "width": int(samples[0][0].shape[1]),
    }
    if spec is not None:
        manifest["num_classes"] = spec.num_classes
        manifest["spec"] = spec.to_dict()
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root) -> tuple[list[tuple[np.ndarray, np.ndarray]], dict]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for i in range(manifest["count"]):
        img = read_tensor(root / "images" / f"{i:04d}.tdae")
        mask = read_tensor(root / "masks" / f"{i:04d}.tdae")
        if img.shape != mask.shape:
            raise ContractError(f"sample {i}: image {img.shape} vs mask {mask.shape}")
        samples.append((img, mask))
    return samples, manifest
