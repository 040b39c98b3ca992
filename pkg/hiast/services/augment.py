"""Weak (geometric) and strong (photometric) views of a feature map.

The weak view only flips horizontally and records the decision, so the
same geometry can be applied to labels and to the other branch. Strong
perturbations never move pixels.

The classifier sees one pixel at a time, so a photometric change large
enough to carry a pixel across a class boundary would turn the strong view
into label noise. Magnitudes are kept well inside the intra-class spread of
the synthetic features, and erased pixels are reported so the losses can
skip them.
"""

from dataclasses import dataclass

import numpy as np

from hiast.models import FeatureMap

STRONG_OPS = ("gain", "noise", "contrast", "erase")
STRONG_OPS_PER_VIEW = 3


@dataclass(frozen=True)
class GeometryRecord:
    flip: bool = False


@dataclass(frozen=True, eq=False)
class StrongView:
    features: FeatureMap
    erased: np.ndarray  # (H, W) bool


def apply_geometry(arr: np.ndarray, geom: GeometryRecord) -> np.ndarray:
    """Apply a recorded geometry to any (H, W, ...) array."""
    arr = np.asarray(arr)
    return np.ascontiguousarray(arr[:, ::-1]) if geom.flip else arr


def augment_weak(x: FeatureMap, rng: np.random.Generator) -> tuple[FeatureMap, GeometryRecord]:
    geom = GeometryRecord(flip=bool(rng.random() < 0.5))
    return FeatureMap(apply_geometry(x.values, geom)), geom


def _gain(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return v * rng.uniform(0.95, 1.05, size=v.shape[-1])


def _noise(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return v + rng.normal(0.0, 0.05, size=v.shape)


def _contrast(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mean = v.mean(axis=(0, 1), keepdims=True)
    return (v - mean) * rng.uniform(0.9, 1.1) + mean


def _erase(v: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w, _ = v.shape
    eh = int(rng.integers(1, max(1, h // 4) + 1))
    ew = int(rng.integers(1, max(1, w // 4) + 1))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out = v.copy()
    out[top:top + eh, left:left + ew] = v.mean(axis=(0, 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + eh, left:left + ew] = True
    return out, mask


_OPS = {"gain": _gain, "noise": _noise, "contrast": _contrast}


def strong_view(x: FeatureMap, rng: np.random.Generator) -> StrongView:
    """Three distinct photometric ops from the pool, in random order.

    Returns the perturbed map and the mask of erased pixels (all False when
    ``erase`` was not drawn).
    """
    v = x.values.astype(np.float64)
    erased = np.zeros(v.shape[:2], dtype=bool)
    for i in rng.choice(len(STRONG_OPS), size=STRONG_OPS_PER_VIEW, replace=False):
        op = STRONG_OPS[int(i)]
        if op == "erase":
            v, erased = _erase(v, rng)
        else:
            v = _OPS[op](v, rng)
    return StrongView(FeatureMap(v.astype(x.values.dtype)), erased)


def augment_strong(x: FeatureMap, rng: np.random.Generator) -> FeatureMap:
    return strong_view(x, rng).features
