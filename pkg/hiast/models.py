"""In-memory domain types.

Every type here is an immutable value once constructed: arrays are marked
read-only, so instances can be shared across threads without copying.
"""

from dataclasses import InitVar, dataclass
from typing import Iterator

import numpy as np

from hiast.exceptions import ClassCountMismatchError, ShapeMismatchError

IGNORE = 255  # max of uint8 label storage; also the PGM encoding


def _frozen(arr: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ── Pixel fields ──────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-pixel feature vectors, shape (H, W, F)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) <= 0:
            raise ShapeMismatchError(f"FeatureMap needs shape (H, W, F) with H, W, F > 0, got {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("FeatureMap values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Hard class labels per pixel, shape (H, W), IGNORE where unlabeled.

    Also used for pseudo-labels: a pixel is either one class or IGNORE.
    """

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or min(lab.shape) <= 0:
            raise ShapeMismatchError(f"LabelMap needs shape (H, W), got {lab.shape}")
        if lab.dtype != np.uint8:
            if np.any((lab < 0) | (lab > IGNORE)):
                raise ValueError("label values must fit in uint8")
            lab = lab.astype(np.uint8)
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def check_classes(self, num_classes: int) -> None:
        valid = self.labels[self.labels != IGNORE]
        if valid.size and int(valid.max()) >= num_classes:
            raise ClassCountMismatchError(
                f"label {int(valid.max())} out of range for {num_classes} classes"
            )


PseudoLabelMap = LabelMap


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel class probabilities p(c|x, w), shape (H, W, C)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ShapeMismatchError(f"ProbMap needs shape (H, W, C), got {p.shape}")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=1e-6):
            raise ValueError("per-pixel probabilities must sum to 1")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[:2]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted log-softmax over the last axis, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_probmap(logits: FeatureMap, num_classes: int | None = None) -> ProbMap:
    """Turn a logit field into a ProbMap."""
    if num_classes is not None and logits.channels != num_classes:
        raise ClassCountMismatchError(
            f"logits have {logits.channels} channels, expected {num_classes}"
        )
    return ProbMap(softmax(logits.values))


# ── Datasets ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DatasetMeta:
    num_classes: int
    channels: int
    height: int
    width: int
    domain: str  # "source" or "target"


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    features: FeatureMap
    labels: LabelMap | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, id-unique collection of equally sized samples."""

    meta: DatasetMeta
    samples: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        m = self.meta
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.features.values.shape != (m.height, m.width, m.channels):
                raise ShapeMismatchError(
                    f"sample {s.id!r} has features {s.features.values.shape}, "
                    f"expected {(m.height, m.width, m.channels)}"
                )
            if s.labels is not None:
                if s.labels.shape != (m.height, m.width):
                    raise ShapeMismatchError(f"sample {s.id!r} labels have shape {s.labels.shape}")
                s.labels.check_classes(m.num_classes)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, pos: int) -> Sample:
        return self.samples[pos]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def is_labeled(self) -> bool:
        return all(s.labels is not None for s in self.samples)

    def equals(self, other: "Dataset") -> bool:
        """Field-by-field, bit-exact comparison."""
        if self.meta != other.meta or self.ids != other.ids:
            return False
        for a, b in zip(self.samples, other.samples):
            fa, fb = a.features.values, b.features.values
            if fa.dtype != fb.dtype or fa.tobytes() != fb.tobytes():
                return False
            if (a.labels is None) != (b.labels is None):
                return False
            if a.labels is not None and a.labels.labels.tobytes() != b.labels.labels.tobytes():
                return False
        return True


# ── Model state ───────────────────────────────────────────────────────

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights of the per-pixel MLP F -> H -> C (H = 0: linear softmax).

    With H = 0, w1 and b1 are empty and w2 maps F -> C directly.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"
    require_finite: InitVar[bool] = True

    def __post_init__(self, require_finite: bool):
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if require_finite and not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite values")
            object.__setattr__(self, name, _frozen(arr))
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        f, h = self.w1.shape
        if self.b1.shape != (h,):
            raise ShapeMismatchError(f"b1 shape {self.b1.shape} does not match hidden width {h}")
        expect_in = h if h > 0 else f
        if self.w2.shape[0] != expect_in or self.b2.shape != (self.w2.shape[1],):
            raise ShapeMismatchError("output layer shapes are inconsistent")

    @property
    def in_features(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **arrays: np.ndarray) -> "ModelParams":
        merged = {**self.arrays(), **arrays}
        return ModelParams(activation=self.activation, **merged)

    def gradient(self, **arrays: np.ndarray) -> "ModelParams":
        """A same-layout container whose values are not checked for finiteness.

        Gradients may diverge; the optimizer step decides what to do about it.
        """
        merged = {**self.arrays(), **arrays}
        return ModelParams(activation=self.activation, require_finite=False, **merged)

    def map(self, fn) -> "ModelParams":
        """Apply ``fn`` to every tensor, keeping shapes and activation."""
        return self.replace(**{name: fn(arr) for name, arr in self.arrays().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def from_flat(self, vec: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for name, arr in self.arrays().items():
            out[name] = np.asarray(vec[pos:pos + arr.size]).reshape(arr.shape)
            pos += arr.size
        return self.replace(**out)

    def equals(self, other: "ModelParams") -> bool:
        return self.activation == other.activation and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


@dataclass(frozen=True, eq=False)
class RegionMasks:
    """Confident (labeled) and ignored pixels; they partition the grid."""

    confident: np.ndarray
    ignored: np.ndarray

    def __post_init__(self):
        conf = _frozen(self.confident, dtype=bool)
        ign = _frozen(self.ignored, dtype=bool)
        if conf.shape != ign.shape or not np.all(conf ^ ign):
            raise ValueError("confident and ignored masks must partition the grid")
        object.__setattr__(self, "confident", conf)
        object.__setattr__(self, "ignored", ign)
