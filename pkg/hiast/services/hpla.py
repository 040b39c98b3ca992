"""Hard-aware pseudo-label augmentation.

Classes with the lowest thresholds are treated as hard. For each target
image a class is drawn with probability growing as its threshold shrinks,
a donor target image containing that class is picked, and every donor
pixel pseudo-labeled with a hard class is pasted onto the image and its
pseudo-label.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from hiast.exceptions import DegenerateThresholdError, ShapeMismatchError
from hiast.models import IGNORE, FeatureMap, LabelMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardClassSet:
    """Hard class ids in ascending-threshold order."""

    classes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, c: int) -> bool:
        return c in self.classes


@dataclass(frozen=True, eq=False)
class SamplingDistribution:
    probs: np.ndarray

    @classmethod
    def uniform(cls, num_classes: int) -> "SamplingDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes))


@dataclass(frozen=True)
class ClassIndex:
    """class id -> ids of samples whose pseudo-label contains that class."""

    index: Mapping[int, tuple[str, ...]]

    def __getitem__(self, c: int) -> tuple[str, ...]:
        return self.index.get(c, ())


def detect_hard_classes(theta: np.ndarray, k: int) -> HardClassSet:
    """The k classes with the smallest thresholds; ties go to the smaller id."""
    theta = np.asarray(theta, dtype=np.float64)
    if not 1 <= k <= len(theta):
        raise ValueError(f"k must be in [1, {len(theta)}], got {k}")
    order = np.argsort(theta, kind="stable")
    return HardClassSet(tuple(int(c) for c in order[:k]))


def sampling_probabilities(theta: np.ndarray) -> SamplingDistribution:
    """r(c) = (1 - theta_c) / sum_i (1 - theta_i)."""
    slack = 1.0 - np.asarray(theta, dtype=np.float64)
    denom = slack.sum()
    if denom <= 0.0:
        raise DegenerateThresholdError("all thresholds equal 1; sampling distribution is undefined")
    return SamplingDistribution(slack / denom)


def sampling_probabilities_or_uniform(theta: np.ndarray) -> SamplingDistribution:
    try:
        return sampling_probabilities(theta)
    except DegenerateThresholdError:
        logger.warning("All class thresholds are 1; falling back to uniform class sampling")
        return SamplingDistribution.uniform(len(theta))


def build_class_index(labels: Sequence[LabelMap], ids: Sequence[str], num_classes: int) -> ClassIndex:
    """Index which samples contain each pseudo-labeled class.

    Args:
        labels: Pseudo-label maps, one per sample.
        ids: Sample ids aligned with ``labels``.
        num_classes: C; every class in [0, C) gets an entry, possibly empty.

    Returns:
        ClassIndex mapping class id to the ids of samples with at least one
        pixel of that class, in dataset order. IGNORE pixels are not indexed.
    """
    index: dict[int, list[str]] = {c: [] for c in range(num_classes)}
    for sid, lm in zip(ids, labels):
        present = np.unique(lm.labels)
        for c in present[present != IGNORE]:
            index.setdefault(int(c), []).append(sid)
    return ClassIndex({c: tuple(v) for c, v in index.items()})


def hard_class_share(labels: Sequence[LabelMap], hard: HardClassSet) -> float:
    """Fraction of all pixels pseudo-labeled with a hard class."""
    if not labels:
        return 0.0
    stack = np.stack([lm.labels for lm in labels])
    return float(np.isin(stack, list(hard.classes)).mean())


def sample_stream(seed: int, round_idx: int, iteration: int, sample_pos: int) -> np.random.Generator:
    """Independent RNG stream for one (round, iteration, sample)."""
    return np.random.default_rng(np.random.SeedSequence([seed, round_idx, iteration, sample_pos]))


def draw_class(r: SamplingDistribution, rng: np.random.Generator) -> int:
    return int(rng.choice(len(r.probs), p=r.probs))


def _pick_donor(idx: ClassIndex, r: SamplingDistribution, rng: np.random.Generator,
                target_id: str | None) -> str | None:
    for _ in range(len(r.probs)):
        c = draw_class(r, rng)
        candidates = list(idx[c])
        if target_id is not None and len(candidates) > 1 and target_id in candidates:
            candidates.remove(target_id)
        if candidates:
            return candidates[int(rng.integers(len(candidates)))]
    return None


def hpla_augment(
    x_t: FeatureMap,
    y_t: LabelMap,
    donors: Mapping[str, tuple[FeatureMap, LabelMap]],
    idx: ClassIndex,
    hard: HardClassSet,
    r: SamplingDistribution,
    rng: np.random.Generator,
    *,
    target_id: str | None = None,
    draws: int = 1,
) -> tuple[FeatureMap, LabelMap]:
    """Paste the hard-class pixels of sampled donors onto one target image.

    Args:
        x_t: Features of the image being augmented.
        y_t: Its pseudo-labels.
        donors: Sample id -> (features, pseudo-labels) of every candidate donor.
        idx: Class index over ``donors``.
        hard: Classes whose pixels are pasted.
        r: Class sampling distribution used to pick a donor.
        rng: Stream for this (round, iteration, batch position).
        target_id: Id of the image itself; it is only its own donor when no
            other candidate holds the drawn class.
        draws: Number of donors pasted in sequence.

    Returns:
        (features, labels) where pixels come from the donor where the donor
        label is hard and from the target everywhere else. If no donor can
        be found within C redraws the inputs are returned unchanged.
    """
    feats = x_t.values
    labels = y_t.labels
    hard_ids = list(hard.classes)
    for _ in range(draws):
        donor_id = _pick_donor(idx, r, rng, target_id)
        if donor_id is None:
            logger.warning(f"HPLA: no donor found for {target_id}; leaving it unchanged")
            break
        d_feats, d_labels = donors[donor_id]
        if d_feats.values.shape != feats.shape or d_labels.shape != labels.shape:
            raise ShapeMismatchError(
                f"donor {donor_id!r} shape {d_feats.values.shape} != target shape {feats.shape}"
            )
        mask = np.isin(d_labels.labels, hard_ids)
        feats = np.where(mask[..., None], d_feats.values, feats)
        labels = np.where(mask, d_labels.labels, labels)

    if feats is x_t.values:
        return x_t, y_t
    return FeatureMap(feats.astype(x_t.values.dtype, copy=False)), LabelMap(labels.astype(np.uint8))


@dataclass(frozen=True, eq=False)
class HplaContext:
    """Everything a round needs to paste hard-class pixels into its batches."""

    donors: Mapping[str, tuple[FeatureMap, LabelMap]]
    index: ClassIndex
    hard: HardClassSet
    r: SamplingDistribution
    draws: int = 1


def augment_batch(
    ids: Sequence[str],
    features: Sequence[FeatureMap],
    labels: Sequence[LabelMap],
    positions: Sequence[int],
    ctx: HplaContext | None,
    *,
    seed: int,
    round_idx: int,
    iteration: int,
) -> tuple[list[FeatureMap], list[LabelMap]]:
    """Apply HPLA to each batch member with its own (round, iteration, position) stream.

    With ``ctx=None`` the batch is returned as given.
    """
    if ctx is None:
        return list(features), list(labels)
    xs, ys = [], []
    for sid, x, y, pos in zip(ids, features, labels, positions):
        rng = sample_stream(seed, round_idx, iteration, int(pos))
        x_new, y_new = hpla_augment(x, y, ctx.donors, ctx.index, ctx.hard, ctx.r, rng,
                                    target_id=sid, draws=ctx.draws)
        xs.append(x_new)
        ys.append(y_new)
    return xs, ys
