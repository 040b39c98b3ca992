"""Pseudo-label generation from probability maps.

Three selectors share one output format (uint8 label maps, IGNORE where a
pixel is not selected):

* ``ias``: instance-adaptive selector. Per image and class, a local
  threshold is read off the sorted confidences at a proportion that decays
  with the class's running threshold; an EMA over images smooths it.
* ``constant``: one global threshold for every pixel.
* ``classbalanced``: one percentile threshold per class, pooled over the
  whole target set.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hiast.exceptions import ClassCountMismatchError, ShapeMismatchError
from hiast.models import IGNORE, LabelMap, ProbMap
from hiast.schemas import IasParams, SelectionStats
from hiast.services.metrics import confusion_matrix, miou
from hiast.storage import emit_csv, export_label_pgm, write_array, write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SortedClassConfidences:
    """Max-probabilities of the pixels predicted as ``class_id``, descending."""

    class_id: int
    confidences: np.ndarray

    @classmethod
    def from_maps(cls, class_id: int, argmax: np.ndarray, maxprob: np.ndarray) -> "SortedClassConfidences":
        values = maxprob[argmax == class_id]
        return cls(class_id, -np.sort(-values, kind="stable"))

    def __len__(self) -> int:
        return len(self.confidences)


@dataclass
class ThresholdState:
    """Per-class thresholds plus their update history."""

    thresholds: np.ndarray
    update_count: int = 0
    trace: list[tuple[str, np.ndarray]] | None = None

    @classmethod
    def initial(cls, num_classes: int, theta_init: float, tracing: bool = False) -> "ThresholdState":
        return cls(np.full(num_classes, float(theta_init)), 0, [] if tracing else None)

    @property
    def num_classes(self) -> int:
        return len(self.thresholds)

    def record(self, instance_id: str, thresholds: np.ndarray) -> None:
        self.thresholds = np.array(thresholds, dtype=np.float64)
        self.update_count += 1
        if self.trace is not None:
            self.trace.append((instance_id, self.thresholds.copy()))

    def trace_rows(self) -> list[dict]:
        rows = []
        for instance_id, theta in self.trace or []:
            row = {"instance_id": instance_id}
            row.update({f"class_{c}": float(v) for c, v in enumerate(theta)})
            rows.append(row)
        return rows


# ── Instance-adaptive selector ────────────────────────────────────────

def local_threshold(confs: SortedClassConfidences, theta_prev: float, alpha: float, gamma: float) -> float:
    """Confidence at the decayed proportion alpha * theta_prev**gamma of a class.

    Empty lists keep the previous threshold.
    """
    n = len(confs)
    if n == 0:
        return float(theta_prev)
    idx = math.floor(alpha * (theta_prev ** gamma) * n)
    idx = min(max(idx, 0), n - 1)
    return float(confs.confidences[idx])


def class_confidences(argmax: np.ndarray, maxprob: np.ndarray, num_classes: int) -> list[SortedClassConfidences]:
    """Descending confidence lists for every class from one sort of the image."""
    flat_c, flat_p = argmax.ravel(), maxprob.ravel()
    order = np.lexsort((-flat_p, flat_c))
    ordered = flat_p[order]
    counts = np.bincount(flat_c, minlength=num_classes)
    ends = np.cumsum(counts)
    starts = ends - counts
    return [SortedClassConfidences(k, ordered[starts[k]:ends[k]]) for k in range(num_classes)]


def ema_update_thresholds(theta_prev: np.ndarray, theta_local: np.ndarray, beta: float) -> np.ndarray:
    """Blend the running class thresholds toward this instance's local ones.

    Args:
        theta_prev: Thresholds before the instance, shape (C,).
        theta_local: Local thresholds of the instance, shape (C,).
        beta: Weight kept on ``theta_prev``; 1 freezes the thresholds.

    Returns:
        beta * theta_prev + (1 - beta) * theta_local.
    """
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    theta_local = np.asarray(theta_local, dtype=np.float64)
    if theta_prev.shape != theta_local.shape:
        raise ShapeMismatchError(f"threshold vectors differ in length: {theta_prev.shape} vs {theta_local.shape}")
    return beta * theta_prev + (1.0 - beta) * theta_local


def _check_classes(probmaps: Sequence[ProbMap]) -> int:
    if not probmaps:
        return 0
    c = probmaps[0].num_classes
    for pm in probmaps:
        if pm.num_classes != c:
            raise ClassCountMismatchError(f"probability maps mix {c} and {pm.num_classes} classes")
    return c


def _argmax_max(pm: ProbMap) -> tuple[np.ndarray, np.ndarray]:
    return pm.probs.argmax(axis=-1), pm.probs.max(axis=-1)


def _select(argmax: np.ndarray, maxprob: np.ndarray, thresholds: np.ndarray) -> LabelMap:
    keep = maxprob > thresholds[argmax]
    return LabelMap(np.where(keep, argmax, IGNORE).astype(np.uint8))


def generate_pseudo_labels_ias(
    probmaps: Sequence[ProbMap],
    params: IasParams,
    trace: bool = False,
    *,
    num_classes: int | None = None,
    instance_ids: Sequence[str] | None = None,
    shuffle_seed: int | None = None,
) -> tuple[list[LabelMap], ThresholdState]:
    """Label each instance in order, updating the class thresholds as it goes.

    Labels use the post-update thresholds of their own instance. With
    ``shuffle_seed`` the instances are visited in a seeded permutation;
    labels come back in the caller's order either way.

    Args:
        probmaps: Teacher predictions, one per instance, all with C channels.
        params: alpha, beta, gamma and the initial threshold.
        trace: Keep every instance's thresholds for ``thresholds.csv``.
        num_classes: Expected C; checked against the maps.
        instance_ids: Names used in the trace (default: positions).
        shuffle_seed: Visit order seed; None keeps the given order.

    Returns:
        (labels, final threshold state).
    """
    c = _check_classes(probmaps) or num_classes or 0
    if num_classes is not None and probmaps and c != num_classes:
        raise ClassCountMismatchError(f"expected {num_classes} classes, maps have {c}")
    ids = list(instance_ids) if instance_ids is not None else [str(i) for i in range(len(probmaps))]
    state = ThresholdState.initial(c, params.theta_init, tracing=trace)

    order = np.arange(len(probmaps))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(probmaps))

    labels: list[LabelMap | None] = [None] * len(probmaps)
    for pos in order:
        argmax, maxprob = _argmax_max(probmaps[pos])
        theta_prev = state.thresholds
        local = np.array([
            local_threshold(confs, theta_prev[confs.class_id], params.alpha, params.gamma)
            for confs in class_confidences(argmax, maxprob, c)
        ])
        state.record(ids[pos], ema_update_thresholds(theta_prev, local, params.beta))
        labels[pos] = _select(argmax, maxprob, state.thresholds)
        logger.debug(f"IAS {ids[pos]}: theta={np.round(state.thresholds, 4).tolist()}")

    return labels, state


# ── Baselines ─────────────────────────────────────────────────────────

def generate_pseudo_labels_constant(probmaps: Sequence[ProbMap], theta_const: float) -> list[LabelMap]:
    _check_classes(probmaps)
    out = []
    for pm in probmaps:
        argmax, maxprob = _argmax_max(pm)
        out.append(LabelMap(np.where(maxprob > theta_const, argmax, IGNORE).astype(np.uint8)))
    return out


def classbalanced_thresholds(probmaps: Sequence[ProbMap], alpha: float, num_classes: int | None = None) -> np.ndarray:
    """Per-class alpha-percentile of the pooled descending confidences.

    Classes never predicted get threshold 1.0.
    """
    c = _check_classes(probmaps) or num_classes or 0
    pools: list[list[np.ndarray]] = [[] for _ in range(c)]
    for pm in probmaps:
        argmax, maxprob = _argmax_max(pm)
        for k in range(c):
            pools[k].append(maxprob[argmax == k])
    thresholds = np.ones(c)
    for k in range(c):
        pooled = np.concatenate(pools[k]) if pools[k] else np.empty(0)
        if pooled.size:
            confs = SortedClassConfidences(k, -np.sort(-pooled, kind="stable"))
            thresholds[k] = local_threshold(confs, 1.0, alpha, 0.0)
    return thresholds


def apply_thresholds(probmaps: Sequence[ProbMap], thresholds: np.ndarray) -> list[LabelMap]:
    """Keep pixels whose max-probability is strictly above their class threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    return [_select(*_argmax_max(pm), thresholds) for pm in probmaps]


def generate_pseudo_labels_classbalanced(probmaps: Sequence[ProbMap], alpha: float) -> list[LabelMap]:
    return apply_thresholds(probmaps, classbalanced_thresholds(probmaps, alpha))


# ── Statistics ────────────────────────────────────────────────────────

def selection_stats(
    labels: Sequence[LabelMap],
    reference: Sequence[LabelMap] | None = None,
    num_classes: int | None = None,
) -> SelectionStats:
    """Selected-pixel proportions, class diversity and (optionally) P-mIoU."""
    if reference is not None and len(reference) != len(labels):
        raise ShapeMismatchError(f"{len(labels)} label maps but {len(reference)} references")
    stack = np.stack([lm.labels for lm in labels]) if labels else np.empty((0, 1, 1), np.uint8)
    total = int(stack.size)
    selected = stack[stack != IGNORE]
    if num_classes is None:
        num_classes = int(selected.max()) + 1 if selected.size else 0
    counts = np.bincount(selected, minlength=num_classes)[:num_classes] if num_classes else np.zeros(0, int)

    p_miou = None
    if reference is not None:
        for lm, ref in zip(labels, reference):
            if lm.shape != ref.shape:
                raise ShapeMismatchError(f"pseudo-label shape {lm.shape} != reference shape {ref.shape}")
        cm = confusion_matrix(labels, reference, num_classes, restrict=True)
        p_miou = miou(cm)[0]

    return SelectionStats(
        num_pixels=total,
        proportion=float(selected.size / total) if total else 0.0,
        per_class_proportions=[float(n / total) if total else 0.0 for n in counts],
        diversity=int(np.count_nonzero(counts)),
        p_miou=p_miou,
    )


def class_proportion_ratios(stats: SelectionStats, baseline: SelectionStats) -> list[float | None]:
    """Per-class selected proportion relative to a baseline pass (baseline = 1)."""
    return [
        (p / b) if b > 0 else None
        for p, b in zip(stats.per_class_proportions, baseline.per_class_proportions)
    ]


# ── Output ────────────────────────────────────────────────────────────

def write_pseudo_labels(
    out_dir: str | Path,
    ids: Sequence[str],
    labels: Sequence[LabelMap],
    state: ThresholdState | None,
    stats: SelectionStats,
    *,
    dump_pgm: bool = False,
    num_classes: int | None = None,
) -> None:
    """Dump label maps, the threshold trace and the stats file."""
    out_dir = Path(out_dir)
    for sid, lm in zip(ids, labels):
        write_array(out_dir / "labels" / f"{sid}.arr", lm.labels)
        if dump_pgm:
            export_label_pgm(lm, out_dir / "pgm" / f"{sid}.pgm", num_classes)
    if state is not None:
        columns = ["instance_id"] + [f"class_{k}" for k in range(state.num_classes)]
        emit_csv(state.trace_rows(), out_dir / "thresholds.csv", columns)
    write_json(out_dir / "stats.json", stats.model_dump())
    logger.info(
        f"Wrote {len(labels)} pseudo-labels to {out_dir} "
        f"(proportion={stats.proportion:.3f}, diversity={stats.diversity})"
    )
