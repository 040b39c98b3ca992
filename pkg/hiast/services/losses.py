"""Region-adaptive self-training objective.

Four terms, each a mean over the pixels of one region (0 when the region
is empty) with its gradient with respect to the logits:

* cross-entropy against pseudo-labels on the confident region,
* cross-entropy to the uniform distribution on the confident region
  (KLD regularizer, keeps the model from over-trusting pseudo-labels),
* prediction entropy on the ignored region,
* soft cross-entropy from the EMA teacher's weak-view prediction to the
  student's strong-view prediction on the ignored region.

``total_loss`` assembles them for a batch and backpropagates through the
student network.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hiast.exceptions import ClassCountMismatchError, ShapeMismatchError
from hiast.models import IGNORE, FeatureMap, LabelMap, ModelParams, ProbMap, RegionMasks, log_softmax
from hiast.schemas import AblationSwitches, LossWeights
from hiast.services import augment
from hiast.services.network import add_grads, backward, forward_logits

logger = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True, eq=False)
class LossTerm:
    value: float
    grad_logits: np.ndarray


@dataclass(frozen=True, eq=False)
class LossReport:
    total: float
    ce: float
    kld: float
    entropy: float
    consistency: float
    grads: ModelParams
    source_ce: float = 0.0


def region_masks(y: LabelMap | np.ndarray) -> RegionMasks:
    labels = y.labels if isinstance(y, LabelMap) else np.asarray(y)
    confident = labels != IGNORE
    return RegionMasks(confident=confident, ignored=~confident)


# ── Flat kernels: p, logp are (N, C); masks are (N,) ─────────────────

def _ce(p: np.ndarray, logp: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> LossTerm:
    grad = np.zeros_like(p)
    n = int(mask.sum())
    if n == 0:
        return LossTerm(0.0, grad)
    y = labels[mask].astype(np.int64)
    if y.max() >= p.shape[1]:
        raise ClassCountMismatchError(f"label {int(y.max())} out of range for {p.shape[1]} classes")
    rows = np.flatnonzero(mask)
    value = -np.sum(logp[rows, y], dtype=np.float64) / n
    g = p[rows].copy()
    g[np.arange(n), y] -= 1.0
    grad[rows] = g / n
    return LossTerm(float(value), grad)


def _kld(p: np.ndarray, logp: np.ndarray, mask: np.ndarray) -> LossTerm:
    grad = np.zeros_like(p)
    n = int(mask.sum())
    if n == 0:
        return LossTerm(0.0, grad)
    c = p.shape[1]
    value = -np.sum(logp[mask], dtype=np.float64) / (c * n)
    grad[mask] = (p[mask] - 1.0 / c) / n
    return LossTerm(float(value), grad)


def _entropy(p: np.ndarray, logp: np.ndarray, mask: np.ndarray) -> LossTerm:
    grad = np.zeros_like(p)
    n = int(mask.sum())
    if n == 0:
        return LossTerm(0.0, grad)
    pm, lm = p[mask], logp[mask]
    ent = -np.sum(pm * lm, axis=1)
    grad[mask] = -pm * (lm + ent[:, None]) / n
    return LossTerm(float(np.sum(ent, dtype=np.float64) / n), grad)


def _soft_ce(p_student: np.ndarray, logp_student: np.ndarray, p_teacher: np.ndarray, mask: np.ndarray) -> LossTerm:
    grad = np.zeros_like(p_student)
    n = int(mask.sum())
    if n == 0:
        return LossTerm(0.0, grad)
    q = p_teacher[mask]
    value = -np.sum(q * logp_student[mask], dtype=np.float64) / n
    grad[mask] = (p_student[mask] * q.sum(axis=1, keepdims=True) - q) / n
    return LossTerm(float(value), grad)


def _flat(pm: ProbMap) -> tuple[np.ndarray, np.ndarray]:
    p = pm.probs.reshape(-1, pm.num_classes)
    return p, np.log(np.maximum(p, _TINY))


def _check(pm: ProbMap, masks: RegionMasks) -> None:
    if pm.shape != masks.confident.shape:
        raise ShapeMismatchError(f"probability map {pm.shape} does not match masks {masks.confident.shape}")


def _reshaped(term: LossTerm, pm: ProbMap) -> LossTerm:
    return LossTerm(term.value, term.grad_logits.reshape(pm.probs.shape))


# ── Public per-map terms ──────────────────────────────────────────────

def loss_ce_confident(p: ProbMap, y: LabelMap, masks: RegionMasks) -> LossTerm:
    _check(p, masks)
    if y.shape != p.shape:
        raise ShapeMismatchError(f"labels {y.shape} do not match probability map {p.shape}")
    pf, lf = _flat(p)
    return _reshaped(_ce(pf, lf, y.labels.ravel(), masks.confident.ravel()), p)


def loss_kld_confident(p: ProbMap, masks: RegionMasks) -> LossTerm:
    _check(p, masks)
    pf, lf = _flat(p)
    return _reshaped(_kld(pf, lf, masks.confident.ravel()), p)


def loss_entropy_ignored(p: ProbMap, masks: RegionMasks) -> LossTerm:
    _check(p, masks)
    pf, lf = _flat(p)
    return _reshaped(_entropy(pf, lf, masks.ignored.ravel()), p)


def loss_consistency_ignored(p_student: ProbMap, p_teacher: ProbMap, masks: RegionMasks) -> LossTerm:
    """Soft cross-entropy; the teacher side is a constant target."""
    _check(p_student, masks)
    if p_teacher.probs.shape != p_student.probs.shape:
        raise ShapeMismatchError(
            f"teacher map {p_teacher.probs.shape} is not aligned with student map {p_student.probs.shape}"
        )
    ps, ls = _flat(p_student)
    pt = p_teacher.probs.reshape(-1, p_teacher.num_classes)
    return _reshaped(_soft_ce(ps, ls, pt, masks.ignored.ravel()), p_student)


# ── Batch objective ───────────────────────────────────────────────────

def effective_weights(weights: LossWeights, switches: AblationSwitches | None) -> LossWeights:
    """Zero the weight of every regularizer that is switched off."""
    if switches is None:
        return weights
    return LossWeights(
        lambda_i=weights.lambda_i if switches.r_i else 0.0,
        lambda_c=weights.lambda_c if switches.r_c else 0.0,
        lambda_cst=weights.lambda_cst if switches.r_cst else 0.0,
    )


def _probs(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logp = log_softmax(logits)
    return np.exp(logp), logp


def total_loss(
    params: ModelParams,
    teacher_params: ModelParams,
    batch: Sequence[FeatureMap],
    labels: Sequence[LabelMap],
    weights: LossWeights,
    aug_seed: int | Sequence[int],
    *,
    source_batch: Sequence[tuple[FeatureMap, LabelMap]] | None = None,
) -> LossReport:
    """Value and student gradient of the full objective on one batch.

    Each image gets one weak view (shared flip) and one strong view built on
    top of it. The student sees only the strong view, and all four terms
    read that one prediction; the teacher sees the weak view and supplies
    the consistency target. Labels are carried into the shared geometry and
    erased strong-view pixels belong to neither region.

    Args:
        params: Student weights; the gradient is taken with respect to these.
        teacher_params: EMA teacher weights, treated as constants.
        batch: Target feature maps, already HPLA-augmented.
        labels: Pseudo-labels aligned with ``batch``.
        weights: Regularizer weights; a zero weight skips its term.
        aug_seed: Entropy for the per-image augmentation streams.
        source_batch: Optional labeled source images for a plain CE term.

    Returns:
        A LossReport with every term's value and the summed parameter gradient.
    """
    if not batch:
        raise ValueError("batch must not be empty")
    if len(batch) != len(labels):
        raise ShapeMismatchError(f"{len(batch)} images but {len(labels)} label maps")

    seeds = np.random.SeedSequence(aug_seed)
    weak_x, strong_x, weak_y, erased = [], [], [], []
    for x, y, child in zip(batch, labels, seeds.spawn(len(batch))):
        rng = np.random.default_rng(child)
        xw, geom = augment.augment_weak(x, rng)
        view = augment.strong_view(xw, rng)
        weak_x.append(xw.values)
        strong_x.append(view.features.values)
        weak_y.append(augment.apply_geometry(y.labels, geom))
        erased.append(view.erased)

    lab = np.stack(weak_y).ravel()
    kept = ~np.stack(erased).ravel()
    confident = (lab != IGNORE) & kept
    ignored = (lab == IGNORE) & kept

    cache = forward_logits(params, np.stack(strong_x))
    p, logp = _probs(cache.logits)

    ce = _ce(p, logp, lab, confident)
    grad = ce.grad_logits.copy()

    kld_value = ent_value = cst_value = 0.0
    if weights.lambda_c > 0.0:
        kld = _kld(p, logp, confident)
        kld_value = kld.value
        grad += weights.lambda_c * kld.grad_logits
    if weights.lambda_i > 0.0:
        ent = _entropy(p, logp, ignored)
        ent_value = ent.value
        grad += weights.lambda_i * ent.grad_logits
    if weights.lambda_cst > 0.0:
        teacher_p, _ = _probs(forward_logits(teacher_params, np.stack(weak_x)).logits)
        cst = _soft_ce(p, logp, teacher_p, ignored)
        cst_value = cst.value
        grad += weights.lambda_cst * cst.grad_logits

    grads = backward(params, cache, grad)

    source_value = 0.0
    if source_batch:
        xs = np.stack([f.values for f, _ in source_batch])
        ys = np.stack([l.labels for _, l in source_batch]).ravel()
        cache_src = forward_logits(params, xs)
        p_src, logp_src = _probs(cache_src.logits)
        src = _ce(p_src, logp_src, ys, ys != IGNORE)
        source_value = src.value
        grads = add_grads(grads, backward(params, cache_src, src.grad_logits))

    total = (ce.value + source_value + weights.lambda_c * kld_value
             + weights.lambda_i * ent_value + weights.lambda_cst * cst_value)
    return LossReport(
        total=float(total), ce=ce.value, kld=kld_value, entropy=ent_value,
        consistency=cst_value, grads=grads, source_ce=source_value,
    )


def supervised_loss(params: ModelParams, batch: Sequence[FeatureMap], labels: Sequence[LabelMap],
                    aug_seed: int | Sequence[int]) -> LossReport:
    """Plain CE on labeled images with weak augmentation (source warm-up)."""
    seeds = np.random.SeedSequence(aug_seed)
    xs, ys = [], []
    for x, y, child in zip(batch, labels, seeds.spawn(len(batch))):
        xw, geom = augment.augment_weak(x, np.random.default_rng(child))
        xs.append(xw.values)
        ys.append(augment.apply_geometry(y.labels, geom))
    lab = np.stack(ys).ravel()
    cache = forward_logits(params, np.stack(xs))
    p, logp = _probs(cache.logits)
    ce = _ce(p, logp, lab, lab != IGNORE)
    return LossReport(total=ce.value, ce=ce.value, kld=0.0, entropy=0.0, consistency=0.0,
                      grads=backward(params, cache, ce.grad_logits))
