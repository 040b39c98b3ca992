"""Multi-round self-training orchestration.

A run is: source-only warm-up (or a loaded warm-up checkpoint), then
``cfg.rounds`` rounds of

1. pseudo-labeling the target set with the current generator (the teacher),
2. training the student on those labels with HPLA, the region losses and
   an EMA teacher.

The teacher is created from the warm-up model before round 1 and carries
over between rounds; the teacher at the end of round n generates the
labels of round n + 1. Every random draw comes from a stream keyed on the
config seed, so a run is a pure function of its ExperimentConfig.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from hiast.exceptions import CheckpointError, ConfigError, ShapeMismatchError, UnlabeledDatasetError
from hiast.models import Dataset, LabelMap, ModelParams, ProbMap
from hiast.schemas import (
    CheckpointHeader,
    ExperimentConfig,
    FinalReport,
    ParamsHeader,
    RoundMetrics,
    SelectionStats,
)
from hiast.services import hpla
from hiast.services.losses import effective_weights, supervised_loss, total_loss
from hiast.services.metrics import confusion_matrix, miou
from hiast.services.network import forward, init_params, predict_labels
from hiast.services.optim import AdamMoments, StepConfig, adam_step, ema_update_params
from hiast.services.pseudo_labeler import (
    ThresholdState,
    apply_thresholds,
    classbalanced_thresholds,
    generate_pseudo_labels_constant,
    generate_pseudo_labels_ias,
    selection_stats,
    write_pseudo_labels,
)
from hiast.services.synthetic import make_synthetic_pair
from hiast.storage import (
    emit_csv,
    load_checkpoint,
    load_dataset,
    params_from_arrays,
    params_to_arrays,
    save_checkpoint,
    write_json,
)

logger = logging.getLogger(__name__)

# Stream tags mixed into SeedSequence entropy next to (seed, round, iteration).
_WARMUP_BATCH = 0xB0
_WARMUP_AUG = 0xB1
_ROUND_BATCH = 0xC0
_ROUND_AUG = 0xC1
_SOURCE_BATCH = 0xC2
_SHUFFLE = 0xC3

WARMUP_ID = "warmup"


def teacher_id(round_idx: int) -> str:
    return f"round-{round_idx}-teacher"


# ── Data ──────────────────────────────────────────────────────────────

def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Source and target sets: from disk when dirs are given, else synthesized."""
    if cfg.source_dir is not None:
        source = load_dataset(cfg.source_dir)
        target = load_dataset(cfg.target_dir)
    else:
        source, target = make_synthetic_pair(cfg.synth)

    s, t = source.meta, target.meta
    if s.num_classes != t.num_classes or s.channels != t.channels:
        raise ConfigError(
            f"source ({s.num_classes} classes, {s.channels} channels) and target "
            f"({t.num_classes} classes, {t.channels} channels) are incompatible"
        )
    if len(target) == 0:
        raise ConfigError("target dataset is empty")
    return source, target


def _batch_positions(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


# ── Evaluation ────────────────────────────────────────────────────────

def predict_probmaps(params: ModelParams, ds: Dataset) -> list[ProbMap]:
    return [forward(params, s.features) for s in ds]


def predict_label_maps(params: ModelParams, ds: Dataset) -> list[LabelMap]:
    return [LabelMap(predict_labels(params, s.features)) for s in ds]


def evaluate_params(params: ModelParams, ds: Dataset) -> tuple[float, list[float]]:
    """mIoU and per-class IoU (NaN for absent classes) of ``params`` on a labeled set."""
    if not ds.is_labeled:
        raise UnlabeledDatasetError(f"{ds.meta.domain} dataset has unlabeled samples; cannot evaluate")
    cm = confusion_matrix(predict_label_maps(params, ds), [s.labels for s in ds], ds.meta.num_classes)
    mean, per_class = miou(cm)
    return float(mean), [float(v) for v in per_class]


def _evaluate_or_nan(params: ModelParams, ds: Dataset) -> tuple[float, list[float]]:
    if not ds.is_labeled:
        return float("nan"), [float("nan")] * ds.meta.num_classes
    return evaluate_params(params, ds)


# ── Warm-up ───────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class WarmupResult:
    params: ModelParams
    loss_history: list[float]


def warmup_source_only(cfg: ExperimentConfig, source: Dataset,
                       init: ModelParams | None = None) -> WarmupResult:
    """Supervised CE on the labeled source set for ``cfg.warmup_iterations`` steps.

    Args:
        cfg: Experiment config; reads model, optimizer, batch size, seed.
        source: Labeled source dataset.
        init: Starting weights. Seeded initialization when omitted.

    Returns:
        The trained weights and the per-iteration training loss.
    """
    if not source.is_labeled:
        raise UnlabeledDatasetError("warm-up needs a fully labeled source dataset")

    params = init if init is not None else init_params(
        source.meta.channels, source.meta.num_classes, cfg.model, cfg.seed
    )
    moments = AdamMoments.zeros(params)
    budget = cfg.warmup_iterations
    history: list[float] = []

    for it in range(budget):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _WARMUP_BATCH, it]))
        batch = [source[int(p)] for p in _batch_positions(rng, len(source), cfg.batch_size)]
        report = supervised_loss(
            params, [s.features for s in batch], [s.labels for s in batch],
            aug_seed=[cfg.seed, _WARMUP_AUG, it],
        )
        step = StepConfig.from_config(cfg.optimizer, it, budget, lr=cfg.optimizer.warmup_lr)
        params, moments = adam_step(params, report.grads, moments, step)
        history.append(report.total)
        if (it + 1) % 100 == 0 or it + 1 == budget:
            logger.debug(f"warm-up {it + 1}/{budget}: loss={report.total:.4f}")

    if history:
        logger.info(f"Warm-up done: {budget} iterations, loss {history[0]:.4f} -> {history[-1]:.4f}")
    return WarmupResult(params, history)


# ── Pseudo-labels for one round ───────────────────────────────────────

@dataclass(frozen=True, eq=False)
class RoundLabels:
    labels: list[LabelMap]
    thresholds: ThresholdState
    stats: SelectionStats


def generate_round_labels(generator: ModelParams, target: Dataset, cfg: ExperimentConfig,
                          round_idx: int) -> RoundLabels:
    """Pseudo-label the target set with the configured selector.

    With IAS switched off the configured baseline substitutes; its
    thresholds are wrapped in a ThresholdState so HPLA can still rank
    classes.
    """
    c = target.meta.num_classes
    probmaps = predict_probmaps(generator, target)

    if cfg.switches.ias:
        shuffle = None
        if cfg.shuffle_instances:
            shuffle = int(np.random.SeedSequence([cfg.seed, _SHUFFLE, round_idx]).generate_state(1)[0])
        labels, state = generate_pseudo_labels_ias(
            probmaps, cfg.ias, trace=cfg.trace_thresholds,
            num_classes=c, instance_ids=target.ids, shuffle_seed=shuffle,
        )
    elif cfg.baseline_generator == "classbalanced":
        theta = classbalanced_thresholds(probmaps, cfg.ias.alpha, num_classes=c)
        labels = apply_thresholds(probmaps, theta)
        state = ThresholdState(theta)
    else:
        labels = generate_pseudo_labels_constant(probmaps, cfg.constant_threshold)
        state = ThresholdState(np.full(c, float(np.clip(cfg.constant_threshold, 1e-6, 1.0))))

    reference = [s.labels for s in target] if target.is_labeled else None
    stats = selection_stats(labels, reference, num_classes=c)
    return RoundLabels(labels, state, stats)


# ── Round state and checkpoints ───────────────────────────────────────

@dataclass(eq=False)
class RoundState:
    """Everything needed to continue a run after ``round`` completed rounds."""

    round: int
    student: ModelParams
    teacher: ModelParams
    moments: AdamMoments
    thresholds: ThresholdState | None = None
    pseudo_labels: list[LabelMap] | None = None
    metrics: list[RoundMetrics] = field(default_factory=list)
    lineage: list[str] = field(default_factory=lambda: [WARMUP_ID])
    source_warmup_miou: float | None = None
    tau: float | None = None

    @property
    def generator_id(self) -> str:
        return self.lineage[-1]

    def equals(self, other: "RoundState") -> bool:
        """Bit-exact comparison of parameters, moments, labels and history."""
        if (self.round, self.lineage, self.moments.step) != (other.round, other.lineage, other.moments.step):
            return False
        for a, b in ((self.student, other.student), (self.teacher, other.teacher),
                     (self.moments.m, other.moments.m), (self.moments.v, other.moments.v)):
            if not a.equals(b):
                return False
        if (self.thresholds is None) != (other.thresholds is None):
            return False
        if self.thresholds is not None and \
                self.thresholds.thresholds.tobytes() != other.thresholds.thresholds.tobytes():
            return False
        if (self.pseudo_labels is None) != (other.pseudo_labels is None):
            return False
        if self.pseudo_labels is not None:
            if len(self.pseudo_labels) != len(other.pseudo_labels):
                return False
            if any(a.labels.tobytes() != b.labels.tobytes()
                   for a, b in zip(self.pseudo_labels, other.pseudo_labels)):
                return False
        return _metrics_bytes(self.metrics) == _metrics_bytes(other.metrics)


def _metrics_bytes(metrics: list[RoundMetrics]) -> str:
    # repr keeps NaN comparable
    return repr([m.model_dump() for m in metrics])


def save_round_checkpoint(path: str | Path, state: RoundState) -> None:
    arrays = {
        **params_to_arrays(state.student, "student"),
        **params_to_arrays(state.teacher, "teacher"),
        **params_to_arrays(state.moments.m, "adam_m"),
        **params_to_arrays(state.moments.v, "adam_v"),
    }
    if state.thresholds is not None:
        arrays["thresholds"] = np.asarray(state.thresholds.thresholds, dtype=np.float64)
    if state.pseudo_labels:
        arrays["pseudo_labels"] = np.stack([lm.labels for lm in state.pseudo_labels])
    header = {
        "round": state.round,
        "step": state.moments.step,
        "tau": state.tau,
        "activation": state.student.activation,
        "lineage": list(state.lineage),
        "generator_id": state.metrics[-1].generator if state.metrics else None,
        "threshold_updates": state.thresholds.update_count if state.thresholds is not None else None,
        "source_warmup_miou": state.source_warmup_miou,
        "metrics_history": [m.model_dump() for m in state.metrics],
    }
    save_checkpoint(path, header, arrays)


def load_round_checkpoint(path: str | Path) -> RoundState:
    """Restore a RoundState; raises CheckpointError unless the whole state is valid."""
    raw, arrays = load_checkpoint(path)
    try:
        header = CheckpointHeader.model_validate(raw)
    except ValidationError as e:
        raise CheckpointError(f"corrupted checkpoint header in {path}: {e}") from e

    activation = header.activation
    try:
        student = params_from_arrays(arrays, "student", activation)
        teacher = params_from_arrays(arrays, "teacher", activation)
        moments = AdamMoments(
            params_from_arrays(arrays, "adam_m", activation),
            params_from_arrays(arrays, "adam_v", activation),
            header.step,
        )
        thresholds = None
        if "thresholds" in arrays:
            thresholds = ThresholdState(arrays["thresholds"].astype(np.float64), header.threshold_updates or 0)
        labels = None
        if "pseudo_labels" in arrays:
            labels = [LabelMap(a) for a in arrays["pseudo_labels"]]
    except (ValueError, ShapeMismatchError) as e:
        raise CheckpointError(f"corrupted checkpoint tensors in {path}: {e}") from e

    return RoundState(
        round=header.round,
        student=student,
        teacher=teacher,
        moments=moments,
        thresholds=thresholds,
        pseudo_labels=labels,
        metrics=header.metrics_history,
        lineage=header.lineage,
        source_warmup_miou=header.source_warmup_miou,
        tau=header.tau,
    )


def load_model_params(path: str | Path, which: str = "teacher") -> ModelParams:
    """Pull one set of weights (``teacher`` or ``student``) out of a round checkpoint."""
    raw, arrays = load_checkpoint(path)
    try:
        header = ParamsHeader.model_validate(raw)
    except ValidationError as e:
        raise CheckpointError(f"checkpoint {path} does not record a valid activation: {e}") from e
    try:
        return params_from_arrays(arrays, which, header.activation)
    except (ValueError, ShapeMismatchError) as e:
        raise CheckpointError(f"corrupted {which} weights in {path}: {e}") from e


# ── Rounds ────────────────────────────────────────────────────────────

def initial_state(cfg: ExperimentConfig, source: Dataset, target: Dataset) -> RoundState:
    """Warm up inline, or load ``cfg.init_checkpoint``, and evaluate the result."""
    if cfg.init_checkpoint:
        params = load_model_params(cfg.init_checkpoint)
        if params.num_classes != target.meta.num_classes or params.in_features != target.meta.channels:
            raise ConfigError(
                f"init checkpoint maps {params.in_features} -> {params.num_classes}, "
                f"data needs {target.meta.channels} -> {target.meta.num_classes}"
            )
        logger.info(f"Loaded warm-up weights from {cfg.init_checkpoint}")
    else:
        params = warmup_source_only(cfg, source).params

    tgt_miou, per_class = _evaluate_or_nan(params, target)
    src_miou = _evaluate_or_nan(params, source)[0]
    logger.info(f"Warm-up model: target mIoU={tgt_miou:.4f}, source mIoU={src_miou:.4f}")
    row = RoundMetrics(round=0, phase="warmup", miou=tgt_miou, per_class_iou=per_class)
    return RoundState(
        round=0, student=params, teacher=params, moments=AdamMoments.zeros(params),
        metrics=[row], source_warmup_miou=src_miou, tau=cfg.tau,
    )


def _hpla_context(cfg: ExperimentConfig, target: Dataset, labels: list[LabelMap],
                  hard: hpla.HardClassSet, theta: np.ndarray) -> hpla.HplaContext | None:
    if not cfg.switches.hpla:
        return None
    return hpla.HplaContext(
        donors={s.id: (s.features, lm) for s, lm in zip(target, labels)},
        index=hpla.build_class_index(labels, target.ids, target.meta.num_classes),
        hard=hard,
        r=hpla.sampling_probabilities_or_uniform(theta),
        draws=cfg.hpla_draws,
    )


def run_round(state: RoundState, cfg: ExperimentConfig, source: Dataset, target: Dataset,
              out_dir: str | Path | None = None) -> RoundState:
    """Pseudo-label with the current teacher, then self-train for one round.

    Args:
        state: State after ``state.round`` completed rounds.
        cfg: Experiment config.
        source: Source set; only read when the ``source_ce`` switch is on.
        target: Target set to pseudo-label and train on.
        out_dir: Run directory; ``round_{n}/`` with labels, stats and a
            checkpoint is written under it when given.

    Returns:
        The state after round ``state.round + 1``, its metrics row appended.
    """
    n = state.round + 1
    c = target.meta.num_classes
    generator = state.generator_id
    logger.info(f"Round {n}: generating pseudo-labels with {generator}")

    pl = generate_round_labels(state.teacher, target, cfg, n)
    theta = pl.thresholds.thresholds
    hard = hpla.detect_hard_classes(theta, cfg.resolved_k(c))
    ctx = _hpla_context(cfg, target, pl.labels, hard, theta)
    weights = effective_weights(cfg.loss_weights, cfg.switches)
    hard_ids = list(hard.classes)

    student, teacher, moments = state.student, state.teacher, state.moments
    budget = cfg.iterations_per_round
    hard_before = hard_after = 0.0
    pixels = 0

    for it in range(budget):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, n, it, _ROUND_BATCH]))
        positions = [int(p) for p in _batch_positions(rng, len(target), cfg.batch_size)]
        xs, ys = hpla.augment_batch(
            [target[p].id for p in positions],
            [target[p].features for p in positions],
            [pl.labels[p] for p in positions],
            positions, ctx, seed=cfg.seed, round_idx=n, iteration=it,
        )
        batch_pixels = sum(y.labels.size for y in ys)
        hard_before += hpla.hard_class_share([pl.labels[p] for p in positions], hard) * batch_pixels
        hard_after += hpla.hard_class_share(ys, hard) * batch_pixels
        pixels += batch_pixels

        source_batch = None
        if cfg.switches.source_ce:
            if not source.is_labeled:
                raise UnlabeledDatasetError("source_ce needs a labeled source dataset")
            src_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, n, it, _SOURCE_BATCH]))
            source_batch = [(source[int(p)].features, source[int(p)].labels)
                            for p in _batch_positions(src_rng, len(source), cfg.batch_size)]

        report = total_loss(student, teacher, xs, ys, weights,
                            aug_seed=[cfg.seed, n, it, _ROUND_AUG], source_batch=source_batch)
        student, moments = adam_step(student, report.grads, moments,
                                     StepConfig.from_config(cfg.optimizer, it, budget))
        teacher = ema_update_params(teacher, student, cfg.tau)
        if (it + 1) % 100 == 0 or it + 1 == budget:
            logger.debug(
                f"round {n} iter {it + 1}/{budget}: total={report.total:.4f} ce={report.ce:.4f} "
                f"kld={report.kld:.4f} ent={report.entropy:.4f} cst={report.consistency:.4f}"
            )

    share_before = hard_before / pixels if pixels else None
    share_after = hard_after / pixels if pixels else None
    if pixels:
        logger.info(f"Round {n}: hard classes {hard_ids}, share {share_before:.3f} -> {share_after:.3f}")

    eval_model = student if cfg.eval_student else teacher
    round_miou, per_class = _evaluate_or_nan(eval_model, target)
    logger.info(
        f"Round {n}: mIoU={round_miou:.4f}, pseudo-labels proportion={pl.stats.proportion:.3f} "
        f"diversity={pl.stats.diversity}"
    )

    row = RoundMetrics(
        round=n,
        phase="self_training",
        miou=round_miou,
        per_class_iou=per_class,
        pl_proportion=pl.stats.proportion,
        pl_diversity=pl.stats.diversity,
        pl_pmiou=pl.stats.p_miou,
        generator=generator,
        hard_classes=hard_ids,
        hard_share_before=share_before,
        hard_share_after=share_after,
    )
    new_state = RoundState(
        round=n,
        student=student,
        teacher=teacher,
        moments=moments,
        thresholds=pl.thresholds,
        pseudo_labels=pl.labels,
        metrics=[*state.metrics, row],
        lineage=[*state.lineage, teacher_id(n)],
        source_warmup_miou=state.source_warmup_miou,
        tau=cfg.tau,
    )

    if out_dir is not None:
        round_dir = Path(out_dir) / f"round_{n}"
        write_pseudo_labels(round_dir, target.ids, pl.labels, pl.thresholds, pl.stats,
                            dump_pgm=cfg.dump_pgm, num_classes=c)
        save_round_checkpoint(round_dir / "checkpoint", new_state)
    return new_state


# ── Whole run ─────────────────────────────────────────────────────────

def metrics_rows(metrics: list[RoundMetrics], num_classes: int) -> tuple[list[dict], list[str]]:
    """Rows and column order of ``metrics.csv``."""
    columns = ["round", "phase", "miou"] + [f"per_class_iou_{k}" for k in range(num_classes)] + \
        ["pl_proportion", "pl_diversity", "pl_pmiou"]
    rows = []
    for m in metrics:
        row = {"round": m.round, "phase": m.phase, "miou": m.miou}
        row.update({f"per_class_iou_{k}": v for k, v in enumerate(m.per_class_iou)})
        row.update({"pl_proportion": m.pl_proportion, "pl_diversity": m.pl_diversity,
                    "pl_pmiou": m.pl_pmiou})
        rows.append(row)
    return rows, columns


def run_self_training(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                      resume_from: str | Path | None = None) -> FinalReport:
    """Warm-up (or load), run the remaining rounds, and write the run's artifacts.

    With ``resume_from`` the run continues after the round stored in that
    checkpoint and ends bit-identical to an uninterrupted run.
    """
    source, target = load_datasets(cfg)
    c = target.meta.num_classes

    if resume_from is not None:
        state = load_round_checkpoint(resume_from)
        if state.student.num_classes != c or state.student.in_features != target.meta.channels:
            raise CheckpointError(f"checkpoint {resume_from} does not match the configured data")
        logger.info(f"Resuming from {resume_from} after round {state.round}")
    else:
        state = initial_state(cfg, source, target)
        if out_dir is not None:
            save_round_checkpoint(Path(out_dir) / "round_0" / "checkpoint", state)

    while state.round < cfg.rounds:
        state = run_round(state, cfg, source, target, out_dir)

    artifacts: dict[str, str] = {}
    if out_dir is not None:
        out = Path(out_dir)
        write_json(out / "config.json", cfg.model_dump())
        rows, columns = metrics_rows(state.metrics, c)
        emit_csv(rows, out / "metrics.csv", columns)
        save_round_checkpoint(out / "checkpoint", state)
        artifacts = {
            "config": str(out / "config.json"),
            "metrics": str(out / "metrics.csv"),
            "report": str(out / "report.json"),
            "checkpoint": str(out / "checkpoint"),
        }

    report = FinalReport(
        warmup_miou=state.metrics[0].miou,
        final_miou=state.metrics[-1].miou,
        source_warmup_miou=state.source_warmup_miou,
        rounds=state.metrics,
        lineage=state.lineage,
        artifacts=artifacts,
    )
    if out_dir is not None:
        write_json(Path(out_dir) / "report.json", report.model_dump())
    logger.info(f"Run finished: warm-up mIoU={report.warmup_miou:.4f} -> final mIoU={report.final_miou:.4f}")
    return report
