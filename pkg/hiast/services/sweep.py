"""Parameter sweeps, ablation tables and selector comparisons.

Every job is an ExperimentConfig plus an isolated output directory, so jobs
can run in worker processes; aggregation into CSV happens afterwards in
job order. Results depend only on the sweep definition and the seeds.
"""

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hiast import presets
from hiast.exceptions import ConfigError
from hiast.models import LabelMap, ProbMap
from hiast.schemas import ExperimentConfig, IasParams, SweepSpec
from hiast.services.pipeline import (
    initial_state,
    load_datasets,
    predict_probmaps,
    run_self_training,
)
from hiast.services.pseudo_labeler import (
    generate_pseudo_labels_constant,
    generate_pseudo_labels_ias,
    selection_stats,
)
from hiast.storage import emit_csv, read_csv

logger = logging.getLogger(__name__)

# Where each sweepable name lives inside ExperimentConfig.
_PARAM_PATHS = {
    "alpha": ("ias", "alpha"),
    "beta": ("ias", "beta"),
    "gamma": ("ias", "gamma"),
    "k": ("hard_classes_k",),
    "lambda_i": ("loss_weights", "lambda_i"),
    "lambda_c": ("loss_weights", "lambda_c"),
    "lambda_cst": ("loss_weights", "lambda_cst"),
}

RESULT_COLUMNS = ["group", "param", "value", "seed", "warmup_miou", "final_miou",
                  "pl_proportion", "pl_diversity", "pl_pmiou"]


def apply_override(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    """Copy of ``cfg`` with one sweepable parameter replaced (and re-validated)."""
    if param not in _PARAM_PATHS:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    raw = cfg.model_dump()
    *parents, leaf = _PARAM_PATHS[param]
    node = raw
    for key in parents:
        node = node[key]
    node[leaf] = int(value) if param == "k" else float(value)
    return ExperimentConfig.model_validate(raw)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Seed both the training streams and the synthetic data."""
    return cfg.model_copy(update={
        "seed": seed,
        "synth": cfg.synth.model_copy(update={"seed": seed}),
    })


@dataclass(frozen=True)
class SweepJob:
    group: str
    param: str
    value: float | None
    seed: int
    cfg: ExperimentConfig
    out_dir: str | None


def _run_job(job: SweepJob) -> dict:
    report = run_self_training(job.cfg, job.out_dir)
    last = report.rounds[-1]
    return {
        "group": job.group,
        "param": job.param,
        "value": job.value,
        "seed": job.seed,
        "warmup_miou": report.warmup_miou,
        "final_miou": report.final_miou,
        "pl_proportion": last.pl_proportion,
        "pl_diversity": last.pl_diversity,
        "pl_pmiou": last.pl_pmiou,
    }


def run_jobs(jobs: Sequence[SweepJob], workers: int = 1) -> list[dict]:
    """Run jobs, in worker processes when ``workers > 1``; rows come back in job order."""
    logger.info(f"Running {len(jobs)} jobs with {workers} worker(s)")
    if workers <= 1:
        return [_run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _job_dir(out_dir: str | Path | None, group: str, seed: int) -> str | None:
    if out_dir is None:
        return None
    return str(Path(out_dir) / group / f"seed_{seed}")


def sweep_jobs(spec: SweepSpec, out_dir: str | Path | None = None) -> list[SweepJob]:
    jobs = []
    for value in spec.values:
        cfg = apply_override(spec.base, spec.param, value)
        group = f"{spec.param}={value:g}"
        for seed in spec.seeds:
            jobs.append(SweepJob(group, spec.param, value, seed, with_seed(cfg, seed),
                                 _job_dir(out_dir, group, seed)))
    return jobs


def run_sweep(spec: SweepSpec, out_dir: str | Path | None = None, workers: int = 1) -> list[dict]:
    """One row per (value, seed); written to ``<out>/sweep.csv`` when ``out_dir`` is given."""
    rows = run_jobs(sweep_jobs(spec, out_dir), workers)
    if out_dir is not None:
        emit_csv(rows, Path(out_dir) / "sweep.csv", RESULT_COLUMNS)
    return rows


def run_ablation(base: ExperimentConfig, mode: str, seeds: Sequence[int],
                 out_dir: str | Path | None = None, workers: int = 1) -> list[dict]:
    """Ablation ladder (``ladder``) or one-module-off table (``switch-off``)."""
    if mode == "ladder":
        variants = presets.ablation_ladder(base)
    elif mode == "switch-off":
        variants = presets.switch_off_table(base)
    else:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    jobs = [
        SweepJob(name, "variant", None, seed, with_seed(cfg, seed), _job_dir(out_dir, name, seed))
        for name, cfg in variants
        for seed in seeds
    ]
    rows = run_jobs(jobs, workers)
    if out_dir is not None:
        emit_csv(rows, Path(out_dir) / "ablation.csv", RESULT_COLUMNS)
    return rows


# ── Aggregation ───────────────────────────────────────────────────────

def _final_rows(path: Path) -> list[tuple[str, float]]:
    rows = read_csv(path)
    if not rows:
        return []
    if "final_miou" in rows[0]:
        return [(r["group"], float(r["final_miou"])) for r in rows]
    # metrics.csv of a single run: last row is the final evaluation
    run_dir = path.parent
    group = run_dir.parent.name if run_dir.name.startswith("seed_") else run_dir.name
    return [(group, float(rows[-1]["miou"]))]


def summarize(paths: Iterable[str | Path]) -> list[dict]:
    """Median and mean final mIoU per group over every row of the given CSVs.

    Accepts ``sweep.csv``/``ablation.csv`` files (group column) and
    ``metrics.csv`` files (grouped by run directory, ``seed_*`` folded).
    """
    groups: dict[str, list[float]] = {}
    for path in paths:
        for group, value in _final_rows(Path(path)):
            groups.setdefault(group, []).append(value)
    return [
        {
            "group": group,
            "n": len(values),
            "median_final_miou": statistics.median(values),
            "mean_final_miou": statistics.fmean(values),
        }
        for group, values in groups.items()
    ]


# ── Selector comparison ───────────────────────────────────────────────

DEFAULT_MATCHED_PROPORTION = 0.2


def _matched_constant_threshold(maxprobs: np.ndarray, proportion: float) -> float:
    """Largest threshold whose strict-greater selection covers ``proportion`` of pixels."""
    ordered = np.sort(maxprobs)[::-1]
    n_keep = int(round(proportion * ordered.size))
    if n_keep <= 0:
        return float(ordered[0])
    if n_keep >= ordered.size:
        return 0.0
    return float(ordered[n_keep])


def match_ias_alpha(probmaps: Sequence[ProbMap], params: IasParams, target_proportion: float,
                    num_classes: int, iterations: int = 20) -> tuple[IasParams, list[LabelMap]]:
    """Bisect alpha in (0, 1] so IAS selects about ``target_proportion`` of pixels.

    The selected proportion grows with alpha; the evaluated alpha closest to
    the target wins, and alpha = 1 is used when even it falls short.

    Returns:
        The IAS parameters with the matched alpha and the labels they produce.
    """
    def run(alpha: float) -> tuple[IasParams, list[LabelMap], float]:
        p = params.model_copy(update={"alpha": alpha})
        labels, _ = generate_pseudo_labels_ias(probmaps, p, num_classes=num_classes)
        return p, labels, selection_stats(labels, num_classes=num_classes).proportion

    best = run(1.0)
    if best[2] <= target_proportion:
        return best[0], best[1]
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        cand = run(mid)
        if abs(cand[2] - target_proportion) < abs(best[2] - target_proportion):
            best = cand
        if cand[2] < target_proportion:
            lo = mid
        else:
            hi = mid
    return best[0], best[1]


def compare_selectors(base: ExperimentConfig, seeds: Sequence[int], out_dir: str | Path | None = None,
                      target_proportion: float | None = DEFAULT_MATCHED_PROPORTION) -> list[dict]:
    """IAS vs a constant threshold tuned to select the same share of pixels.

    Args:
        base: Experiment whose warm-up model supplies the predictions.
        seeds: One comparison per seed; each seed regenerates the data.
        out_dir: Where ``selectors.csv`` goes (nothing is written if None).
        target_proportion: Share of pixels IAS should select; alpha is
            bisected per seed to reach it. None keeps ``base.ias`` as given.

    Returns:
        One row per seed with the alpha used, each selector's overall
        proportion and its number of distinct classes selected.
    """
    rows = []
    for seed in seeds:
        cfg = with_seed(base, seed)
        source, target = load_datasets(cfg)
        state = initial_state(cfg, source, target)
        probmaps = predict_probmaps(state.teacher, target)
        c = target.meta.num_classes

        if target_proportion is None:
            ias = cfg.ias
            ias_labels, _ = generate_pseudo_labels_ias(probmaps, ias, num_classes=c)
        else:
            ias, ias_labels = match_ias_alpha(probmaps, cfg.ias, target_proportion, c)
        ias_stats = selection_stats(ias_labels, num_classes=c)

        maxprobs = np.concatenate([pm.probs.max(axis=-1).ravel() for pm in probmaps])
        theta_c = _matched_constant_threshold(maxprobs, ias_stats.proportion)
        const_stats = selection_stats(generate_pseudo_labels_constant(probmaps, theta_c), num_classes=c)

        logger.info(
            f"seed {seed}: IAS(alpha={ias.alpha:.4f}) {ias_stats.proportion:.3f}/{ias_stats.diversity} classes, "
            f"constant({theta_c:.4f}) {const_stats.proportion:.3f}/{const_stats.diversity} classes"
        )
        rows.append({
            "seed": seed,
            "alpha": ias.alpha,
            "ias_proportion": ias_stats.proportion,
            "ias_diversity": ias_stats.diversity,
            "constant_threshold": theta_c,
            "constant_proportion": const_stats.proportion,
            "constant_diversity": const_stats.diversity,
        })
    if out_dir is not None:
        emit_csv(rows, Path(out_dir) / "selectors.csv")
    return rows
