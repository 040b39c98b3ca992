"""Pydantic schemas for configuration files and JSON reports."""

import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    """Base for config models: unknown keys are an error."""

    model_config = ConfigDict(extra="forbid")


# ──────────────────────────── Data ─────────────────────────────────

class SynthConfig(_Strict):
    """Synthetic source/target pair with a controllable covariate shift."""

    num_classes: int = Field(8, ge=2, le=255)
    channels: int = Field(3, ge=2)
    height: int = Field(32, gt=0)
    width: int = Field(32, gt=0)
    images_per_domain: int = Field(100, gt=0)
    block_size: int = Field(4, gt=0)
    longtail_exponent: float = Field(1.5, ge=0.0)
    class_means: list[list[float]] | None = None
    mean_radius: float = Field(2.0, gt=0.0)
    source_noise: float = Field(0.35, ge=0.0)
    target_rotation_deg: float = 20.0
    target_bias: float = 0.3
    target_noise: float = Field(0.45, ge=0.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_means(self):
        if self.class_means is not None:
            if len(self.class_means) != self.num_classes:
                raise ValueError(
                    f"class_means has {len(self.class_means)} rows, expected {self.num_classes}"
                )
            for row in self.class_means:
                if len(row) != self.channels:
                    raise ValueError(f"class_means rows must have {self.channels} values")
                if not all(math.isfinite(v) for v in row):
                    raise ValueError("class_means must be finite")
        return self


# ──────────────────────────── Pseudo-labels ────────────────────────

class IasParams(_Strict):
    """Instance-adaptive selector hyperparameters."""

    alpha: float = Field(0.5, gt=0.0, le=1.0)
    beta: float = Field(0.9, ge=0.0, le=1.0)
    gamma: float = Field(8.0, ge=0.0)
    theta_init: float = Field(0.9, gt=0.0, le=1.0)


class SelectionStats(BaseModel):
    """How much of the target set a pseudo-label pass selected."""

    num_pixels: int
    proportion: float
    per_class_proportions: list[float]
    diversity: int
    p_miou: float | None = None


# ──────────────────────────── Training ─────────────────────────────

class LossWeights(_Strict):
    lambda_i: float = Field(1.0, ge=0.0)
    lambda_c: float = Field(0.1, ge=0.0)
    lambda_cst: float = Field(0.5, ge=0.0)


class OptimizerConfig(_Strict):
    lr: float = Field(1e-2, gt=0.0)
    warmup_lr: float = Field(1e-2, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class ModelConfig(_Strict):
    hidden: int = Field(16, ge=0)
    activation: Literal["tanh", "relu"] = "tanh"


class AblationSwitches(_Strict):
    """Module on/off switches; every combination is runnable."""

    ias: bool = True
    hpla: bool = True
    r_i: bool = True
    r_c: bool = True
    r_cst: bool = True
    source_ce: bool = False


class ExperimentConfig(_Strict):
    """Everything a run depends on. A run is a pure function of this object."""

    source_dir: str | None = None
    target_dir: str | None = None
    synth: SynthConfig = Field(default_factory=SynthConfig)

    ias: IasParams = Field(default_factory=IasParams)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    hard_classes_k: int | None = Field(None, ge=1)
    tau: float = Field(0.999, ge=0.0, le=1.0)

    rounds: int = Field(3, ge=0)
    iterations_per_round: int = Field(500, ge=0)
    warmup_iterations: int = Field(500, ge=0)
    batch_size: int = Field(8, gt=0)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    seed: int = Field(0, ge=0)

    switches: AblationSwitches = Field(default_factory=AblationSwitches)
    baseline_generator: Literal["classbalanced", "constant"] = "classbalanced"
    constant_threshold: float = Field(0.9, ge=0.0, lt=1.0)
    shuffle_instances: bool = False
    hpla_draws: int = Field(1, ge=1)

    eval_student: bool = False
    trace_thresholds: bool = True
    init_checkpoint: str | None = None
    dump_pgm: bool = False

    @model_validator(mode="after")
    def _check_dirs(self):
        if (self.source_dir is None) != (self.target_dir is None):
            raise ValueError("source_dir and target_dir must be given together")
        return self

    def resolved_k(self, num_classes: int) -> int:
        """Number of hard classes; defaults to ceil(C/2)."""
        k = self.hard_classes_k if self.hard_classes_k is not None else math.ceil(num_classes / 2)
        return min(k, num_classes)


# ──────────────────────────── Reports ──────────────────────────────

class RoundMetrics(BaseModel):
    round: int
    phase: Literal["warmup", "self_training"]
    miou: float
    per_class_iou: list[float]
    pl_proportion: float | None = None
    pl_diversity: int | None = None
    pl_pmiou: float | None = None
    generator: str | None = None
    hard_classes: list[int] = []
    hard_share_before: float | None = None
    hard_share_after: float | None = None


class FinalReport(BaseModel):
    warmup_miou: float
    final_miou: float
    source_warmup_miou: float | None = None
    rounds: list[RoundMetrics]
    lineage: list[str]
    artifacts: dict[str, str] = {}


class SweepSpec(_Strict):
    """One-parameter sensitivity sweep over a base config."""

    param: Literal["alpha", "gamma", "beta", "k", "lambda_i", "lambda_c", "lambda_cst"]
    values: list[float] = Field(..., min_length=1)
    base: ExperimentConfig = Field(default_factory=ExperimentConfig)
    seeds: list[int] = Field(default_factory=lambda: [0])

    @model_validator(mode="after")
    def _check_values(self):
        for v in self.values:
            if self.param == "alpha" and not 0.0 < v <= 1.0:
                raise ValueError(f"alpha must be in (0, 1], got {v}")
            if self.param == "beta" and not 0.0 <= v <= 1.0:
                raise ValueError(f"beta must be in [0, 1], got {v}")
            if self.param == "k" and (v < 1 or v > self.base.synth.num_classes or v != int(v)):
                raise ValueError(f"k must be an integer in [1, C], got {v}")
            if self.param in ("gamma", "lambda_i", "lambda_c", "lambda_cst") and v < 0:
                raise ValueError(f"{self.param} must be >= 0, got {v}")
        return self


# ──────────────────────────── On-disk headers ──────────────────────

class ManifestEntry(BaseModel):
    id: str = Field(..., min_length=1)
    features: str = Field(..., min_length=1)
    labels: str | None = None


class DatasetManifest(BaseModel):
    """``manifest.json`` of a dataset directory."""

    format_version: int
    num_classes: int = Field(..., ge=1, le=255)
    channels: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    domain: str
    samples: list[ManifestEntry]


class ParamsHeader(BaseModel):
    """The part of a checkpoint header needed to rebuild one set of weights."""

    activation: Literal["tanh", "relu"]


class CheckpointHeader(ParamsHeader):
    """``header.json`` of a round checkpoint."""

    format_version: int
    round: int = Field(..., ge=0)
    step: int = Field(..., ge=0)
    tau: float | None = Field(None, ge=0.0, le=1.0)
    lineage: list[str] = Field(..., min_length=1)
    generator_id: str | None = None
    threshold_updates: int | None = Field(None, ge=0)
    source_warmup_miou: float | None = None
    metrics_history: list[RoundMetrics]
    arrays: dict[str, str]
