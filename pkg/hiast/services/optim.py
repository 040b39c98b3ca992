"""Adam with a cosine learning-rate schedule, and the EMA teacher update."""

import math
from dataclasses import dataclass

import numpy as np

from hiast.exceptions import NonFiniteGradientError, ShapeMismatchError
from hiast.models import ModelParams
from hiast.schemas import OptimizerConfig


@dataclass(frozen=True, eq=False)
class AdamMoments:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamMoments":
        zero = params.map(np.zeros_like)
        return cls(m=zero, v=zero, step=0)


@dataclass(frozen=True)
class StepConfig:
    """Learning-rate schedule position for one update."""

    lr: float
    iteration: int
    total_iterations: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_config(cls, cfg: OptimizerConfig, iteration: int, total_iterations: int,
                    lr: float | None = None) -> "StepConfig":
        return cls(lr=cfg.lr if lr is None else lr, iteration=iteration, total_iterations=total_iterations,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def cosine_lr(base_lr: float, iteration: int, total_iterations: int) -> float:
    """base_lr * (1 + cos(pi * i / N)) / 2, reaching 0 at i = N."""
    if total_iterations <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * iteration / total_iterations))


def _check_same_shapes(a: ModelParams, b: ModelParams) -> None:
    for name, arr in a.arrays().items():
        if arr.shape != b.arrays()[name].shape:
            raise ShapeMismatchError(f"{name}: {arr.shape} vs {b.arrays()[name].shape}")


def adam_step(params: ModelParams, grads: ModelParams, moments: AdamMoments,
              cfg: StepConfig) -> tuple[ModelParams, AdamMoments]:
    """One bias-corrected Adam update at the scheduled learning rate.

    Args:
        params: Current weights.
        grads: Gradient container of the same layout (see ModelParams.gradient).
        moments: First and second moments plus the global step count.
        cfg: Schedule position and Adam constants.

    Returns:
        (new params, new moments); the step count advances by one.

    Raises:
        NonFiniteGradientError: A gradient tensor holds NaN or inf. Nothing
            is updated in that case.
    """
    _check_same_shapes(params, grads)
    for name, g in grads.arrays().items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")

    t = moments.step + 1
    lr = cosine_lr(cfg.lr, cfg.iteration, cfg.total_iterations)
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t

    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.arrays().items():
        g = grads.arrays()[name]
        m = cfg.beta1 * moments.m.arrays()[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * moments.v.arrays()[name] + (1.0 - cfg.beta2) * g * g
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[name] = m
        new_v[name] = v

    return params.replace(**new_p), AdamMoments(params.replace(**new_m), params.replace(**new_v), t)


def ema_update_params(teacher: ModelParams, student: ModelParams, tau: float) -> ModelParams:
    """tau * teacher + (1 - tau) * student, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    _check_same_shapes(teacher, student)
    s = student.arrays()
    return teacher.replace(**{
        name: tau * t + (1.0 - tau) * s[name] for name, t in teacher.arrays().items()
    })
