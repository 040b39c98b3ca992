"""Shared fixtures for the hiast test suite."""

import os

import numpy as np
import pytest

# Keep ambient settings deterministic regardless of the developer's .env
os.environ["HIAST_LOG_LEVEL"] = "INFO"
os.environ["HIAST_DEFAULT_SEED"] = "0"

from hiast.models import FeatureMap, LabelMap, ProbMap, softmax
from hiast.schemas import ExperimentConfig, ModelConfig, SynthConfig
from hiast.services.network import init_params


def random_probmap(rng: np.random.Generator, h: int = 4, w: int = 4, c: int = 3, scale: float = 3.0) -> ProbMap:
    """Softmax of Gaussian logits: every pixel a valid distribution."""
    return ProbMap(softmax(rng.normal(0.0, scale, size=(h * w, c))).reshape(h, w, c))


def probmap_from_rows(rows) -> ProbMap:
    """(N, C) probabilities laid out as a 1 x N map."""
    arr = np.asarray(rows, dtype=np.float64)
    return ProbMap(arr.reshape(1, arr.shape[0], arr.shape[1]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth() -> SynthConfig:
    """4 classes, 6 images per domain of 8x8: fast enough for every test."""
    return SynthConfig(num_classes=4, channels=3, height=8, width=8, images_per_domain=6, block_size=2, seed=0)


@pytest.fixture
def tiny_config(tiny_synth) -> ExperimentConfig:
    return ExperimentConfig(
        synth=tiny_synth,
        rounds=2,
        iterations_per_round=6,
        warmup_iterations=12,
        batch_size=3,
        model=ModelConfig(hidden=4),
        seed=0,
    )


@pytest.fixture
def tiny_params():
    return init_params(3, 4, ModelConfig(hidden=4), seed=0)


@pytest.fixture
def feature_batch(rng):
    """Two 4x4x3 feature maps with labels (one IGNORE-heavy)."""
    xs = [FeatureMap(rng.normal(size=(4, 4, 3))) for _ in range(2)]
    y0 = rng.integers(0, 4, size=(4, 4)).astype(np.uint8)
    y1 = np.full((4, 4), 255, dtype=np.uint8)
    y1[:2, :2] = rng.integers(0, 4, size=(2, 2))
    return xs, [LabelMap(y0), LabelMap(y1)]
