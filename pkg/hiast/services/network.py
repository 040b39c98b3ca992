"""Per-pixel MLP classifier with a hand-written backward pass.

Pixels are independent: a feature field (H, W, F) is flattened to (N, F),
mapped through F -> H -> C (or F -> C when H = 0) and reshaped back.
All arithmetic runs in float64.
"""

import logging
from dataclasses import dataclass

import numpy as np

from hiast.exceptions import ShapeMismatchError
from hiast.models import FeatureMap, ModelParams, ProbMap, softmax
from hiast.schemas import ModelConfig

logger = logging.getLogger(__name__)


def init_params(in_features: int, num_classes: int, cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    h = cfg.hidden
    if h > 0:
        w1 = rng.normal(0.0, 1.0 / np.sqrt(in_features), size=(in_features, h))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, num_classes))
    else:
        w1 = np.zeros((in_features, 0))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(in_features), size=(in_features, num_classes))
    return ModelParams(w1=w1, b1=np.zeros(h), w2=w2, b2=np.zeros(num_classes), activation=cfg.activation)


@dataclass
class ForwardCache:
    """Intermediates kept for the backward pass."""

    x: np.ndarray        # (N, F)
    hidden: np.ndarray   # (N, H), empty when H = 0
    logits: np.ndarray   # (N, C)


def _as_pixels(features: np.ndarray | FeatureMap, params: ModelParams) -> np.ndarray:
    x = features.values if isinstance(features, FeatureMap) else np.asarray(features)
    if x.shape[-1] != params.in_features:
        raise ShapeMismatchError(f"features have {x.shape[-1]} channels, model expects {params.in_features}")
    return x.reshape(-1, x.shape[-1]).astype(np.float64)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def forward_logits(params: ModelParams, features: np.ndarray | FeatureMap) -> ForwardCache:
    """Logits for every pixel, flattened to (N, C)."""
    x = _as_pixels(features, params)
    if params.hidden > 0:
        a = _activate(x @ params.w1 + params.b1, params.activation)
        logits = a @ params.w2 + params.b2
    else:
        a = np.empty((x.shape[0], 0))
        logits = x @ params.w2 + params.b2
    return ForwardCache(x=x, hidden=a, logits=logits)


def forward(params: ModelParams, features: FeatureMap) -> ProbMap:
    h, w, _ = features.values.shape
    cache = forward_logits(params, features)
    return ProbMap(softmax(cache.logits).reshape(h, w, params.num_classes))


def predict_labels(params: ModelParams, features: FeatureMap) -> np.ndarray:
    h, w, _ = features.values.shape
    return forward_logits(params, features).logits.argmax(axis=-1).reshape(h, w).astype(np.uint8)


def backward(params: ModelParams, cache: ForwardCache, grad_logits: np.ndarray) -> ModelParams:
    """Parameter gradient given dLoss/dlogits of shape (N, C)."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if params.hidden > 0:
        a = cache.hidden
        gw2 = a.T @ g
        gb2 = g.sum(axis=0)
        ga = g @ params.w2.T
        if params.activation == "tanh":
            gz = ga * (1.0 - a * a)
        else:
            gz = ga * (a > 0.0)
        gw1 = cache.x.T @ gz
        gb1 = gz.sum(axis=0)
    else:
        gw2 = cache.x.T @ g
        gb2 = g.sum(axis=0)
        gw1 = np.zeros_like(params.w1)
        gb1 = np.zeros_like(params.b1)
    return params.gradient(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


def add_grads(a: ModelParams, b: ModelParams) -> ModelParams:
    return a.gradient(**{k: v + b.arrays()[k] for k, v in a.arrays().items()})
