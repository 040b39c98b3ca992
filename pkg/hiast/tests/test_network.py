"""Tests for the per-pixel MLP and its backward pass."""

import numpy as np
import pytest

from hiast.exceptions import ShapeMismatchError
from hiast.models import FeatureMap, ModelParams, softmax
from hiast.schemas import ModelConfig
from hiast.services.network import backward, forward, forward_logits, init_params, predict_labels


def brute_force_probs(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Scalar-loop evaluation of the network, pixel by pixel."""
    h, w, _ = x.shape
    out = np.zeros((h, w, params.num_classes))
    for i in range(h):
        for j in range(w):
            v = x[i, j].astype(np.float64)
            if params.hidden > 0:
                v = np.tanh(v @ params.w1 + params.b1)
            out[i, j] = softmax(v @ params.w2 + params.b2)
    return out


class TestForward:
    """Forward pass."""

    def test_zero_weights_give_uniform(self):
        """All-zero parameters predict the uniform distribution."""
        params = init_params(3, 5, ModelConfig(hidden=4), seed=0).map(np.zeros_like)
        pm = forward(params, FeatureMap(np.ones((2, 2, 3))))
        np.testing.assert_allclose(pm.probs, 0.2)

    def test_linear_identity_is_softmax_of_features(self):
        """H=0 with identity weights returns softmax of the raw features."""
        params = ModelParams(w1=np.zeros((3, 0)), b1=np.zeros(0), w2=np.eye(3), b2=np.zeros(3))
        x = np.array([[[0.5, -1.0, 2.0]]])
        np.testing.assert_allclose(forward(params, FeatureMap(x)).probs[0, 0], softmax(x[0, 0]))

    def test_matches_brute_force(self, rng):
        """Vectorized forward equals the per-pixel loop on random 3x3 inputs."""
        params = init_params(3, 4, ModelConfig(hidden=5), seed=3)
        x = rng.normal(size=(3, 3, 3))
        np.testing.assert_allclose(forward(params, FeatureMap(x)).probs, brute_force_probs(params, x), atol=1e-12)

    def test_predict_labels_is_argmax(self, rng, tiny_params):
        """Hard predictions are the per-pixel argmax."""
        x = FeatureMap(rng.normal(size=(4, 4, 3)))
        np.testing.assert_array_equal(predict_labels(tiny_params, x), forward(tiny_params, x).probs.argmax(-1))

    def test_channel_mismatch(self, tiny_params):
        """Inputs with the wrong channel count are refused."""
        with pytest.raises(ShapeMismatchError):
            forward(tiny_params, FeatureMap(np.zeros((2, 2, 5))))


class TestInit:
    """Seeded initialization."""

    def test_deterministic(self):
        """Same seed, same weights."""
        a = init_params(3, 4, ModelConfig(), seed=11)
        b = init_params(3, 4, ModelConfig(), seed=11)
        assert a.equals(b)

    def test_biases_zero(self):
        """Biases start at zero."""
        p = init_params(3, 4, ModelConfig(hidden=6), seed=0)
        assert not p.b1.any() and not p.b2.any()


class TestBackward:
    """Parameter gradients from logit gradients."""

    @pytest.mark.parametrize("hidden,activation", [(0, "tanh"), (5, "tanh"), (5, "relu")])
    def test_linear_functional_gradient(self, rng, hidden, activation):
        """Gradient of sum(G * logits) matches central differences."""
        params = init_params(3, 4, ModelConfig(hidden=hidden, activation=activation), seed=2)
        x = rng.normal(size=(3, 3, 3))
        g = rng.normal(size=(9, 4))
        analytic = backward(params, forward_logits(params, x), g).flat()

        def f(vec):
            return float(np.sum(g * forward_logits(params.from_flat(vec), x).logits))

        base = params.flat()
        numeric = np.zeros_like(base)
        h = 1e-6
        for i in range(base.size):
            e = np.zeros_like(base)
            e[i] = h
            numeric[i] = (f(base + e) - f(base - e)) / (2 * h)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-6
