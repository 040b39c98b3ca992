"""Tests for the self-training losses, including finite-difference gradient checks."""

import numpy as np
import pytest

from hiast.models import IGNORE, FeatureMap, LabelMap, ProbMap, log_softmax, softmax
from hiast.schemas import AblationSwitches, LossWeights, ModelConfig
from hiast.services.augment import apply_geometry, augment_weak, strong_view
from hiast.services.losses import (
    effective_weights,
    loss_ce_confident,
    loss_consistency_ignored,
    loss_entropy_ignored,
    loss_kld_confident,
    region_masks,
    supervised_loss,
    total_loss,
)
from hiast.services.network import forward_logits, init_params

H = 1e-6
SEEDS = range(20)


def pm1(row) -> ProbMap:
    return ProbMap(np.asarray(row, dtype=np.float64).reshape(1, 1, -1))


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def logit_gradient_check(term_fn, logits: np.ndarray) -> float:
    """Relative error between a term's logit gradient and central differences."""
    analytic = term_fn(ProbMap(softmax(logits))).grad_logits
    numeric = np.zeros_like(logits)
    it = np.nditer(logits, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += H
        minus[idx] -= H
        numeric[idx] = (term_fn(ProbMap(softmax(plus))).value - term_fn(ProbMap(softmax(minus))).value) / (2 * H)
    return rel_error(analytic, numeric)


def mixed_labels(rng, h=4, w=4, c=3) -> LabelMap:
    y = rng.integers(0, c, size=(h, w)).astype(np.uint8)
    y[rng.random((h, w)) < 0.4] = IGNORE
    y[0, 0], y[0, 1] = 0, IGNORE  # both regions non-empty
    return LabelMap(y)


class TestRegionMasks:
    """Confident/ignored split."""

    def test_all_ignore(self):
        """All-IGNORE: no confident pixels."""
        m = region_masks(LabelMap(np.full((2, 2), IGNORE, np.uint8)))
        assert not m.confident.any() and m.ignored.all()

    def test_no_ignore(self):
        """No IGNORE: fully confident."""
        assert region_masks(LabelMap(np.zeros((2, 2), np.uint8))).confident.all()

    def test_mixed(self):
        """[0, I, 1, I] is confident at (0,0) and (1,0)."""
        m = region_masks(LabelMap(np.array([[0, IGNORE], [1, IGNORE]], np.uint8)))
        np.testing.assert_array_equal(m.confident, [[True, False], [True, False]])


class TestLossValues:
    """Hand-computed values."""

    def test_ce_certain_is_zero(self):
        """p(y)=1 on every confident pixel gives 0."""
        y = LabelMap(np.array([[1]], np.uint8))
        assert loss_ce_confident(pm1([0.0, 1.0]), y, region_masks(y)).value == pytest.approx(0.0)

    def test_ce_half(self):
        """p=(0.5, 0.5), y=0 -> ln 2."""
        y = LabelMap(np.array([[0]], np.uint8))
        assert loss_ce_confident(pm1([0.5, 0.5]), y, region_masks(y)).value == pytest.approx(0.693147, abs=1e-6)

    def test_ce_empty_region(self):
        """No confident pixels: loss 0, zero gradient."""
        y = LabelMap(np.array([[IGNORE]], np.uint8))
        term = loss_ce_confident(pm1([0.3, 0.7]), y, region_masks(y))
        assert term.value == 0.0
        assert not term.grad_logits.any()

    def test_kld_uniform_is_log_c(self):
        """Uniform p gives log C."""
        masks = region_masks(LabelMap(np.zeros((1, 1), np.uint8)))
        assert loss_kld_confident(pm1([0.25] * 4), masks).value == pytest.approx(np.log(4))

    def test_kld_value(self):
        """(0.8, 0.2) -> -(0.5 ln 0.8 + 0.5 ln 0.2)."""
        masks = region_masks(LabelMap(np.zeros((1, 1), np.uint8)))
        assert loss_kld_confident(pm1([0.8, 0.2]), masks).value == pytest.approx(0.916291, abs=1e-6)

    def test_kld_empty_region(self):
        """No confident pixels: 0."""
        masks = region_masks(LabelMap(np.full((1, 1), IGNORE, np.uint8)))
        assert loss_kld_confident(pm1([0.8, 0.2]), masks).value == 0.0

    def test_entropy_values(self):
        """One-hot -> 0, uniform -> log C, (0.8, 0.2) -> 0.500402."""
        masks = region_masks(LabelMap(np.full((1, 1), IGNORE, np.uint8)))
        assert loss_entropy_ignored(pm1([1.0, 0.0]), masks).value == pytest.approx(0.0)
        assert loss_entropy_ignored(pm1([1 / 3] * 3), masks).value == pytest.approx(np.log(3))
        assert loss_entropy_ignored(pm1([0.8, 0.2]), masks).value == pytest.approx(0.500402, abs=1e-6)

    def test_consistency_values(self):
        """Uniform pair -> log C; one-hot teacher -> hard CE; (0.9,0.1) vs (0.6,0.4) -> 0.551372."""
        masks = region_masks(LabelMap(np.full((1, 1), IGNORE, np.uint8)))
        assert loss_consistency_ignored(pm1([0.5, 0.5]), pm1([0.5, 0.5]), masks).value == pytest.approx(np.log(2))
        assert loss_consistency_ignored(pm1([0.3, 0.7]), pm1([0.0, 1.0]), masks).value == pytest.approx(-np.log(0.7))
        value = loss_consistency_ignored(pm1([0.6, 0.4]), pm1([0.9, 0.1]), masks).value
        assert value == pytest.approx(-(0.9 * np.log(0.6) + 0.1 * np.log(0.4)), abs=1e-12)
        assert value == pytest.approx(0.551372, abs=1e-6)


class TestLogitGradients:
    """Each term's analytic logit gradient against central differences."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_ce(self, seed):
        """Cross-entropy on the confident region."""
        rng = np.random.default_rng(seed)
        y = mixed_labels(rng)
        masks = region_masks(y)
        assert logit_gradient_check(lambda p: loss_ce_confident(p, y, masks), rng.normal(size=(4, 4, 3))) < 1e-5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_kld(self, seed):
        """KLD to uniform on the confident region."""
        rng = np.random.default_rng(seed)
        masks = region_masks(mixed_labels(rng))
        assert logit_gradient_check(lambda p: loss_kld_confident(p, masks), rng.normal(size=(4, 4, 3))) < 1e-5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_entropy(self, seed):
        """Entropy on the ignored region."""
        rng = np.random.default_rng(seed)
        masks = region_masks(mixed_labels(rng))
        assert logit_gradient_check(lambda p: loss_entropy_ignored(p, masks), rng.normal(size=(4, 4, 3))) < 1e-5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_consistency(self, seed):
        """Soft CE from a fixed teacher on the ignored region."""
        rng = np.random.default_rng(seed)
        masks = region_masks(mixed_labels(rng))
        teacher = ProbMap(softmax(rng.normal(size=(4, 4, 3))))
        assert logit_gradient_check(
            lambda p: loss_consistency_ignored(p, teacher, masks), rng.normal(size=(4, 4, 3))
        ) < 1e-5


class TestTotalLoss:
    """Batch objective."""

    def _setup(self, seed):
        rng = np.random.default_rng(seed)
        student = init_params(3, 3, ModelConfig(hidden=4), seed=seed)
        teacher = init_params(3, 3, ModelConfig(hidden=4), seed=seed + 100)
        batch = [FeatureMap(rng.normal(size=(4, 4, 3))) for _ in range(2)]
        labels = [mixed_labels(rng) for _ in range(2)]
        return student, teacher, batch, labels

    @pytest.mark.parametrize("seed", SEEDS)
    def test_parameter_gradient(self, seed):
        """Analytic parameter gradient of the full objective matches central differences."""
        student, teacher, batch, labels = self._setup(seed)
        weights = LossWeights()
        report = total_loss(student, teacher, batch, labels, weights, aug_seed=seed)
        base = student.flat()
        numeric = np.zeros_like(base)
        for i in range(base.size):
            e = np.zeros_like(base)
            e[i] = H
            plus = total_loss(student.from_flat(base + e), teacher, batch, labels, weights, aug_seed=seed).total
            minus = total_loss(student.from_flat(base - e), teacher, batch, labels, weights, aug_seed=seed).total
            numeric[i] = (plus - minus) / (2 * H)
        assert rel_error(report.grads.flat(), numeric) < 1e-5

    def test_student_reads_the_strong_view(self):
        """CE, entropy and consistency rebuild from the student's strong view and the teacher's weak view."""
        student, teacher, batch, labels = self._setup(5)
        report = total_loss(student, teacher, batch, labels, LossWeights(), aug_seed=11)

        strong, weak, ys, kept = [], [], [], []
        for x, y, child in zip(batch, labels, np.random.SeedSequence(11).spawn(len(batch))):
            rng = np.random.default_rng(child)
            xw, geom = augment_weak(x, rng)
            view = strong_view(xw, rng)
            strong.append(view.features.values)
            weak.append(xw.values)
            ys.append(apply_geometry(y.labels, geom))
            kept.append(~view.erased)
        lab = np.stack(ys).ravel()
        keep = np.stack(kept).ravel()
        conf = (lab != IGNORE) & keep
        ign = (lab == IGNORE) & keep
        logp = log_softmax(forward_logits(student, np.stack(strong)).logits)
        q = softmax(forward_logits(teacher, np.stack(weak)).logits)

        assert report.ce == pytest.approx(-logp[conf, lab[conf].astype(int)].mean(), rel=1e-10)
        assert report.entropy == pytest.approx(-(np.exp(logp[ign]) * logp[ign]).sum(axis=1).mean(), rel=1e-10)
        assert report.consistency == pytest.approx(-(q[ign] * logp[ign]).sum(axis=1).mean(), rel=1e-10)

    def test_zero_weights_leave_ce(self):
        """All lambda = 0: total is the CE term alone."""
        student, teacher, batch, labels = self._setup(0)
        report = total_loss(student, teacher, batch, labels, LossWeights(lambda_i=0, lambda_c=0, lambda_cst=0), 7)
        assert report.total == report.ce
        assert report.kld == report.entropy == report.consistency == 0.0

    def test_weights_identity(self):
        """total = ce + source_ce + lc*kld + li*ent + lcst*cst from the report fields."""
        student, teacher, batch, labels = self._setup(1)
        w = LossWeights(lambda_i=0.7, lambda_c=0.2, lambda_cst=1.3)
        r = total_loss(student, teacher, batch, labels, w, aug_seed=3,
                       source_batch=[(batch[0], LabelMap(np.zeros((4, 4), np.uint8)))])
        assert r.source_ce > 0.0
        expected = r.ce + r.source_ce + w.lambda_c * r.kld + w.lambda_i * r.entropy + w.lambda_cst * r.consistency
        assert r.total == pytest.approx(expected, rel=1e-12)

    def test_deterministic_in_seed(self):
        """Same aug_seed, same report."""
        student, teacher, batch, labels = self._setup(2)
        a = total_loss(student, teacher, batch, labels, LossWeights(), aug_seed=[0, 1, 2])
        b = total_loss(student, teacher, batch, labels, LossWeights(), aug_seed=[0, 1, 2])
        assert a.total == b.total
        assert a.grads.equals(b.grads)

    def test_empty_batch(self):
        """A batch needs at least one image."""
        student, teacher, _, _ = self._setup(0)
        with pytest.raises(ValueError):
            total_loss(student, teacher, [], [], LossWeights(), 0)

    def test_supervised_loss_gradient(self):
        """Warm-up CE gradient matches central differences."""
        student, _, batch, _ = self._setup(4)
        rng = np.random.default_rng(4)
        labels = [LabelMap(rng.integers(0, 3, size=(4, 4)).astype(np.uint8)) for _ in batch]
        report = supervised_loss(student, batch, labels, aug_seed=5)
        base = student.flat()
        numeric = np.zeros_like(base)
        for i in range(base.size):
            e = np.zeros_like(base)
            e[i] = H
            numeric[i] = (supervised_loss(student.from_flat(base + e), batch, labels, 5).total
                          - supervised_loss(student.from_flat(base - e), batch, labels, 5).total) / (2 * H)
        assert rel_error(report.grads.flat(), numeric) < 1e-5


class TestEffectiveWeights:
    """Ablation switches zero their weights."""

    def test_switches_zero_weights(self):
        """r_i, r_c and r_cst off zero lambda_i, lambda_c and lambda_cst."""
        w = effective_weights(LossWeights(), AblationSwitches(r_i=False, r_c=True, r_cst=False))
        assert (w.lambda_i, w.lambda_c, w.lambda_cst) == (0.0, 0.1, 0.0)

    def test_no_switches(self):
        """Without switches the weights pass through."""
        assert effective_weights(LossWeights(), None) == LossWeights()


class TestLossBounds:
    """Range of each term on random maps."""

    @pytest.mark.parametrize("seed", range(5))
    def test_bounds(self, seed):
        """0 <= entropy <= log C, KLD >= log C, consistency >= teacher entropy."""
        rng = np.random.default_rng(seed)
        c = 3
        student = ProbMap(softmax(rng.normal(0, 2, size=(4, 4, c))))
        teacher = ProbMap(softmax(rng.normal(0, 2, size=(4, 4, c))))
        conf = region_masks(LabelMap(np.zeros((4, 4), np.uint8)))
        ign = region_masks(LabelMap(np.full((4, 4), IGNORE, np.uint8)))
        ent = loss_entropy_ignored(student, ign).value
        assert 0.0 <= ent <= np.log(c) + 1e-12
        assert loss_kld_confident(student, conf).value >= np.log(c) - 1e-12
        assert loss_consistency_ignored(student, teacher, ign).value >= \
            loss_entropy_ignored(teacher, ign).value - 1e-12

    def test_consistency_equals_entropy_when_aligned(self, rng):
        """Identical student and teacher: soft CE is the entropy."""
        p = ProbMap(softmax(rng.normal(size=(3, 3, 4))))
        ign = region_masks(LabelMap(np.full((3, 3), IGNORE, np.uint8)))
        assert loss_consistency_ignored(p, p, ign).value == pytest.approx(loss_entropy_ignored(p, ign).value)


class TestDescent:
    """A small step along the negative gradient lowers the objective."""

    @pytest.mark.parametrize("seed", range(10))
    def test_small_step_does_not_increase_loss(self, seed):
        """Step 1e-4 against the analytic gradient on a fixed batch."""
        rng = np.random.default_rng(seed)
        student = init_params(3, 3, ModelConfig(hidden=4), seed=seed)
        teacher = init_params(3, 3, ModelConfig(hidden=4), seed=seed + 50)
        batch = [FeatureMap(rng.normal(size=(4, 4, 3))) for _ in range(2)]
        labels = [mixed_labels(rng) for _ in range(2)]
        before = total_loss(student, teacher, batch, labels, LossWeights(), aug_seed=seed)
        stepped = student.from_flat(student.flat() - 1e-4 * before.grads.flat())
        after = total_loss(stepped, teacher, batch, labels, LossWeights(), aug_seed=seed)
        assert after.total <= before.total
