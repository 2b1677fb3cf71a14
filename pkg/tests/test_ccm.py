import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rccmnet.ccm import batch_weights, class_prediction, sample_weight

D = torch.float64


def t(*v):
    return torch.tensor(v, dtype=D)


class TestSampleWeight:
    def test_perfect_prediction(self):
        g = torch.softmax(t(40.0, 0.0, 0.0), dim=0)
        assert abs(sample_weight(t(1, 0, 0), g).item()) <= 1e-6

    def test_exact_one_hot_prediction_clamped(self):
        assert sample_weight(t(0, 1, 0), t(0, 1, 0)).item() == 0.0
        # confident and wrong: clamped at 1e-7 instead of infinity
        assert sample_weight(t(1, 0, 0), t(0, 1, 0)).item() == pytest.approx(-math.log(1e-7), rel=1e-12)

    def test_half(self):
        assert sample_weight(t(1, 0, 0), t(0.5, 0.25, 0.25)).item() == pytest.approx(math.log(2), abs=1e-15)
        assert sample_weight(t(1, 0, 0), t(0.5, 0.25, 0.25)).item() == pytest.approx(0.6931, abs=5e-5)

    def test_uniform(self):
        g = t(1 / 3, 1 / 3, 1 / 3)
        assert sample_weight(t(1, 0, 0), g).item() == pytest.approx(math.log(3), abs=1e-15)
        assert sample_weight(t(1, 0, 0), g).item() == pytest.approx(1.0986, abs=5e-5)

    def test_int_labels_equal_one_hot(self):
        g = torch.softmax(torch.randn(5, 3, dtype=D), dim=1)
        labels = torch.tensor([0, 2, 1, 1, 0])
        one_hot = torch.nn.functional.one_hot(labels, 3).to(D)
        assert torch.equal(sample_weight(labels, g), sample_weight(one_hot, g))

    def test_identity_on_random_g(self):
        rng = np.random.default_rng(0)
        g = torch.from_numpy(rng.dirichlet(np.ones(3), size=1000))
        c = torch.from_numpy(rng.integers(0, 3, size=1000))
        w = sample_weight(c, g)
        oracle = -np.log(np.maximum(g.numpy()[np.arange(1000), c.numpy()], 1e-7))
        assert np.abs(w.numpy() - oracle).max() <= 1e-12

    def test_full_kl_oracle(self):
        # direct sum_j y_j log(y_j / g_j) over non-zero y_j
        g = t(0.2, 0.3, 0.5)
        y = t(0, 0, 1)
        oracle = sum(yj * math.log(yj / gj) for yj, gj in zip(y.tolist(), g.tolist()) if yj > 0)
        assert sample_weight(y, g).item() == pytest.approx(oracle, abs=1e-15)

    @pytest.mark.parametrize("y", [(1, 1, 0), (0.5, 0.5, 0), (0, 0, 0), (2, 0, 0)])
    def test_not_one_hot(self, y):
        with pytest.raises(ValueError, match="one-hot"):
            sample_weight(t(*y), t(0.2, 0.3, 0.5))

    def test_not_normalised(self):
        with pytest.raises(ValueError, match="normalised"):
            sample_weight(t(1, 0, 0), t(0.2, 0.3, 0.6))
        # within tolerance is accepted
        sample_weight(t(1, 0, 0), t(0.2, 0.3, 0.50005))

    def test_non_negative_and_finite(self):
        rng = np.random.default_rng(1)
        g = torch.from_numpy(rng.dirichlet(np.full(3, 0.05), size=2000))
        c = torch.from_numpy(rng.integers(0, 3, size=2000))
        w = sample_weight(c, g)
        assert torch.isfinite(w).all() and (w >= 0).all()

    def test_strictly_decreasing_in_true_class_probability(self):
        gc = np.linspace(0.01, 0.99, 99)
        g = torch.from_numpy(np.stack([gc, (1 - gc) / 2, (1 - gc) / 2], axis=1))
        w = sample_weight(torch.zeros(99, dtype=torch.long), g).numpy()
        assert (np.diff(w) < 0).all()
        near_one = torch.softmax(t(30.0, 0.0, 0.0), dim=0)
        assert sample_weight(t(1, 0, 0), near_one).item() < 1e-12


class TestBatchWeights:
    def test_perfect_predictions(self):
        g = torch.softmax(torch.eye(3, dtype=D) * 40, dim=1)
        labels = torch.arange(3)
        assert torch.all(batch_weights(labels, g).abs() <= 1e-6)
        assert torch.allclose(batch_weights(labels, g, "exp_neg"), torch.ones(3, dtype=D), atol=1e-6)

    def test_exp_neg_half(self):
        w = batch_weights(torch.tensor([1]), t(0.25, 0.5, 0.25).unsqueeze(0), "exp_neg")
        assert w.item() == pytest.approx(0.5, abs=1e-15)

    def test_exp_neg_equals_true_class_probability(self):
        g = torch.softmax(torch.randn(50, 3, dtype=D), dim=1)
        c = torch.randint(0, 3, (50,))
        assert torch.allclose(batch_weights(c, g, "exp_neg"), g[torch.arange(50), c], atol=1e-12)

    def test_identity_decreasing_across_mixed_batch(self):
        gc = torch.linspace(0.05, 0.95, 10, dtype=D)
        g = torch.stack([(1 - gc) / 2, gc, (1 - gc) / 2], dim=1)
        w = batch_weights(torch.ones(10, dtype=torch.long), g)
        assert (w[1:] < w[:-1]).all()

    def test_ranges(self):
        g = torch.softmax(torch.randn(200, 3, dtype=D) * 4, dim=1)
        c = torch.randint(0, 3, (200,))
        assert (batch_weights(c, g) >= 0).all()
        e = batch_weights(c, g, "exp_neg")
        assert (e > 0).all() and (e <= 1).all()

    def test_normalize_mean_one(self):
        g = torch.softmax(torch.randn(8, 3, dtype=D), dim=1)
        c = torch.randint(0, 3, (8,))
        raw = batch_weights(c, g)
        norm = batch_weights(c, g, normalize_mean_one=True)
        assert norm.mean().item() == pytest.approx(1.0, abs=1e-12)
        assert torch.allclose(norm * raw.mean(), raw, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            batch_weights(torch.tensor([0, 1]), torch.full((3, 3), 1 / 3, dtype=D))

    def test_bad_transform(self):
        with pytest.raises(ValueError):
            batch_weights(torch.tensor([0]), torch.full((1, 3), 1 / 3, dtype=D), "square")

    def test_detached(self):
        logits = torch.randn(4, 3, dtype=D, requires_grad=True)
        w = batch_weights(torch.tensor([0, 1, 2, 0]), class_prediction(logits))
        assert not w.requires_grad
        seg_loss = torch.randn(4, dtype=D, requires_grad=True)
        (w * seg_loss).sum().backward()
        assert logits.grad is None

    def test_zero_gradient_through_weight_path(self):
        # numerical: changing classifier logits moves omega, but the
        # autograd derivative of omega * L_seg w.r.t. those logits is zero
        logits = torch.randn(3, 3, dtype=D, requires_grad=True)
        labels = torch.tensor([0, 1, 2])
        seg = torch.tensor([0.7, 1.1, 0.3], dtype=D)
        out = (batch_weights(labels, class_prediction(logits)) * seg).sum()
        assert not out.requires_grad
        shifted = logits.detach().clone()
        shifted[0, 0] += 0.5
        assert not torch.equal(
            batch_weights(labels, class_prediction(shifted)), batch_weights(labels, class_prediction(logits))
        )


@settings(max_examples=200, deadline=None)
@given(
    probs=st.lists(st.floats(0.001, 1.0), min_size=3, max_size=3),
    c=st.integers(0, 2),
)
def test_identity_property(probs, c):
    g = torch.tensor(probs, dtype=D)
    g = g / g.sum()
    assert sample_weight(torch.tensor(c), g).item() == pytest.approx(-math.log(g[c].item()), abs=1e-12)
