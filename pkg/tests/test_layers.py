"""ReLU, linear, pooling, residual add, loss, and the layer containers."""

import numpy as np
import pytest

from prunekit.errors import NumericalError, ShapeError
from prunekit.nn import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Tensor,
    accuracy,
    add,
    flatten,
    global_avg_pool,
    linear,
    no_grad,
    relu,
    softmax_cross_entropy,
)


class TestRelu:
    def test_forward(self):
        x = Tensor(np.array([[-2.0, 0.0, 3.0]]))
        np.testing.assert_array_equal(relu(x).data, [[0.0, 0.0, 3.0]])

    def test_subgradient_at_zero_is_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        out = relu(x)
        out.backward(np.ones(3))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


class TestLinear:
    def test_forward_backward(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        out = linear(x, w, b)
        np.testing.assert_allclose(out.data, x.data @ w.data.T + b.data, atol=1e-12)
        gy = rng.normal(size=(4, 2))
        out.backward(gy)
        np.testing.assert_allclose(w.grad, gy.T @ x.data, atol=1e-12)
        np.testing.assert_allclose(b.grad, gy.sum(axis=0), atol=1e-12)
        np.testing.assert_allclose(x.grad, gy @ w.data, atol=1e-12)

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestPoolAndShape:
    def test_global_avg_pool(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        out = global_avg_pool(x)
        np.testing.assert_allclose(out.data, x.data.mean(axis=(2, 3)), atol=1e-12)
        out.backward(np.ones((2, 3)))
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20), atol=1e-12)

    def test_flatten_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        out = flatten(x)
        assert out.data.shape == (2, 12)
        out.backward(np.ones((2, 12)))
        assert x.grad.shape == x.shape

    def test_add_requires_same_shape(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_loss_is_log_k(self):
        logits = Tensor(np.zeros((5, 4)))
        loss = softmax_cross_entropy(logits, np.zeros(5, dtype=int))
        np.testing.assert_allclose(loss.data, np.log(4.0), atol=1e-12)

    def test_gradient_is_probs_minus_onehot(self, rng):
        z = rng.normal(size=(3, 4))
        labels = np.array([0, 2, 3])
        logits = Tensor(z, requires_grad=True)
        loss = softmax_cross_entropy(logits, labels)
        loss.backward()
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(3), labels] -= 1
        np.testing.assert_allclose(logits.grad, probs / 3, atol=1e-12)

    def test_huge_logits_do_not_overflow(self):
        logits = Tensor(np.array([[1e4, 0.0], [0.0, 1e4]]))
        loss = softmax_cross_entropy(logits, np.array([0, 1]))
        assert np.isfinite(loss.data)

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestAccuracy:
    def test_ties_break_to_lower_index(self):
        logits = np.array([[1.0, 1.0], [0.0, 1.0]])
        assert accuracy(logits, np.array([0, 1])) == 1.0
        assert accuracy(logits, np.array([1, 1])) == 0.5


class TestModules:
    def test_conv_module_shapes_and_seeded_init(self):
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        c1 = Conv2d(3, 8, 3, padding=1, rng=rng1)
        c2 = Conv2d(3, 8, 3, padding=1, rng=rng2)
        np.testing.assert_array_equal(c1.weight.data, c2.weight.data)
        out = c1.forward(Tensor(np.zeros((2, 3, 6, 6))))
        assert out.data.shape == (2, 8, 6, 6)

    def test_kaiming_scale(self):
        rng = np.random.default_rng(11)
        conv = Conv2d(16, 64, 3, rng=rng)
        std = conv.weight.data.std()
        want = np.sqrt(2.0 / (16 * 9))
        assert abs(std - want) / want < 0.1

    def test_batchnorm_module_mode_switch(self, rng):
        bn = BatchNorm2d(3)
        x = Tensor(rng.normal(2.0, 1.0, size=(4, 3, 4, 4)))
        bn.train()
        out_train = bn.forward(x)
        bn.eval()
        out_eval = bn.forward(x)
        assert abs(out_train.data.mean()) < 1e-9
        assert abs(out_eval.data.mean()) > 0.1  # running stats barely moved

    def test_named_parameters_are_stable(self):
        lin = Linear(4, 2, rng=np.random.default_rng(0))
        names = [n for n, _ in lin.named_parameters()]
        assert names == ["weight", "bias"]

    def test_no_grad_skips_graph(self):
        lin = Linear(4, 2, rng=np.random.default_rng(0))
        with no_grad():
            out = lin.forward(Tensor(np.ones((1, 4))))
        assert out.requires_grad is False
        assert out._parents == ()
