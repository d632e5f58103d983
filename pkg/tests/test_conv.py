"""Convolution forward/backward against the nested-loop oracle."""

import numpy as np
import pytest

from prunekit.errors import NumericalError, ShapeError
from prunekit.nn import Tensor, conv2d

from oracles import conv2d_loops


def random_case(rng):
    n = int(rng.integers(1, 4))
    c = int(rng.integers(1, 4))
    f = int(rng.integers(1, 5))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2, 3]))
    padding = int(rng.integers(0, 3))
    h = int(rng.integers(max(1, k - 2 * padding), 8))
    w = int(rng.integers(max(1, k - 2 * padding), 8))
    if (h + 2 * padding - k) < 0:
        h = k
    if (w + 2 * padding - k) < 0:
        w = k
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(f, c, k, k))
    return x, wt, stride, padding


class TestConvForward:
    def test_matches_loop_oracle_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            x, w, stride, padding = random_case(rng)
            got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
            want = conv2d_loops(x, w, stride=stride, padding=padding)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_identity_kernel_passthrough(self):
        """A centred 3x3 delta kernel with padding 1 reproduces the input."""
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 3, 3))
        for i in range(3):
            w[i, i, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_one_by_one_kernel_is_channel_mix(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 6, 6))
        w = rng.normal(size=(5, 4, 1, 1))
        out = conv2d(Tensor(x), Tensor(w)).data
        want = np.einsum("nchw,fc->nfhw", x, w[:, :, 0, 0])
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_zero_weights_zero_output(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        out = conv2d(x, w, padding=1).data
        assert (out == 0.0).all()


class TestConvBackward:
    def test_backward_matches_loop_oracle_perturbation(self):
        """Weight/input grads agree with central differences of the oracle."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        gy_seed = rng.normal(size=(2, 3, 3, 2))

        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = conv2d(xt, wt, stride=2, padding=1)
        out.backward(gy_seed)

        eps = 1e-6
        for tensor, arr in ((wt, w), (xt, x)):
            flat = arr.ravel()
            analytic = tensor.grad.ravel()
            idx = rng.choice(flat.size, size=12, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = (conv2d_loops(x, w, 2, 1) * gy_seed).sum()
                flat[i] = orig - eps
                down = (conv2d_loops(x, w, 2, 1) * gy_seed).sum()
                flat[i] = orig
                np.testing.assert_allclose(analytic[i], (up - down) / (2 * eps), rtol=1e-6, atol=1e-8)

    def test_grad_accumulates_across_uses(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        from prunekit.nn import add

        out = add(conv2d(x, w, padding=1), conv2d(x, w, padding=1))
        out.backward(np.ones_like(out.data))
        single = conv2d(Tensor(x.data), Tensor(w.data, requires_grad=True), padding=1)
        # reusing the same weight twice must double its gradient
        w2 = Tensor(w.data, requires_grad=True)
        out2 = conv2d(Tensor(x.data), w2, padding=1)
        out2.backward(np.ones_like(out2.data))
        np.testing.assert_allclose(w.grad, 2 * w2.grad, atol=1e-12)
        assert single.data.shape == out.data.shape


class TestConvErrors:
    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_empty_output(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_non_finite_input(self):
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))

    def test_bad_rank(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))))
