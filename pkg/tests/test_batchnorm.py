"""Batch-norm forward/backward, including the zero-channel gradient blow-up."""

import numpy as np
import pytest

from prunekit.errors import ShapeError
from prunekit.nn import Tensor, batch_norm2d

from oracles import batchnorm_forward_ref

EPS = 1e-5


def run_bn(x, gamma, beta, training=True, eps=EPS, momentum=0.1, rm=None, rv=None):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    xt = Tensor(x, requires_grad=True)
    gt = Tensor(gamma, requires_grad=True)
    bt = Tensor(beta, requires_grad=True)
    out = batch_norm2d(xt, gt, bt, rm, rv, eps=eps, momentum=momentum, training=training)
    return out, xt, gt, bt, rm, rv


class TestForward:
    def test_matches_reference(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        out, *_ = run_bn(x, gamma, beta)
        want, _, _ = batchnorm_forward_ref(x, gamma, beta, EPS)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_balanced_pm_one_channel(self):
        """Inputs {-1,+1} with gamma=2, beta=3 map to {1, 5} as eps -> 0."""
        x = np.zeros((2, 1, 2, 2))
        x[0] = -1.0
        x[1] = +1.0
        out, *_ = run_bn(x, np.array([2.0]), np.array([3.0]), eps=1e-12)
        np.testing.assert_allclose(np.unique(np.round(out.data, 6)), [1.0, 5.0])

    def test_training_output_is_standardised(self, rng):
        x = rng.normal(5.0, 4.0, size=(8, 4, 6, 6))
        gamma = rng.uniform(0.5, 2.0, size=4)
        beta = rng.normal(size=4)
        out, *_ = run_bn(x, gamma, beta)
        m = out.data.mean(axis=(0, 2, 3))
        v = out.data.var(axis=(0, 2, 3))
        assert np.all(np.abs(m - beta) <= 1e-9 * (np.abs(beta) + 1))
        # variance is gamma^2 up to the eps correction
        batch_var = x.var(axis=(0, 2, 3))
        want_v = gamma**2 * batch_var / (batch_var + EPS)
        np.testing.assert_allclose(v, want_v, rtol=1e-9)

    def test_inference_identity_stats(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out, *_ = run_bn(x, np.ones(3), np.zeros(3), training=False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + EPS), atol=1e-12)

    def test_running_stats_update(self, rng):
        x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        _ = run_bn(x, np.ones(2), np.zeros(2), momentum=0.1, rm=rm, rv=rv)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)

    def test_bad_param_shape(self):
        with pytest.raises(ShapeError):
            run_bn(np.zeros((2, 3, 4, 4)), np.ones(2), np.zeros(3))


class TestBackward:
    def test_gradients_match_finite_differences(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.uniform(0.5, 1.5, size=2)
        beta = rng.normal(size=2)
        gy = rng.normal(size=(3, 2, 4, 4))

        out, xt, gt, bt, _, _ = run_bn(x, gamma, beta)
        out.backward(gy)

        def loss(xv, gv, bv):
            o, _, _ = batchnorm_forward_ref(xv, gv, bv, EPS)
            return float((o * gy).sum())

        eps = 1e-6
        for arr, grad in ((x, xt.grad), (gamma, gt.grad), (beta, bt.grad)):
            flat = arr.ravel()
            gflat = grad.ravel()
            idx = rng.choice(flat.size, size=min(10, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = loss(x, gamma, beta)
                flat[i] = orig - eps
                down = loss(x, gamma, beta)
                flat[i] = orig
                np.testing.assert_allclose(gflat[i], (up - down) / (2 * eps), rtol=1e-5, atol=1e-7)

    def test_zero_channel_gradient_blow_up(self, rng):
        """An all-zero channel's input gradient dwarfs a unit-variance channel's.

        With batch statistics mean 0 and variance 0 the normaliser degenerates
        to 1/sqrt(eps), so under the same upstream gradient the zero channel's
        data gradient must exceed the healthy channel's by about
        sqrt((1 + eps) / eps).
        """
        n, h, w = 4, 5, 5
        x = np.zeros((n, 2, h, w))
        ref = rng.normal(size=(n, h, w))
        ref = (ref - ref.mean()) / ref.std()  # exactly unit variance
        x[:, 1] = ref
        gy_pattern = rng.normal(size=(n, h, w))
        gy = np.stack([gy_pattern, gy_pattern], axis=1)

        out, xt, _, _, _, _ = run_bn(x, np.ones(2), np.zeros(2))
        out.backward(gy)

        zero_mag = np.abs(xt.grad[:, 0]).max()
        ref_mag = np.abs(xt.grad[:, 1]).max()
        factor = np.sqrt((1 + EPS) / EPS)
        assert zero_mag >= 0.5 * factor * ref_mag
        assert zero_mag >= 100.0 * ref_mag

    def test_inference_backward_is_plain_scaling(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        gy = rng.normal(size=(2, 2, 3, 3))
        gamma = np.array([2.0, 0.5])
        out, xt, _, _, _, _ = run_bn(x, gamma, np.zeros(2), training=False)
        out.backward(gy)
        want = gy * gamma[None, :, None, None] / np.sqrt(1 + EPS)
        np.testing.assert_allclose(xt.grad, want, atol=1e-12)
