"""The finite-difference harness itself, exercised on known-good stacks."""

import numpy as np

from prunekit.nn import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Tensor,
    flatten,
    global_avg_pool,
    gradient_check,
    relu,
    softmax_cross_entropy,
)


def test_linear_softmax_stack_tight():
    rng = np.random.default_rng(0)
    lin = Linear(6, 3, rng=rng)
    x = Tensor(rng.normal(size=(4, 6)))
    labels = np.array([0, 1, 2, 1])

    def loss():
        return softmax_cross_entropy(lin.forward(x), labels)

    assert gradient_check(loss, lin.parameters(), eps=1e-5) <= 1e-6


def test_conv_bn_relu_stack():
    rng = np.random.default_rng(1)
    conv = Conv2d(2, 3, 3, padding=1, rng=rng)
    bn = BatchNorm2d(3)
    # push BN outputs away from the ReLU kink so finite differences stay smooth
    bn.beta.data[:] = 5.0
    head = Linear(3, 2, rng=rng)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    labels = np.array([0, 1, 0])

    def loss():
        h = relu(bn.forward(conv.forward(x)))
        return softmax_cross_entropy(head.forward(global_avg_pool(h)), labels)

    params = conv.parameters() + bn.parameters() + head.parameters()
    pre = relu(bn.forward(conv.forward(x)))
    assert pre.data.min() > 1.0  # construction really avoided the kink
    assert gradient_check(loss, params, eps=1e-5) <= 1e-4


def test_gradcheck_is_deterministic():
    rng = np.random.default_rng(2)
    lin = Linear(5, 2, rng=rng)
    x = Tensor(rng.normal(size=(2, 5)))
    labels = np.array([0, 1])

    def loss():
        return softmax_cross_entropy(relu(lin.forward(x)), labels)

    e1 = gradient_check(loss, lin.parameters())
    e2 = gradient_check(loss, lin.parameters())
    assert e1 == e2


def test_gradcheck_catches_a_wrong_gradient():
    """Sanity: a deliberately corrupted backward must be flagged."""
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(3,)), requires_grad=True)
    x = rng.normal(size=(3,))

    def bad_loss():
        out = Tensor(
            np.array((w.data * x).sum()),
            requires_grad=True,
            parents=(w,),
            backward=lambda gy: w.accumulate_grad(2.0 * x * gy),  # off by 2x
        )
        return out

    assert gradient_check(bad_loss, [w]) > 0.3


def test_flatten_path():
    rng = np.random.default_rng(4)
    conv = Conv2d(1, 2, 3, rng=rng)
    head = Linear(2 * 2 * 2, 2, rng=rng)
    x = Tensor(rng.normal(size=(2, 1, 4, 4)))
    labels = np.array([1, 0])

    def loss():
        return softmax_cross_entropy(head.forward(flatten(conv.forward(x))), labels)

    assert gradient_check(loss, conv.parameters() + head.parameters()) <= 1e-5
