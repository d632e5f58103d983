"""Differentiable operations.

Layout convention is NCHW row-major throughout.  Each op validates its
operands, computes the forward result with vectorised numpy, and registers a
closure that routes the output gradient back to every parent that requires
grad.  Only the ops a small conv/BN/ReLU/linear classifier needs exist here;
there is deliberately no general broadcasting machinery.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericalError, ShapeError
from .tensor import Tensor, make_result

__all__ = [
    "conv2d",
    "batch_norm2d",
    "relu",
    "linear",
    "add",
    "global_avg_pool",
    "flatten",
    "softmax_cross_entropy",
    "accuracy",
]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``weight`` (F,C,kh,kw).

    Zero padding, integer stride, no bias (a following batch-norm owns the
    shift).  The forward pass lowers the input to patch matrix form so the
    contraction runs as a single BLAS matmul; the backward pass reuses the
    cached patches for the weight gradient and scatter-adds patch gradients
    back into the (padded) input for the data gradient.

    Raises
    ------
    ShapeError
        On rank/channel mismatches or when the output would be empty.
    NumericalError
        If the input or weight contains non-finite values.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got input {xd.shape} weight {wd.shape}")
    n, c, h, w = xd.shape
    f, cw, kh, kw = wd.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d output would be {out_h}x{out_w} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if not np.isfinite(xd).all() or not np.isfinite(wd).all():
        raise NumericalError("conv2d received non-finite values")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, out_h, out_w, kh, kw) -> (N*out_h*out_w, C*kh*kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    out = (cols @ wd.reshape(f, -1).T).reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2)

    def backward(gy: np.ndarray) -> None:
        g = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * out_h * out_w, f)
        if weight.requires_grad:
            weight.accumulate_grad((g.T @ cols).reshape(f, c, kh, kw))
        if x.requires_grad:
            gcols = (g @ wd.reshape(f, -1)).reshape(n, out_h, out_w, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i + stride * (out_h - 1) + 1
                for j in range(kw):
                    wj = j + stride * (out_w - 1) + 1
                    gxp[:, :, i:hi:stride, j:wj:stride] += gcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate_grad(gxp)

    return make_result(out, (x, weight), backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W) with affine transform.

    Training mode normalises with the biased batch statistics, updates the
    running buffers in place (``new = (1-momentum)*old + momentum*batch``) and
    caches what the backward pass needs.  The backward pass implements the
    full factorisation of the chain rule — the direct term plus the couplings
    through the batch mean and the batch variance — rather than the
    inference-mode shortcut, because the variance coupling is exactly where
    the gradient blows up like ``1/sqrt(eps)`` when a channel's input is
    identically zero.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batch_norm2d expects a 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm2d affine parameters must have shape ({c},), "
            f"got gamma {gamma.data.shape} beta {beta.data.shape}"
        )
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm2d training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # biased estimator
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def backward(gy: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((gy * x_hat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(gy.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g_hat = gy * gamma.data[None, :, None, None]
            if training:
                m = n * h * w
                sum_g = g_hat.sum(axis=(0, 2, 3))
                sum_gx = (g_hat * x_hat).sum(axis=(0, 2, 3))
                # direct term, mean coupling, variance coupling
                gx = (
                    inv_std[None, :, None, None]
                    / m
                    * (m * g_hat - sum_g[None, :, None, None] - x_hat * sum_gx[None, :, None, None])
                )
            else:
                gx = g_hat * inv_std[None, :, None, None]
            x.accumulate_grad(gx)

    return make_result(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(gy: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(gy * mask)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for 2-d inputs (N, in_features)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ShapeError(f"linear expects 2-d operands, got input {xd.shape} weight {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"linear feature mismatch: input has {xd.shape[1]}, weight {wd.shape[1]}")
    out = xd @ wd.T + bias.data[None, :]

    def backward(gy: np.ndarray) -> None:
        if weight.requires_grad:
            weight.accumulate_grad(gy.T @ xd)
        if bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=0))
        if x.requires_grad:
            x.accumulate_grad(gy @ wd)

    return make_result(out, (x, weight, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual connections)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward(gy: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(gy)
        if b.requires_grad:
            b.accumulate_grad(gy)

    return make_result(out, (a, b), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(gy: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(gy[:, :, None, None] / (h * w), (n, c, h, w)).copy())

    return make_result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """Reshape (N, ...) to (N, -1)."""
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)

    def backward(gy: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(gy.reshape(shape))

    return make_result(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    Computed through a shifted log-sum-exp so large logits cannot overflow.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, classes) logits, got {z.shape}")
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    if not np.isfinite(loss):
        raise NumericalError("softmax_cross_entropy produced a non-finite loss")

    def backward(gy: np.ndarray) -> None:
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(probs * (float(gy) / n))

    return make_result(np.asarray(loss), (logits,), backward)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions matching labels (ties -> lowest index)."""
    preds = np.argmax(logits, axis=1)
    return float((preds == np.asarray(labels)).mean())
