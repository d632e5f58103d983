"""Thin layer containers over the functional ops.

Modules own parameters and buffers; the functional forms in
:mod:`prunekit.nn.ops` do the actual math.  Initialisation is Kaiming-style
fan-in scaled normal driven by an explicit generator so that models are a
pure function of their seed.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .ops import batch_norm2d, conv2d, linear
from .tensor import Parameter, Tensor

__all__ = ["Module", "Conv2d", "BatchNorm2d", "Linear", "module_state", "load_module_state"]


class Module:
    """Minimal parameter container with train/eval mode and recursive walks."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator["Module"]:
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self.__dict__.items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state (batch-norm running statistics)."""
        for key, value in self.__dict__.items():
            path = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")
            elif isinstance(value, np.ndarray) and key.startswith("running_"):
                yield path, value

    def train(self) -> "Module":
        self.training = True
        for child in self.children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for child in self.children():
            child.eval()
        return self


def _kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    """Bias-free 2-d convolution layer (the following batch norm owns the shift)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            _kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        )

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Batch norm over NCHW with learned per-channel scale and shift."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            eps=self.eps,
            momentum=self.momentum,
            training=self.training,
        )


class Linear(Module):
    """Fully connected layer with bias."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_kaiming_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def module_state(module: Module) -> dict[str, np.ndarray]:
    """Copies of every parameter and buffer, keyed by dotted path."""
    state = {name: p.data.copy() for name, p in module.named_parameters()}
    for name, buf in module.named_buffers():
        state[name] = buf.copy()
    return state


def load_module_state(module: Module, state: dict[str, np.ndarray]) -> None:
    """Write a :func:`module_state` snapshot back into a module, in place.

    Every entry must match an existing parameter or buffer of the same
    shape; extra or missing names are an error so silent drift between a
    snapshot and an architecture cannot pass unnoticed.
    """
    targets: dict[str, np.ndarray] = {name: p.data for name, p in module.named_parameters()}
    for name, buf in module.named_buffers():
        targets[name] = buf
    missing = sorted(set(targets) - set(state))
    extra = sorted(set(state) - set(targets))
    if missing or extra:
        raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
    for name, value in state.items():
        if targets[name].shape != value.shape:
            raise ValueError(f"{name}: shape {value.shape} does not match {targets[name].shape}")
        targets[name][...] = value
