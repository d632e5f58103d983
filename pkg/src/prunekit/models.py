"""Model zoo: a plain conv stack, a small residual network, and a linear probe.

Every model publishes a ``registry`` — one entry per conv layer, in forward
execution order — that the pruning machinery drives.  An entry records the
conv module, the batch norm that consumes its output (None if the output
merges with something else first), the upstream maskable conv that owns its
input channel space where that is unambiguous, and whether the layer may be
masked at all.  The classifier head and 1x1 downsample projections are never
masked: cutting them would change residual/add shape semantics rather than
remove computation.

All weights are Kaiming fan-in normal draws from a generator derived from the
model seed, consumed in construction order, so a spec fully determines the
initial parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, Linear, Module, Tensor, add, flatten, global_avg_pool, relu
from .random import derive_rng

__all__ = ["ModelSpec", "LayerEntry", "build_model", "CnnSmall", "ResNetTiny", "MlpProbe"]

BN_EPS = 1e-5


@dataclass
class ModelSpec:
    """Architecture description; a spec plus a seed pins every weight."""

    arch: str = "cnn_small"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    classes: int = 10
    width: int = 8
    blocks: int = 2  # residual blocks per stage (resnet_tiny only)
    seed: int = 0

    def validate(self) -> "ModelSpec":
        if self.arch not in ("cnn_small", "resnet_tiny", "mlp_probe"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if len(self.input_shape) != 3 or any(int(d) < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (channels, H, W) positive, got {self.input_shape}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.width < 1 or self.blocks < 1:
            raise ConfigError("width and blocks must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "width": self.width,
            "blocks": self.blocks,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            arch=d["arch"],
            input_shape=tuple(d["input_shape"]),
            classes=int(d["classes"]),
            width=int(d["width"]),
            blocks=int(d["blocks"]),
            seed=int(d["seed"]),
        )


@dataclass
class LayerEntry:
    """Registry row for one conv layer."""

    layer_id: str
    conv: Conv2d
    bn: Optional[BatchNorm2d]  # BN fed directly (and only) by this conv
    predecessor: Optional[str]  # maskable conv owning this conv's input channels
    maskable: bool
    out_hw: int = 0  # spatial size of the conv output (for FLOP accounting)


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class _RegistryModel(Module):
    """Shared registry helpers for the conv models."""

    registry: list[LayerEntry]

    def maskable_entries(self) -> list[LayerEntry]:
        return [e for e in self.registry if e.maskable]

    def entry(self, layer_id: str) -> LayerEntry:
        for e in self.registry:
            if e.layer_id == layer_id:
                return e
        raise KeyError(layer_id)

    def trace_forward(self, x: Tensor) -> tuple[Tensor, list[str]]:
        """Run a forward pass recording the actual conv execution order."""
        sink: list[str] = []
        originals = []
        for e in self.registry:
            conv, layer_id = e.conv, e.layer_id
            originals.append((conv, conv.forward))

            def hooked(inp, _conv=conv, _id=layer_id, _orig=conv.forward):
                sink.append(_id)
                return _orig(inp)

            conv.forward = hooked
        try:
            out = self.forward(x)
        finally:
            for conv, orig in originals:
                conv.forward = orig
        return out, sink


class CnnSmall(_RegistryModel):
    """conv-BN-ReLU x3 -> global average pool -> linear classifier."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        rng = derive_rng(spec.seed, "init")
        c, h, w = spec.input_shape
        widths = (spec.width, spec.width * 2, spec.width * 4)
        self.convs: list[Conv2d] = []
        self.bns: list[BatchNorm2d] = []
        self.registry = []
        in_c = c
        prev_id: Optional[str] = None
        for i, out_c in enumerate(widths):
            conv = Conv2d(in_c, out_c, 3, stride=1, padding=1, rng=rng)
            bn = BatchNorm2d(out_c, eps=BN_EPS)
            self.convs.append(conv)
            self.bns.append(bn)
            layer_id = f"conv{i + 1}"
            self.registry.append(
                LayerEntry(layer_id, conv, bn, prev_id, maskable=True, out_hw=h * w)
            )
            prev_id = layer_id
            in_c = out_c
        self.head = Linear(widths[-1], spec.classes, rng=rng)
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = relu(bn.forward(conv.forward(h)))
        return self.head.forward(global_avg_pool(h))


class _BasicBlock(Module):
    """Classic residual block: conv-BN-ReLU-conv-BN, add shortcut, ReLU."""

    def __init__(self, in_c: int, out_c: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_c, out_c, 3, stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(out_c, eps=BN_EPS)
        self.conv2 = Conv2d(out_c, out_c, 3, stride=1, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(out_c, eps=BN_EPS)
        self.downsample = stride != 1 or in_c != out_c
        if self.downsample:
            self.proj = Conv2d(in_c, out_c, 1, stride=stride, padding=0, rng=rng)
            self.proj_bn = BatchNorm2d(out_c, eps=BN_EPS)

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        short = self.proj_bn.forward(self.proj.forward(x)) if self.downsample else x
        return relu(add(h, short))


class ResNetTiny(_RegistryModel):
    """Three-stage residual classifier (6n+2 weighted layers at width w).

    ``blocks=3`` at width 16 reproduces the classic 20-weighted-layer CIFAR
    shape: stem + 3 stages x 3 blocks x 2 convs + classifier, with the two
    1x1 downsample projections as auxiliary (non-maskable) layers.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        rng = derive_rng(spec.seed, "init")
        c, h, w = spec.input_shape
        width = spec.width
        self.stem = Conv2d(c, width, 3, stride=1, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(width, eps=BN_EPS)
        self.registry = [LayerEntry("stem", self.stem, self.stem_bn, None, True, out_hw=h * w)]
        self.blocks: list[_BasicBlock] = []
        in_c = width
        for stage in range(3):
            out_c = width * (2**stage)
            for b in range(spec.blocks):
                stride = 2 if stage > 0 and b == 0 else 1
                block = _BasicBlock(in_c, out_c, stride, rng)
                self.blocks.append(block)
                h = _conv_out_size(h, 3, stride, 1)
                w = _conv_out_size(w, 3, stride, 1)
                prefix = f"s{stage + 1}b{b + 1}"
                self.registry.append(
                    LayerEntry(f"{prefix}.conv1", block.conv1, block.bn1, None, True, out_hw=h * w)
                )
                self.registry.append(
                    LayerEntry(
                        f"{prefix}.conv2", block.conv2, block.bn2, f"{prefix}.conv1", True, out_hw=h * w
                    )
                )
                if block.downsample:
                    self.registry.append(
                        LayerEntry(f"{prefix}.proj", block.proj, block.proj_bn, None, False, out_hw=h * w)
                    )
                in_c = out_c
        self.head = Linear(in_c, spec.classes, rng=rng)
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.stem_bn.forward(self.stem.forward(x)))
        for block in self.blocks:
            h = block.forward(h)
        return self.head.forward(global_avg_pool(h))


class MlpProbe(_RegistryModel):
    """A single linear layer over flattened pixels — a linear probe."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        rng = derive_rng(spec.seed, "init")
        c, h, w = spec.input_shape
        self.head = Linear(c * h * w, spec.classes, rng=rng)
        self.registry = []
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        return self.head.forward(flatten(x))


def build_model(spec: ModelSpec) -> _RegistryModel:
    spec.validate()
    if spec.arch == "cnn_small":
        return CnnSmall(spec)
    if spec.arch == "resnet_tiny":
        return ResNetTiny(spec)
    return MlpProbe(spec)
