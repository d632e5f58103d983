"""Filter-level mask bookkeeping.

A mask lives at output-filter granularity: pruning filter ``i`` of a conv
layer writes exact zeros over ``weight[i]`` (and that filter's optimizer
velocity) but deliberately leaves the following batch norm's scale/shift
alone — zeros in the conv output are what the protective probe needs to see,
and the batch-norm path is the only route through which a wrongly pruned
filter can announce itself with an outsized gradient.  Masking is soft:
nothing here freezes the weights, so masked filters may regrow between
pruning passes.

Sparsity is always measured by counting exact zeros; masking writes exact
zeros, so no threshold is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "FilterMask",
    "LayerSparsity",
    "filter_l2_norms",
    "select_prune_indices",
    "make_mask",
    "mask_from_indices",
    "apply_mask",
    "weight_sparsity_ratio",
    "count_nonzero",
]


@dataclass
class FilterMask:
    """Keep/prune decision per output filter of one conv layer."""

    layer_id: str
    kept: np.ndarray  # bool, shape (out_filters,); True = kept

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)
        if self.kept.ndim != 1:
            raise ShapeError(f"mask for {self.layer_id!r} must be 1-d, got {self.kept.shape}")

    @property
    def out_filters(self) -> int:
        return self.kept.size

    @property
    def pruned_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.kept)

    @property
    def kept_count(self) -> int:
        return int(self.kept.sum())

    def copy(self) -> "FilterMask":
        return FilterMask(self.layer_id, self.kept.copy())


@dataclass
class LayerSparsity:
    """Measured sparsity snapshot of one layer's conv weights."""

    layer_id: str
    wsr: float
    ratio: float  # the pruning ratio currently assigned to the layer
    nonzero_count: int
    total_count: int


def filter_l2_norms(weight: np.ndarray) -> np.ndarray:
    """L2 norm of each output filter of a (F, C, kh, kw) weight array."""
    if weight.ndim != 4:
        raise ShapeError(f"expected a 4-d conv weight, got shape {weight.shape}")
    return np.sqrt((weight.reshape(weight.shape[0], -1) ** 2).sum(axis=1))


def select_prune_indices(norms: np.ndarray, ratio: float) -> np.ndarray:
    """Indices of the floor(ratio * n) smallest-norm filters, ascending.

    Ties break toward the lower index (stable sort), so selection is a pure
    function of the norm vector.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1], got {ratio}")
    n = len(norms)
    count = int(np.floor(ratio * n))
    if count == 0:
        return np.empty(0, dtype=np.intp)
    order = np.argsort(norms, kind="stable")
    return np.sort(order[:count])


def make_mask(layer_id: str, weight: np.ndarray, ratio: float) -> FilterMask:
    """Build a mask pruning the lowest-norm fraction of a layer's filters."""
    norms = filter_l2_norms(weight)
    kept = np.ones(len(norms), dtype=bool)
    kept[select_prune_indices(norms, ratio)] = False
    return FilterMask(layer_id, kept)


def mask_from_indices(layer_id: str, pruned: Sequence[int], out_filters: int) -> FilterMask:
    """Build a mask pruning an explicit set of filter indices."""
    kept = np.ones(out_filters, dtype=bool)
    idx = np.asarray(list(pruned), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= out_filters):
        raise ShapeError(f"pruned indices out of range for {out_filters} filters: {idx}")
    kept[idx] = False
    return FilterMask(layer_id, kept)


def apply_mask(
    weight: np.ndarray,
    mask: FilterMask,
    velocity: Optional[np.ndarray] = None,
) -> None:
    """Write exact zeros over pruned filters, in place.

    Zeroes the pruned filters' weights and, when given, the matching slices
    of the optimizer velocity so stale momentum cannot push a freshly pruned
    filter straight back off zero.
    """
    if weight.shape[0] != mask.out_filters:
        raise ShapeError(
            f"mask for {mask.layer_id!r} covers {mask.out_filters} filters, "
            f"weight has {weight.shape[0]}"
        )
    pruned = ~mask.kept
    weight[pruned] = 0.0
    if velocity is not None:
        velocity[pruned] = 0.0


def count_nonzero(weight: np.ndarray) -> int:
    return int(np.count_nonzero(weight))


def weight_sparsity_ratio(weight: np.ndarray) -> float:
    """Fraction of exactly-zero entries: 1 - ||W||_0 / numel(W)."""
    if weight.size == 0:
        raise ShapeError("cannot measure sparsity of an empty weight array")
    return 1.0 - count_nonzero(weight) / weight.size
