"""Per-layer pruning-ratio policy and global compression accounting.

The adaptive rule treats each layer's measured weight sparsity as a signal:
filters that stay at zero after being masked were not missed by the network,
so the layer can absorb more pruning (ratio = sparsity + delta); filters that
regrew pull the assigned ratio back down toward what the layer actually
tolerates.  Uniform mode bypasses the rule and assigns one fixed ratio
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, ContractError
from .masks import LayerSparsity, count_nonzero, weight_sparsity_ratio

__all__ = [
    "PruneConfig",
    "CompressionReport",
    "update_ratio",
    "update_all_ratios",
    "measure_sparsity",
    "global_compression_ratio",
    "dense_flops",
    "effective_flops",
]

RECON_MODES = ("reload", "reactivate", "reinitialize", "none")
DETECT_VARIANTS = ("weight-norm", "grad-norm")
THRESHOLD_POOLS = ("all", "pruned")


@dataclass
class PruneConfig:
    """Knobs of the prune/train loop.

    tau            target global fraction of maskable weights removed
    s_min          floor on the density every layer must keep (ratio cap 1 - s_min)
    delta          sparsity-to-ratio increment of the adaptive rule
    k_init         ratio assigned to every layer on the first pruning pass
    adaptive       per-layer adaptive ratios when True, uniform otherwise
    uniform_ratio  the fixed ratio used when adaptive is False
    recon_mode     what to do with filters flagged by the probe
    detect         flag by post-probe weight norms or gradient norms
    threshold_pool mean over all filters or only the pruned ones
    """

    tau: float = 0.2
    s_min: float = 0.0
    delta: float = 0.2
    k_init: float = 0.1
    adaptive: bool = True
    uniform_ratio: float = 0.3
    recon_mode: str = "reload"
    detect: str = "weight-norm"
    threshold_pool: str = "all"

    def validate(self) -> "PruneConfig":
        checks = [
            ("tau", self.tau, 0.0, 1.0),
            ("s_min", self.s_min, 0.0, 1.0),
            ("k_init", self.k_init, 0.0, 1.0),
            ("uniform_ratio", self.uniform_ratio, 0.0, 1.0),
        ]
        for name, value, lo, hi in checks:
            if not lo <= value <= hi:
                raise ConfigError(f"prune.{name} must lie in [{lo}, {hi}], got {value}")
        if self.delta < 0:
            raise ConfigError(f"prune.delta must be non-negative, got {self.delta}")
        if self.recon_mode not in RECON_MODES:
            raise ConfigError(f"prune.recon_mode must be one of {RECON_MODES}, got {self.recon_mode!r}")
        if self.detect not in DETECT_VARIANTS:
            raise ConfigError(f"prune.detect must be one of {DETECT_VARIANTS}, got {self.detect!r}")
        if self.threshold_pool not in THRESHOLD_POOLS:
            raise ConfigError(
                f"prune.threshold_pool must be one of {THRESHOLD_POOLS}, got {self.threshold_pool!r}"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "s_min": self.s_min,
            "delta": self.delta,
            "k_init": self.k_init,
            "adaptive": self.adaptive,
            "uniform_ratio": self.uniform_ratio,
            "recon_mode": self.recon_mode,
            "detect": self.detect,
            "threshold_pool": self.threshold_pool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        return cls(**d).validate()


def update_ratio(s: float, k: float, delta: float, s_min: float = 0.0) -> float:
    """Next pruning ratio for one layer from its measured sparsity.

    The measured sparsity ``s`` is the floor of the new ratio: if the layer
    is no sparser than its assigned ratio (nothing regrew past it), pruning
    pressure rises by ``delta``; if it is sparser, the ratio follows the
    measurement.  The result is clamped to [0, 1 - s_min] so every layer
    keeps at least ``s_min`` of its filters.
    """
    new = s + delta if s <= k else s
    return min(max(new, 0.0), 1.0 - s_min)


def update_all_ratios(
    ratios: dict[str, float],
    sparsity: dict[str, float],
    config: PruneConfig,
    first_pass: bool,
) -> dict[str, float]:
    """Return the next ratio map over exactly the layers present in ``ratios``."""
    if not config.adaptive:
        return {layer: config.uniform_ratio for layer in ratios}
    if first_pass:
        return {layer: config.k_init for layer in ratios}
    return {
        layer: update_ratio(sparsity[layer], ratios[layer], config.delta, config.s_min)
        for layer in ratios
    }


# -- compression accounting ----------------------------------------------


def dense_flops(entry) -> int:
    """Multiply-accumulate count of one conv layer at full width."""
    k = entry.conv.kernel_size
    return entry.out_hw * k * k * entry.conv.in_channels * entry.conv.out_channels


def effective_flops(entry, kept_counts: dict[str, int]) -> float:
    """MAC count after discounting pruned output filters and, where the
    producing layer is unambiguous, the matching dead input channels."""
    k = entry.conv.kernel_size
    out = kept_counts.get(entry.layer_id, entry.conv.out_channels)
    if entry.predecessor is not None and entry.predecessor in kept_counts:
        inp = kept_counts[entry.predecessor]
    else:
        inp = entry.conv.in_channels
    return entry.out_hw * k * k * inp * out


@dataclass
class CompressionReport:
    """Global view of how much of the network the masks removed."""

    param_ratio_removed: float
    flops_removed_fraction: float
    per_layer: dict[str, LayerSparsity] = field(default_factory=dict)
    nonzero_total: int = 0
    weight_total: int = 0
    flops_total: int = 0
    flops_effective: float = 0.0


def measure_sparsity(model, ratios: dict[str, float] | None = None) -> dict[str, LayerSparsity]:
    """Exact-zero sparsity of every maskable layer's conv weights."""
    ratios = ratios or {}
    out: dict[str, LayerSparsity] = {}
    for entry in model.maskable_entries():
        w = entry.conv.weight.data
        out[entry.layer_id] = LayerSparsity(
            layer_id=entry.layer_id,
            wsr=weight_sparsity_ratio(w),
            ratio=float(ratios.get(entry.layer_id, 0.0)),
            nonzero_count=count_nonzero(w),
            total_count=w.size,
        )
    return out


def global_compression_ratio(model, ratios: dict[str, float] | None = None) -> CompressionReport:
    """Parameter- and FLOP-level compression of the current mask state.

    The parameter ratio is exact: 1 minus (global nonzero count over global
    maskable weight count).  The FLOP fraction additionally credits input
    channels that went dead because their producing layer was pruned, but
    only along unambiguous producer->consumer chains (channel spaces that
    pass through merges are never discounted).
    """
    entries = list(model.registry)
    maskable = [e for e in entries if e.maskable]
    if not maskable:
        raise ContractError("model has no maskable conv layers")
    per_layer = measure_sparsity(model, ratios)
    nonzero = sum(s.nonzero_count for s in per_layer.values())
    total = sum(s.total_count for s in per_layer.values())

    # FLOP accounting counts every conv (projections included); kept filter
    # counts come from exactly-zero filter norms of maskable layers.
    kept_counts: dict[str, int] = {}
    for e in maskable:
        w = e.conv.weight.data
        filter_alive = (w.reshape(w.shape[0], -1) != 0.0).any(axis=1)
        kept_counts[e.layer_id] = int(filter_alive.sum())
    flops_total = sum(dense_flops(e) for e in entries)
    flops_eff = sum(effective_flops(e, kept_counts) for e in entries)

    return CompressionReport(
        param_ratio_removed=1.0 - nonzero / total,
        flops_removed_fraction=1.0 - flops_eff / flops_total,
        per_layer=per_layer,
        nonzero_total=nonzero,
        weight_total=total,
        flops_total=flops_total,
        flops_effective=flops_eff,
    )
