"""Backup, probe, detection, and restoration of wrongly pruned filters.

The search loop prunes by weight norm, which misjudges filters whose small
weights nonetheless carry signal the network depends on.  Those mistakes are
observable: a freshly masked filter feeds its batch norm an all-zero channel,
the batch statistics collapse (variance -> 0), and the normalisation's
1/sqrt(var + eps) factor turns ordinary upstream gradients into very large
ones wherever the loss still wants that channel.  One optimizer step after
masking therefore regrows *important* pruned filters far faster than
unimportant ones, and a simple mean-threshold test on the post-step filter
norms separates the two groups.

Flow per epoch (driven by the trainer):

    backup_weights -> apply masks -> probe_step -> detect_abnormal -> reconstruct

``reconstruct`` supports three repair modes: ``reload`` restores the flagged
filters' weights and batch-norm state from the backup, ``reactivate`` keeps
the one regrown step as the new starting point, ``reinitialize`` redraws the
flagged filters from the init distribution.  In every mode the flagged mask
bits flip back to kept, so later hard-mask passes leave the filter alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .masks import FilterMask, filter_l2_norms
from .nn import SGD, Tensor, accuracy, softmax_cross_entropy
from .nn.modules import _kaiming_normal
from .policy import DETECT_VARIANTS, THRESHOLD_POOLS

__all__ = [
    "LayerBackup",
    "WeightBackup",
    "backup_weights",
    "ProbeResult",
    "probe_step",
    "LayerDetection",
    "AbnormalReport",
    "detect_abnormal",
    "reconstruct",
]


@dataclass
class LayerBackup:
    """Pre-masking state of one conv layer and its batch norm."""

    weight: np.ndarray
    gamma: Optional[np.ndarray]
    beta: Optional[np.ndarray]
    running_mean: Optional[np.ndarray]
    running_var: Optional[np.ndarray]


@dataclass
class WeightBackup:
    """Snapshot of the maskable layers taken at the top of a search epoch.

    A backup is single-use: ``reconstruct`` consumes it, and reusing a
    consumed (or wrong-epoch) backup raises :class:`ContractError` rather
    than silently restoring stale weights.
    """

    epoch: int
    layers: dict[str, LayerBackup] = field(default_factory=dict)
    consumed: bool = False


def backup_weights(model, layer_ids: list[str], epoch: int) -> WeightBackup:
    """Copy conv weights and batch-norm state for the given registry layers."""
    backup = WeightBackup(epoch=epoch)
    for layer_id in layer_ids:
        entry = model.entry(layer_id)
        bn = entry.bn
        backup.layers[layer_id] = LayerBackup(
            weight=entry.conv.weight.data.copy(),
            gamma=bn.gamma.data.copy() if bn is not None else None,
            beta=bn.beta.data.copy() if bn is not None else None,
            running_mean=bn.running_mean.copy() if bn is not None else None,
            running_var=bn.running_var.copy() if bn is not None else None,
        )
    return backup


@dataclass
class ProbeResult:
    """Diagnostics from the single optimizer step taken right after masking."""

    loss: float
    batch_correct: int
    batch_size: int
    pre_clip_norm: float
    pre_clip_max: float
    clip_scale: float


def probe_step(model, optimizer: SGD, x: np.ndarray, y: np.ndarray) -> ProbeResult:
    """Run one full training step (forward, backward, update) on one batch.

    The parameter gradients are left in place afterwards so gradient-based
    detection can inspect them.  Raises :class:`NumericalError` (from the
    loss or the optimizer) if anything non-finite shows up.
    """
    optimizer.zero_grad()
    logits = model.forward(Tensor(x))
    loss = softmax_cross_entropy(logits, y)
    correct = int(round(accuracy(logits.data, y) * len(y)))
    loss.backward()
    stats = optimizer.step()
    return ProbeResult(
        loss=float(loss.data),
        batch_correct=correct,
        batch_size=len(y),
        pre_clip_norm=stats["pre_clip_norm"],
        pre_clip_max=stats["pre_clip_max"],
        clip_scale=stats["clip_scale"],
    )


@dataclass
class LayerDetection:
    """Detection outcome for one masked layer."""

    layer_id: str
    flagged: list[int]
    threshold: float
    norms: np.ndarray


@dataclass
class AbnormalReport:
    """Per-layer detection results for one probe."""

    variant: str
    threshold_pool: str
    layers: dict[str, LayerDetection] = field(default_factory=dict)

    def total_flagged(self) -> int:
        return sum(len(d.flagged) for d in self.layers.values())

    def flagged_map(self) -> dict[str, list[int]]:
        return {lid: list(d.flagged) for lid, d in self.layers.items() if d.flagged}


def detect_abnormal(
    model,
    masks: dict[str, FilterMask],
    variant: str = "weight-norm",
    threshold_pool: str = "all",
) -> AbnormalReport:
    """Flag pruned filters whose post-probe response exceeds the layer mean.

    ``weight-norm`` scores each filter by the L2 norm of its weights after
    the probe step (pruned filters start from exactly zero, so the norm *is*
    the regrowth).  ``grad-norm`` scores by the L2 norm of the gradient the
    probe computed.  The threshold is the mean score over ``threshold_pool``
    ("all" filters in the layer, or only the "pruned" ones); a pruned filter
    strictly above it is flagged.  Only pruned filters can be flagged.
    """
    if variant not in DETECT_VARIANTS:
        raise ContractError(f"unknown detection variant {variant!r}")
    if threshold_pool not in THRESHOLD_POOLS:
        raise ContractError(f"unknown threshold pool {threshold_pool!r}")
    report = AbnormalReport(variant=variant, threshold_pool=threshold_pool)
    for layer_id, mask in masks.items():
        entry = model.entry(layer_id)
        if variant == "weight-norm":
            values = entry.conv.weight.data
        else:
            if entry.conv.weight.grad is None:
                raise ContractError(
                    f"layer {layer_id!r} has no gradient; run the probe step before detection"
                )
            values = entry.conv.weight.grad
        norms = filter_l2_norms(values)
        pruned = mask.pruned_indices
        if threshold_pool == "all":
            threshold = float(norms.mean())
        else:
            threshold = float(norms[pruned].mean()) if len(pruned) else 0.0
        flagged = [int(i) for i in pruned if norms[i] > threshold]
        report.layers[layer_id] = LayerDetection(
            layer_id=layer_id, flagged=flagged, threshold=threshold, norms=norms
        )
    return report


def _velocity_for(optimizer: SGD, param) -> Optional[np.ndarray]:
    for name, p in optimizer.named_params:
        if p is param:
            return optimizer.velocities[name]
    return None


def reconstruct(
    model,
    optimizer: SGD,
    masks: dict[str, FilterMask],
    report: AbnormalReport,
    mode: str,
    backup: Optional[WeightBackup] = None,
    rng: Optional[np.random.Generator] = None,
    epoch: Optional[int] = None,
) -> dict[str, int]:
    """Repair the flagged filters in place and unmask them.

    ``reload`` restores weight rows, batch-norm scale/shift/running stats,
    and zeroes the affected momentum, so a flagged filter resumes exactly
    where it stood before masking.  ``reactivate`` keeps the probe's one
    regrown step (weights and momentum) and merely flips the mask bits.
    ``reinitialize`` redraws the flagged weight rows from the Kaiming init
    distribution using ``rng`` and zeroes their momentum.

    Returns the number of filters restored per layer (only nonzero entries).
    """
    if mode == "reload":
        if backup is None:
            raise ContractError("reload reconstruction requires a weight backup")
        if backup.consumed:
            raise ContractError("weight backup has already been consumed")
        if epoch is not None and backup.epoch != epoch:
            raise ContractError(
                f"stale weight backup: taken at epoch {backup.epoch}, restoring at epoch {epoch}"
            )
        backup.consumed = True
    elif mode == "reinitialize":
        if rng is None:
            raise ContractError("reinitialize reconstruction requires a random generator")
    elif mode != "reactivate":
        raise ContractError(f"unknown reconstruction mode {mode!r}")

    restored: dict[str, int] = {}
    for layer_id, detection in report.layers.items():
        if not detection.flagged:
            continue
        mask = masks[layer_id]
        entry = model.entry(layer_id)
        idx = np.array(detection.flagged, dtype=np.intp)
        if np.any(mask.kept[idx]):
            raise ContractError(f"layer {layer_id!r}: flagged filters include kept ones")
        weight = entry.conv.weight
        velocity = _velocity_for(optimizer, weight)
        if mode == "reload":
            saved = backup.layers[layer_id]
            weight.data[idx] = saved.weight[idx]
            if entry.bn is not None:
                entry.bn.gamma.data[idx] = saved.gamma[idx]
                entry.bn.beta.data[idx] = saved.beta[idx]
                entry.bn.running_mean[idx] = saved.running_mean[idx]
                entry.bn.running_var[idx] = saved.running_var[idx]
                for bn_param in (entry.bn.gamma, entry.bn.beta):
                    bn_vel = _velocity_for(optimizer, bn_param)
                    if bn_vel is not None:
                        bn_vel[idx] = 0.0
            if velocity is not None:
                velocity[idx] = 0.0
        elif mode == "reinitialize":
            _, in_c, kh, kw = weight.data.shape
            fan_in = in_c * kh * kw
            for i in idx:
                weight.data[i] = _kaiming_normal(rng, (in_c, kh, kw), fan_in)
            if velocity is not None:
                velocity[idx] = 0.0
        # reactivate: leave the regrown weights and momentum exactly as the
        # probe step produced them.
        mask.kept[idx] = True
        restored[layer_id] = len(detection.flagged)
    return restored
