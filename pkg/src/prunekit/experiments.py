"""Experiment protocols behind the CLI subcommands.

Each protocol builds trainers straight from a ``RunConfig`` so a CLI run
and a library call share one code path.  Seed grids re-seed the whole
stack (model init, synthetic data, batch order) per seed while keeping
paired arms identical in everything but the intervention under study.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .errors import ConfigError
from .masks import apply_mask, make_mask, mask_from_indices
from .models import build_model
from .nn import Tensor, load_module_state, no_grad, softmax_cross_entropy
from .policy import dense_flops, effective_flops
from .random import derive_rng
from .trainer import PruneTrainer, RunResult

__all__ = [
    "build_trainer",
    "with_seed",
    "pretrain_state",
    "run_experiment",
    "ABLATION_ARMS",
    "AblationResult",
    "ablate",
    "wsr_trace",
    "sensitivity",
    "gradient_accuracy",
    "uniform_ratio_for_flops",
]


def build_trainer(config: RunConfig) -> PruneTrainer:
    """Model + data + trainer from a validated config.

    If the config names an ``init_checkpoint``, only the model tensors are
    taken from it — the run itself starts fresh (epoch 0, empty masks, cold
    optimizer).  Resuming a run mid-flight goes through
    ``PruneTrainer.load_state_dict`` with the full checkpoint state instead.
    """
    model = build_model(config.model)
    train, test = config.data.load(config.seed)
    trainer = PruneTrainer(model, train, test, config.prune, config.schedule, seed=config.seed)
    if config.init_checkpoint:
        load_module_state(model, load_checkpoint(config.init_checkpoint).state["model"])
    return trainer


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """Re-seed a config for one arm of a seed grid (model follows the seed)."""
    return dataclasses.replace(
        config, seed=seed, model=dataclasses.replace(config.model, seed=seed)
    )


def run_experiment(
    config: RunConfig,
    on_epoch_end: Optional[Callable] = None,
) -> tuple[PruneTrainer, RunResult]:
    trainer = build_trainer(config)
    result = trainer.run(on_epoch_end=on_epoch_end)
    return trainer, result


def pretrain_state(config: RunConfig, epochs: int) -> dict:
    """Dense-train (zero compression target) and return the model tensors.

    This is the shared starting point for protocols that intervene on a
    trained network: every arm of a comparison loads the same tensors.
    """
    dense = dataclasses.replace(
        config,
        prune=dataclasses.replace(config.prune, tau=0.0, adaptive=True),
        schedule=dataclasses.replace(config.schedule, finetune_epochs=epochs),
        init_checkpoint=None,
    )
    trainer, _ = run_experiment(dense)
    return trainer.state_dict()["model"]


# -- ablation grid ---------------------------------------------------------

# Arm name -> (adaptive ratios?, filter restoration?).  "restore" keeps the
# config's reconstruction mode; switching it off forces recon_mode="none".
ABLATION_ARMS = {
    "uniform": (False, False),
    "uniform+restore": (False, True),
    "adaptive": (True, False),
    "adaptive+restore": (True, True),
}


@dataclass
class AblationResult:
    """Final test accuracy per arm per seed, plus the protocol settings."""

    seeds: list[int]
    accuracy: dict[str, list[float]]  # arm -> per-seed final test accuracy
    statuses: dict[str, list[str]]
    removed: dict[str, list[float]]  # arm -> per-seed final param removal
    uniform_ratio: float
    pretrain_epochs: int

    def mean(self, arm: str) -> float:
        return float(np.mean(self.accuracy[arm]))

    def mean_removed(self, arm: str) -> float:
        return float(np.mean(self.removed[arm]))

    def rows(self) -> list[dict]:
        out = []
        for arm in ABLATION_ARMS:
            row = {"arm": arm}
            for seed, acc in zip(self.seeds, self.accuracy[arm]):
                row[f"seed_{seed}"] = acc
            row["mean"] = self.mean(arm)
            row["mean_removed"] = self.mean_removed(arm)
            out.append(row)
        return out


def _arm_config(config: RunConfig, adaptive: bool, restore: bool, uniform_ratio: float) -> RunConfig:
    if restore and config.prune.recon_mode == "none":
        raise ConfigError(
            "ablation with restoration arms needs prune.recon_mode set to a "
            "restoring mode (reload/reactivate/reinitialize), not 'none'"
        )
    prune = dataclasses.replace(
        config.prune,
        adaptive=adaptive,
        uniform_ratio=uniform_ratio,
        recon_mode=config.prune.recon_mode if restore else "none",
    )
    return dataclasses.replace(config, prune=prune)


def ablate(
    config: RunConfig,
    seeds: list[int],
    pretrain_epochs: int = 10,
    uniform_ratio: Optional[float] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> AblationResult:
    """Run the 2x2 grid {uniform, adaptive} x {no restore, restore}.

    All four arms of one seed start from the same dense-pretrained tensors.
    The uniform arms prune every layer at ``uniform_ratio`` (defaulting to
    the adaptive arms' compression target so the comparison is
    budget-matched on parameters).
    """
    ratio = config.prune.tau if uniform_ratio is None else uniform_ratio
    accuracy = {arm: [] for arm in ABLATION_ARMS}
    statuses = {arm: [] for arm in ABLATION_ARMS}
    removed = {arm: [] for arm in ABLATION_ARMS}
    for seed in seeds:
        seeded = with_seed(config, seed)
        start = pretrain_state(seeded, pretrain_epochs)
        for arm, (adaptive, restore) in ABLATION_ARMS.items():
            if progress:
                progress(f"seed {seed} arm {arm}")
            trainer = build_trainer(_arm_config(seeded, adaptive, restore, ratio))
            load_module_state(trainer.model, start)
            result = trainer.run()
            accuracy[arm].append(result.final_test_acc)
            statuses[arm].append(result.status)
            removed[arm].append(result.final_report.param_ratio_removed)
    return AblationResult(
        seeds=list(seeds),
        accuracy=accuracy,
        statuses=statuses,
        removed=removed,
        uniform_ratio=ratio,
        pretrain_epochs=pretrain_epochs,
    )


# -- per-layer WSR trace ----------------------------------------------------


def wsr_trace(config: RunConfig) -> list[dict]:
    """Per-epoch per-layer weight sparsity under uniform pruning, no restore.

    Row 0 is the dense starting point (all zeros); every subsequent row is
    one search epoch.  Columns are stable across rows: epoch then one column
    per maskable layer id.
    """
    traced = dataclasses.replace(
        config,
        prune=dataclasses.replace(config.prune, adaptive=False, recon_mode="none"),
        schedule=dataclasses.replace(config.schedule, finetune_epochs=0),
    )
    trainer = build_trainer(traced)
    layer_ids = [e.layer_id for e in trainer.model.maskable_entries()]
    rows = [{"epoch": 0, **{lid: 0.0 for lid in layer_ids}}]

    def record(t: PruneTrainer) -> None:
        last = t.log.last()
        rows.append(
            {"epoch": last.epoch, **{lid: last.per_layer[lid]["wsr"] for lid in layer_ids}}
        )

    trainer.run(on_epoch_end=record)
    return rows


# -- single-layer sensitivity ------------------------------------------------


def sensitivity(
    config: RunConfig,
    layer_id: str,
    ratios: list[float],
    finetune_epochs: int = 5,
) -> list[dict]:
    """Prune one layer at each grid ratio, briefly fine-tune, record accuracy.

    Needs ``config.init_checkpoint`` (the trained network under study).  A
    grid point that removes zero filters skips the fine-tune so its accuracy
    is exactly the checkpoint's.
    """
    if not config.init_checkpoint:
        raise ConfigError("sensitivity needs config.init_checkpoint (a trained network)")
    probe = build_trainer(config)
    valid = [e.layer_id for e in probe.model.maskable_entries()]
    if layer_id not in valid:
        raise ConfigError(f"unknown layer {layer_id!r}; maskable layers are {valid}")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"sensitivity ratios must lie in [0, 1], got {r}")

    rows = []
    for r in ratios:
        cfg = dataclasses.replace(
            config,
            schedule=dataclasses.replace(config.schedule, finetune_epochs=finetune_epochs),
        )
        trainer = build_trainer(cfg)
        entry = trainer.model.entry(layer_id)
        mask = make_mask(layer_id, entry.conv.weight.data, r)
        pruned = len(mask.pruned_indices)
        if pruned:
            apply_mask(entry.conv.weight.data, mask)
            trainer.masks = {layer_id: mask}
            trainer.phase = "finetune"
            trainer.run()
        test_loss, test_acc = trainer.evaluate()
        rows.append(
            {
                "layer": layer_id,
                "ratio": r,
                "pruned_filters": pruned,
                "test_loss": test_loss,
                "test_acc": test_acc,
            }
        )
    return rows


# -- gradient vs. accuracy ----------------------------------------------------


def _half_masks(model, upper: bool, fraction: float) -> dict:
    """Mask the lower- or upper-importance half of every maskable layer."""
    masks = {}
    for entry in model.maskable_entries():
        w = entry.conv.weight.data
        norms = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
        count = int(math.floor(fraction * w.shape[0]))
        order = np.argsort(norms, kind="stable")
        chosen = order[-count:] if count and upper else order[:count]
        masks[entry.layer_id] = mask_from_indices(entry.layer_id, sorted(chosen.tolist()), w.shape[0])
    return masks


def _refresh_bn_stats(trainer) -> None:
    """Re-estimate batch-norm running statistics with frozen weights.

    A masked filter leaves its running mean/var at pre-cut values, so in
    inference mode the dead channel emits a large constant instead of zero.
    With only a handful of channels per layer that stale constant dominates
    the accuracy read; at hundreds of channels it would wash out.  One
    training-mode forward over the whole training set with the buffer
    momentum at 1.0 replaces the buffers with the exact full-set statistics,
    making the refresh deterministic and idempotent for fixed weights.
    """
    model = trainer.model
    saved = [(e.bn, e.bn.momentum) for e in model.registry if e.bn is not None]
    if not saved:
        return
    model.train()
    for bn, _ in saved:
        bn.momentum = 1.0
    x, _ = trainer.train_data.batch(np.arange(len(trainer.train_data)))
    with no_grad():
        model.forward(Tensor(x))
    for bn, momentum in saved:
        bn.momentum = momentum
    model.eval()


def gradient_accuracy(
    config: RunConfig,
    seeds: list[int],
    fraction: float = 0.5,
    pretrain_epochs: int = 10,
    progress: Optional[Callable[[str], None]] = None,
) -> list[dict]:
    """Paired arms per seed: prune the least- vs. most-important half.

    Importance is the filter L2 norm.  Both accuracy reads use batch-norm
    running statistics re-estimated with frozen weights -- once before and
    once after the cut -- then each arm records the test-accuracy drop
    against the uncut network and the largest pre-clip gradient magnitude
    on the next training batch.  If the config
    carries an ``init_checkpoint`` it is used for every seed; otherwise each
    seed dense-pretrains its own starting point.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must lie in [0, 1], got {fraction}")
    rows = []
    for seed in seeds:
        seeded = with_seed(config, seed)
        if config.init_checkpoint:
            start = load_checkpoint(config.init_checkpoint).state["model"]
        else:
            start = pretrain_state(seeded, pretrain_epochs)
        for arm, upper in (("lower_half", False), ("upper_half", True)):
            if progress:
                progress(f"seed {seed} arm {arm}")
            trainer = build_trainer(seeded)
            load_module_state(trainer.model, start)
            _refresh_bn_stats(trainer)
            _, baseline_acc = trainer.evaluate()
            for lid, mask in _half_masks(trainer.model, upper, fraction).items():
                entry = trainer.model.entry(lid)
                apply_mask(entry.conv.weight.data, mask)
            _refresh_bn_stats(trainer)
            _, acc = trainer.evaluate()

            # Gradient probe last: its train-mode forward updates batch-norm
            # running statistics, which must not leak into the accuracy read.
            trainer.model.train()
            order = derive_rng(seed, "shuffle", 1).permutation(len(trainer.train_data))
            x, y = trainer.train_data.batch(order[: config.schedule.batch_size])
            trainer.optimizer.zero_grad()
            loss = softmax_cross_entropy(trainer.model.forward(Tensor(x)), y)
            loss.backward()
            max_grad = max(
                float(np.abs(p.grad).max())
                for _, p in trainer.model.named_parameters()
                if p.grad is not None
            )
            rows.append(
                {
                    "seed": seed,
                    "arm": arm,
                    "max_grad": max_grad,
                    "test_acc": acc,
                    "acc_drop": baseline_acc - acc,
                }
            )
    return rows


# -- FLOPs-matched uniform ratio ----------------------------------------------


def uniform_ratio_for_flops(model, target_removed: float) -> float:
    """Smallest uniform pruning ratio whose FLOPs removal meets the target.

    Analytic: kept counts follow floor(ratio * n) per maskable layer, so the
    removal fraction is a step function of the ratio; this walks the finite
    set of breakpoints instead of training anything.
    """
    if not 0.0 <= target_removed < 1.0:
        raise ConfigError(f"target FLOPs removal must lie in [0, 1), got {target_removed}")
    entries = list(model.registry)
    maskable = model.maskable_entries()
    if not maskable:
        raise ConfigError("model has no maskable conv layers")
    total = sum(dense_flops(e) for e in entries)

    def removed_at(ratio: float) -> float:
        # Same floor arithmetic as mask selection, so the returned ratio
        # reproduces exactly these kept counts when actually applied.
        kept = {
            e.layer_id: e.conv.out_channels - int(np.floor(ratio * e.conv.out_channels))
            for e in maskable
        }
        return 1.0 - sum(effective_flops(e, kept) for e in entries) / total

    # Candidates sit halfway between consecutive floor(ratio*n) breakpoints
    # of each layer, so float rounding cannot flip a count at a candidate.
    points = sorted(
        {0.0, 1.0}
        | {(f + 0.5) / e.conv.out_channels for e in maskable for f in range(e.conv.out_channels)}
    )
    for ratio in points:
        if removed_at(ratio) >= target_removed:
            return ratio
    raise ConfigError(
        f"no uniform ratio reaches {target_removed:.0%} FLOPs removal "
        "(fully pruning every maskable layer still leaves the unmaskable ones)"
    )
