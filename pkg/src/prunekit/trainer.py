"""The two-stage prune-train engine.

Stage 1 (search) runs one pruning pass per epoch: measure each layer's
weight sparsity, check the global compression target, raise the per-layer
ratios, mask the lowest-norm filters, then take one probe step and repair
any filter the pulse-gradient detector flags before training out the rest
of the epoch.  Masks are soft here — between pruning passes the gradients
may regrow whatever the loss still wants.

Stage 2 (fine-tune) freezes the final masks and re-applies them after every
optimizer step, so the searched sparsity is exactly the shipped sparsity.

Determinism: every stochastic choice (shuffle order, augmentation, filter
re-draws) comes from a generator derived from (seed, purpose, epoch), never
from shared mutable RNG state.  Two runs with the same config and seed are
bitwise identical, and a run resumed from a checkpoint at an epoch boundary
continues exactly as if it had never stopped.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError, ContractError
from .masks import FilterMask, apply_mask, make_mask
from .nn import SGD, Tensor, accuracy, no_grad, softmax_cross_entropy
from .policy import CompressionReport, PruneConfig, global_compression_ratio, measure_sparsity, update_all_ratios
from .random import derive_rng
from .reconstruction import backup_weights, detect_abnormal, probe_step, reconstruct

__all__ = ["TrainSchedule", "EpochRecord", "ExperimentLog", "RunResult", "PruneTrainer"]


@dataclass
class TrainSchedule:
    """Optimizer hyper-parameters and the epoch budget for both stages.

    The learning rate decays by ``lr_decay_factor`` at each milestone epoch;
    when ``lr_milestones`` is left unset the milestones sit at 50% and 75%
    of the planned total (search + fine-tune), counted in global epochs.
    """

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_max_norm: Optional[float] = 5.0
    batch_size: int = 32
    search_epochs: int = 10
    finetune_epochs: int = 10
    lr_decay_factor: float = 0.2
    lr_milestones: Optional[list[int]] = None

    def validate(self) -> "TrainSchedule":
        if self.lr <= 0:
            raise ConfigError(f"schedule.lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"schedule.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"schedule.weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_max_norm is not None and self.clip_max_norm <= 0:
            raise ConfigError(f"schedule.clip_max_norm must be positive or null, got {self.clip_max_norm}")
        if self.batch_size < 1:
            raise ConfigError(f"schedule.batch_size must be >= 1, got {self.batch_size}")
        if self.search_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("schedule epoch counts must be >= 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(f"schedule.lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_milestones is not None and sorted(self.lr_milestones) != list(self.lr_milestones):
            raise ConfigError("schedule.lr_milestones must be sorted ascending")
        return self

    @property
    def total_epochs(self) -> int:
        return self.search_epochs + self.finetune_epochs

    def milestones(self) -> list[int]:
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        total = self.total_epochs
        return [math.ceil(total * 0.5), math.ceil(total * 0.75)]

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based global epoch (non-increasing in epoch)."""
        passed = sum(1 for m in self.milestones() if epoch >= m and m > 0)
        return self.lr * self.lr_decay_factor**passed

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "clip_max_norm": self.clip_max_norm,
            "batch_size": self.batch_size,
            "search_epochs": self.search_epochs,
            "finetune_epochs": self.finetune_epochs,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_milestones": self.lr_milestones,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


@dataclass
class EpochRecord:
    """One completed epoch's metrics."""

    epoch: int
    phase: str  # "search" | "finetune"
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    param_ratio_removed: float
    flops_removed_fraction: float
    abnormal_total: int
    per_layer: dict[str, dict]  # layer_id -> {"wsr", "ratio", "abnormal"}
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "phase": self.phase,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
            "param_ratio_removed": self.param_ratio_removed,
            "flops_removed_fraction": self.flops_removed_fraction,
            "abnormal_total": self.abnormal_total,
            "per_layer": self.per_layer,
            "wall_time_s": self.wall_time_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        return cls(**d)


class ExperimentLog:
    """Append-only, strictly epoch-ordered record list."""

    def __init__(self, records: Optional[list[EpochRecord]] = None):
        self.records: list[EpochRecord] = []
        for r in records or []:
            self.append(r)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ContractError(
                f"log rows must be strictly epoch-ordered: {record.epoch} after {self.records[-1].epoch}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def last(self) -> EpochRecord:
        if not self.records:
            raise ContractError("log is empty")
        return self.records[-1]


@dataclass
class RunResult:
    """Outcome of a full (or stopped) run."""

    status: str  # "target_reached" | "budget_exhausted" | "stopped"
    warning: Optional[str]
    final_report: CompressionReport
    final_test_loss: float
    final_test_acc: float
    log: ExperimentLog


class PruneTrainer:
    """Drives one model through search and fine-tune on one dataset pair."""

    def __init__(
        self,
        model,
        train_data: Dataset,
        test_data: Dataset,
        config: PruneConfig,
        schedule: TrainSchedule,
        seed: int,
    ):
        self.model = model
        self.train_data = train_data
        self.test_data = test_data
        self.config = config.validate()
        self.schedule = schedule.validate()
        self.seed = int(seed)
        self.optimizer = SGD(
            list(model.named_parameters()),
            lr=schedule.lr,
            momentum=schedule.momentum,
            weight_decay=schedule.weight_decay,
            clip_max_norm=schedule.clip_max_norm,
        )
        self._weight_names = {
            e.layer_id: next(n for n, p in self.optimizer.named_params if p is e.conv.weight)
            for e in model.maskable_entries()
        }
        # mutable run state (everything a checkpoint must capture)
        self.epoch = 0  # completed global epochs
        self.search_epochs_used = 0
        self.phase = "search"  # "search" | "finetune" | "done"
        self.search_status: Optional[str] = None
        self.search_exit_ratio: Optional[float] = None
        self.last_prune_ratio: Optional[float] = None
        self.ratios: dict[str, float] = {}
        self.masks: dict[str, FilterMask] = {}
        self.log = ExperimentLog()

    # ------------------------------------------------------------------ run

    def run(
        self,
        stop_after: Optional[int] = None,
        on_epoch_end: Optional[Callable[["PruneTrainer"], None]] = None,
    ) -> RunResult:
        """Execute the remaining schedule; resumable at epoch boundaries.

        ``stop_after`` halts once that many global epochs have completed
        (status "stopped"), leaving the trainer ready for a later ``run``.
        ``on_epoch_end`` is called after each epoch's log row is appended.
        """
        while self.phase != "done":
            if stop_after is not None and self.epoch >= stop_after:
                return self._result("stopped")
            before = self.epoch
            if self.phase == "search":
                self._search_tick()
            elif self.phase == "finetune":
                if self.epoch - self.search_epochs_used >= self.schedule.finetune_epochs:
                    self.phase = "done"
                    continue
                self._train_epoch("finetune")
            if self.epoch > before and on_epoch_end is not None:
                on_epoch_end(self)
        return self._result(self.search_status or "target_reached")

    def _result(self, status: str) -> RunResult:
        report = global_compression_ratio(self.model, self.ratios)
        test_loss, test_acc = self.evaluate()
        warning = None
        if status == "budget_exhausted" and self.config.adaptive:
            exit_ratio = self.search_exit_ratio if self.search_exit_ratio is not None else 0.0
            warning = (
                f"compression target {self.config.tau} not reached within "
                f"{self.schedule.search_epochs} search epochs "
                f"(measured {exit_ratio:.4f} at search exit)"
            )
        return RunResult(
            status=status,
            warning=warning,
            final_report=report,
            final_test_loss=test_loss,
            final_test_acc=test_acc,
            log=self.log,
        )

    # --------------------------------------------------------------- search

    def _search_tick(self) -> None:
        """One search-loop iteration: target check, then (maybe) a prune epoch.

        The target comparison uses the removal measured immediately after the
        most recent prune pass.  Soft training lets masked filters regrow, so a
        fresh measurement here could sit below the target forever even while
        the per-layer ratios keep climbing; the post-prune figure is the level
        the upcoming hard stage would freeze if the search stopped now.  Before
        the first prune pass the current (dense) weights are measured, so a
        zero target exits without pruning anything.
        """
        measured = self.last_prune_ratio
        if measured is None:
            measured = global_compression_ratio(self.model, self.ratios).param_ratio_removed
        if self.config.adaptive and measured >= self.config.tau:
            self.search_status = "target_reached"
            self.search_exit_ratio = measured
            self.phase = "finetune"
            return
        if self.search_epochs_used >= self.schedule.search_epochs:
            self.search_status = "budget_exhausted"
            self.search_exit_ratio = measured
            self.phase = "finetune"
            return
        self._train_epoch("search")
        self.search_epochs_used += 1

    def _prune_pass(self) -> None:
        """Ratio update + mask selection + application for one search epoch."""
        sparsity = {lid: s.wsr for lid, s in measure_sparsity(self.model).items()}
        first = not self.ratios
        current = self.ratios if not first else {lid: 0.0 for lid in sparsity}
        self.ratios = update_all_ratios(current, sparsity, self.config, first_pass=first)
        masks: dict[str, FilterMask] = {}
        for e in self.model.maskable_entries():
            mask = make_mask(e.layer_id, e.conv.weight.data, self.ratios[e.layer_id])
            apply_mask(
                e.conv.weight.data,
                mask,
                velocity=self.optimizer.velocities[self._weight_names[e.layer_id]],
            )
            masks[e.layer_id] = mask
        self.masks = masks
        self.last_prune_ratio = global_compression_ratio(self.model, self.ratios).param_ratio_removed

    def _apply_hard_masks(self) -> None:
        for layer_id, mask in self.masks.items():
            entry = self.model.entry(layer_id)
            apply_mask(
                entry.conv.weight.data,
                mask,
                velocity=self.optimizer.velocities[self._weight_names[layer_id]],
            )

    # --------------------------------------------------------------- epochs

    def _train_epoch(self, phase: str) -> None:
        epoch = self.epoch + 1
        started = time.perf_counter()
        self.model.train()
        self.optimizer.lr = self.schedule.lr_at(epoch)

        recon_active = phase == "search" and self.config.recon_mode != "none"
        abnormal: dict[str, int] = {}
        if phase == "search":
            backup = None
            if recon_active:
                backup = backup_weights(
                    self.model, [e.layer_id for e in self.model.maskable_entries()], epoch
                )
            self._prune_pass()
        else:
            # hard stage: enter every epoch from the exactly-masked state
            self._apply_hard_masks()

        order = derive_rng(self.seed, "shuffle", epoch).permutation(len(self.train_data))
        aug_rng = derive_rng(self.seed, "augment", epoch)
        batch = self.schedule.batch_size
        steps = math.ceil(len(self.train_data) / batch)
        loss_sum = 0.0
        correct = 0
        for step in range(steps):
            idx = order[step * batch : (step + 1) * batch]
            x, y = self.train_data.batch(idx, augment_rng=aug_rng)
            if step == 0 and recon_active:
                probe = probe_step(self.model, self.optimizer, x, y)
                report = detect_abnormal(
                    self.model, self.masks, variant=self.config.detect, threshold_pool=self.config.threshold_pool
                )
                restored = reconstruct(
                    self.model,
                    self.optimizer,
                    self.masks,
                    report,
                    self.config.recon_mode,
                    backup=backup,
                    rng=derive_rng(self.seed, "reinit", epoch),
                    epoch=epoch,
                )
                abnormal = restored
                loss_sum += probe.loss * probe.batch_size
                correct += probe.batch_correct
            else:
                self.optimizer.zero_grad()
                logits = self.model.forward(Tensor(x))
                loss = softmax_cross_entropy(logits, y)
                correct += int(round(accuracy(logits.data, y) * len(y)))
                loss.backward()
                self.optimizer.step()
                loss_sum += float(loss.data) * len(y)
                if phase == "finetune" and self.masks:
                    self._apply_hard_masks()

        self.epoch = epoch
        test_loss, test_acc = self.evaluate()
        report = global_compression_ratio(self.model, self.ratios)
        per_layer = {
            lid: {"wsr": s.wsr, "ratio": s.ratio, "abnormal": int(abnormal.get(lid, 0))}
            for lid, s in report.per_layer.items()
        }
        self.log.append(
            EpochRecord(
                epoch=epoch,
                phase=phase,
                lr=self.optimizer.lr,
                train_loss=loss_sum / len(self.train_data),
                train_acc=correct / len(self.train_data),
                test_loss=test_loss,
                test_acc=test_acc,
                param_ratio_removed=report.param_ratio_removed,
                flops_removed_fraction=report.flops_removed_fraction,
                abnormal_total=sum(abnormal.values()),
                per_layer=per_layer,
                wall_time_s=time.perf_counter() - started,
            )
        )

    def evaluate(self) -> tuple[float, float]:
        """Test loss and accuracy with running statistics, no augmentation."""
        was_training = self.model.training
        self.model.eval()
        batch = self.schedule.batch_size
        loss_sum = 0.0
        correct = 0
        n = len(self.test_data)
        with no_grad():
            for start in range(0, n, batch):
                idx = np.arange(start, min(start + batch, n))
                x, y = self.test_data.batch(idx)
                logits = self.model.forward(Tensor(x))
                loss_sum += float(softmax_cross_entropy(logits, y).data) * len(y)
                correct += int(round(accuracy(logits.data, y) * len(y)))
        if was_training:
            self.model.train()
        return loss_sum / n, correct / n

    # ---------------------------------------------------------- persistence

    def state_dict(self) -> dict:
        """Complete run state; with the config it reconstructs the trainer."""
        from .nn import module_state

        return {
            "epoch": self.epoch,
            "search_epochs_used": self.search_epochs_used,
            "phase": self.phase,
            "search_status": self.search_status,
            "search_exit_ratio": self.search_exit_ratio,
            "last_prune_ratio": self.last_prune_ratio,
            "seed": self.seed,
            "ratios": dict(self.ratios),
            "masks": {lid: m.kept.copy() for lid, m in self.masks.items()},
            "model": module_state(self.model),
            "velocities": {name: v.copy() for name, v in self.optimizer.velocities.items()},
            "log": [r.to_dict() for r in self.log],
        }

    def load_state_dict(self, state: dict) -> None:
        from .nn import load_module_state

        self.epoch = int(state["epoch"])
        self.search_epochs_used = int(state["search_epochs_used"])
        self.phase = state["phase"]
        self.search_status = state["search_status"]
        raw_exit = state["search_exit_ratio"]
        self.search_exit_ratio = None if raw_exit is None else float(raw_exit)
        raw_prune = state["last_prune_ratio"]
        self.last_prune_ratio = None if raw_prune is None else float(raw_prune)
        self.seed = int(state["seed"])
        self.ratios = {k: float(v) for k, v in state["ratios"].items()}
        self.masks = {lid: FilterMask(lid, kept) for lid, kept in state["masks"].items()}
        load_module_state(self.model, state["model"])
        for name, v in state["velocities"].items():
            if name not in self.optimizer.velocities:
                raise ContractError(f"velocity for unknown parameter {name!r}")
            self.optimizer.velocities[name][...] = v
        self.log = ExperimentLog([EpochRecord.from_dict(d) for d in state["log"]])
