"""Run configuration: one JSON document describing a complete experiment.

A config names the model, the data source, the pruning policy, and the
training schedule; together with a seed that pins the entire run.  The
parsed form round-trips through ``to_dict`` so every artifact a run writes
can embed the exact configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .data import Dataset, load_cifar10, synthetic_pair
from .errors import ConfigError
from .models import ModelSpec
from .policy import PruneConfig
from .trainer import TrainSchedule

__all__ = [
    "DataConfig",
    "RunConfig",
    "load_run_config",
    "parse_run_config",
    "apply_overrides",
]


@dataclass
class DataConfig:
    """Dataset source: class-conditional synthetic blobs or a CIFAR-10 directory.

    For ``kind="cifar10"`` only ``path`` is read; the synthetic fields are
    ignored because the on-disk format fixes 10 classes of 3x32x32 images.
    Synthetic data defaults its seed to the run seed so paired arms of an
    experiment see identical batches; set ``seed`` to pin the data
    independently of the model/shuffle seed.
    """

    kind: str = "synthetic"
    classes: int = 4
    train_size: int = 256
    test_size: int = 64
    shape: tuple[int, int, int] = (3, 16, 16)
    separability: float = 0.9
    seed: Optional[int] = None
    path: Optional[str] = None

    def validate(self) -> "DataConfig":
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'cifar10', got {self.kind!r}")
        if self.kind == "cifar10":
            if not self.path:
                raise ConfigError("data.path is required when data.kind is 'cifar10'")
            return self
        if self.classes < 2:
            raise ConfigError(f"data.classes must be >= 2, got {self.classes}")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("data.train_size and data.test_size must be >= 1")
        if len(self.shape) != 3 or any(int(d) < 1 for d in self.shape):
            raise ConfigError(f"data.shape must be (channels, H, W) positive, got {self.shape}")
        if not 0.0 <= self.separability <= 1.0:
            raise ConfigError(f"data.separability must lie in [0, 1], got {self.separability}")
        return self

    @property
    def model_classes(self) -> int:
        return 10 if self.kind == "cifar10" else self.classes

    @property
    def model_shape(self) -> tuple[int, int, int]:
        return (3, 32, 32) if self.kind == "cifar10" else tuple(self.shape)

    def load(self, run_seed: int) -> tuple[Dataset, Dataset]:
        if self.kind == "cifar10":
            return load_cifar10(self.path)
        seed = run_seed if self.seed is None else self.seed
        return synthetic_pair(
            self.classes,
            self.train_size,
            self.test_size,
            shape=tuple(self.shape),
            seed=seed,
            separability=self.separability,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return _construct(cls, d, "data").validate()


@dataclass
class RunConfig:
    """Everything a run needs; serializable, embedded verbatim in outputs.

    The top-level ``seed`` pins the whole run: batch order, augmentation,
    and — unless the document sets them explicitly — model initialization
    (``model.seed``) and synthetic data (``data.seed``) follow it, so a
    seed grid varies everything together while paired arms stay paired.
    """

    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seed: int = 0
    out_dir: Optional[str] = None
    init_checkpoint: Optional[str] = None

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.data.validate()
        self.prune.validate()
        self.schedule.validate()
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.model.classes != self.data.model_classes:
            raise ConfigError(
                f"model.classes ({self.model.classes}) does not match the "
                f"dataset's class count ({self.data.model_classes})"
            )
        if tuple(self.model.input_shape) != self.data.model_shape:
            raise ConfigError(
                f"model.input_shape {tuple(self.model.input_shape)} does not match "
                f"the dataset's image shape {self.data.model_shape}"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "prune": self.prune.to_dict(),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "init_checkpoint": self.init_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(d).__name__}")
        known = {"model", "data", "prune", "schedule", "seed", "out_dir", "init_checkpoint"}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown config section (expected one of {sorted(known)})")
        model_d = dict(d.get("model", {}))
        if "input_shape" in model_d:
            model_d["input_shape"] = tuple(model_d["input_shape"])
        if "seed" not in model_d:
            model_d["seed"] = int(d.get("seed", 0))
        return cls(
            model=_construct(ModelSpec, model_d, "model"),
            data=DataConfig.from_dict(d.get("data", {})) if "data" in d else DataConfig(),
            prune=_construct(PruneConfig, d.get("prune", {}), "prune"),
            schedule=_construct(TrainSchedule, d.get("schedule", {}), "schedule"),
            seed=int(d.get("seed", 0)),
            out_dir=d.get("out_dir"),
            init_checkpoint=d.get("init_checkpoint"),
        ).validate()


def _construct(cls, d: dict, path: str):
    """Build a config dataclass from a partial dict with unknown-key checks."""
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object, got {type(d).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field (expected one of {sorted(allowed)})")
    return cls(**d)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a JSON config document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(raw)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return parse_run_config(text, source=str(path))


_RECON_ALIASES = {"reinit": "reinitialize"}


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    adaptive: Optional[str] = None,
    uniform_ratio: Optional[float] = None,
    recon: Optional[str] = None,
    detect: Optional[str] = None,
    threshold_pool: Optional[str] = None,
) -> RunConfig:
    """Apply command-line flag values on top of a parsed config.

    Flags use the CLI spellings (``--adaptive on|off``, ``--recon reinit``);
    this maps them onto config fields and re-validates the result.  A seed
    override reseeds the model initialization along with the run, matching
    how an unpinned document treats its top-level seed.
    """
    prune_kw = {}
    if adaptive is not None:
        if adaptive not in ("on", "off"):
            raise ConfigError(f"--adaptive must be 'on' or 'off', got {adaptive!r}")
        prune_kw["adaptive"] = adaptive == "on"
    if uniform_ratio is not None:
        prune_kw["uniform_ratio"] = uniform_ratio
    if recon is not None:
        prune_kw["recon_mode"] = _RECON_ALIASES.get(recon, recon)
    if detect is not None:
        prune_kw["detect"] = detect
    if threshold_pool is not None:
        prune_kw["threshold_pool"] = threshold_pool

    run_kw = {}
    if seed is not None:
        run_kw["seed"] = seed
        run_kw["model"] = dataclasses.replace(config.model, seed=seed)
    if out is not None:
        run_kw["out_dir"] = out
    if prune_kw:
        run_kw["prune"] = dataclasses.replace(config.prune, **prune_kw)
    if not run_kw:
        return config
    return dataclasses.replace(config, **run_kw).validate()
