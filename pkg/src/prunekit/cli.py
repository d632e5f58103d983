"""Command-line front door.

Subcommands cover the training run itself plus the diagnostic protocols
(ablation grid, per-layer sparsity trace, single-layer sensitivity, the
gradient/accuracy pairing) and checkpoint inspection.  Every command that
trains writes its output directory so a run is reconstructible from disk:
``config.json`` (re-parseable by ``--config``), the command's CSV, and a
``summary.json`` embedding the config and tool version.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile

from . import __version__
from .checkpoint import peek_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_run_config
from .errors import ConfigError, DataError, NumericalError
from .experiments import (
    ablate,
    build_trainer,
    gradient_accuracy,
    sensitivity,
    uniform_ratio_for_flops,
    wsr_trace,
)
from .logs import write_log_csv

__all__ = ["main", "build_parser"]


# -- artifact helpers --------------------------------------------------------


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _prepare_out_dir(config: RunConfig) -> str:
    if not config.out_dir:
        raise ConfigError("an output directory is required (--out or config out_dir)")
    os.makedirs(config.out_dir, exist_ok=True)
    _write_json(os.path.join(config.out_dir, "config.json"), config.to_dict())
    return config.out_dir


def _write_summary(out_dir: str, config: RunConfig, body: dict) -> None:
    payload = {"tool_version": __version__, "config": config.to_dict(), **body}
    _write_json(os.path.join(out_dir, "summary.json"), payload)


def _save_checkpoint_atomic(path: str, state: dict, meta: dict) -> None:
    """Write via a temp file so a crash mid-save never clobbers the last good one."""
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        save_checkpoint(tmp, state, meta)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config)
    return apply_overrides(
        config,
        seed=args.seed,
        out=args.out,
        adaptive=args.adaptive,
        uniform_ratio=args.uniform_ratio,
        recon=args.recon,
        detect=args.detect,
        threshold_pool=args.threshold_pool,
    )


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _parse_ratios(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"--ratios must be comma-separated numbers, got {text!r}") from exc


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


# -- subcommands --------------------------------------------------------------


def cmd_run(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(config)
    trainer = build_trainer(config)
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    meta = {"config": config.to_dict()}

    def checkpoint_each_epoch(t) -> None:
        _save_checkpoint_atomic(ckpt_path, t.state_dict(), meta)

    try:
        result = trainer.run(on_epoch_end=checkpoint_each_epoch)
    except NumericalError:
        # Keep what the run produced so far: the per-epoch checkpoint on disk
        # is the last good state; the log covers the completed epochs.
        write_log_csv(os.path.join(out_dir, "log.csv"), trainer.log)
        raise
    write_log_csv(os.path.join(out_dir, "log.csv"), trainer.log)
    _save_checkpoint_atomic(ckpt_path, trainer.state_dict(), meta)
    _write_summary(
        out_dir,
        config,
        {
            "status": result.status,
            "warning": result.warning,
            "epochs": trainer.epoch,
            "final_test_acc": result.final_test_acc,
            "final_test_loss": result.final_test_loss,
            "param_ratio_removed": result.final_report.param_ratio_removed,
            "flops_removed_fraction": result.final_report.flops_removed_fraction,
            "per_layer_ratios": trainer.ratios,
            "wall_time_s": sum(r.wall_time_s for r in trainer.log),
        },
    )
    if result.warning:
        print(f"warning: {result.warning}", file=sys.stderr)
    print(
        f"status={result.status} epochs={trainer.epoch} "
        f"test_acc={result.final_test_acc:.4f} "
        f"params_removed={result.final_report.param_ratio_removed:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(config)
    seeds = _parse_seeds(args.seeds)
    result = ablate(
        config,
        seeds,
        pretrain_epochs=args.pretrain_epochs,
        uniform_ratio=args.uniform_ratio,
        progress=_progress,
    )
    rows = result.rows()
    fieldnames = ["arm"] + [f"seed_{s}" for s in seeds] + ["mean", "mean_removed"]
    _write_csv(os.path.join(out_dir, "ablation.csv"), fieldnames, rows)
    _write_summary(
        out_dir,
        config,
        {
            "seeds": seeds,
            "uniform_ratio": result.uniform_ratio,
            "pretrain_epochs": result.pretrain_epochs,
            "accuracy": result.accuracy,
            "statuses": result.statuses,
            "means": {arm: result.mean(arm) for arm in result.accuracy},
        },
    )
    for row in rows:
        print(f"{row['arm']}: mean test_acc {row['mean']:.4f}")
    return 0


def cmd_wsr_trace(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(config)
    rows = wsr_trace(config)
    fieldnames = list(rows[0].keys())
    _write_csv(os.path.join(out_dir, "wsr_trace.csv"), fieldnames, rows)
    _write_summary(out_dir, config, {"epochs": rows[-1]["epoch"], "layers": fieldnames[1:]})
    print(f"traced {rows[-1]['epoch']} epochs over {len(fieldnames) - 1} layers")
    return 0


def cmd_sensitivity(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(config)
    rows = sensitivity(config, args.layer, _parse_ratios(args.ratios), args.finetune_epochs)
    _write_csv(
        os.path.join(out_dir, "sensitivity.csv"),
        ["layer", "ratio", "pruned_filters", "test_loss", "test_acc"],
        rows,
    )
    _write_summary(out_dir, config, {"layer": args.layer, "rows": rows})
    for row in rows:
        print(f"ratio {row['ratio']}: test_acc {row['test_acc']:.4f}")
    return 0


def cmd_gradient_accuracy(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(config)
    rows = gradient_accuracy(
        config,
        _parse_seeds(args.seeds),
        fraction=args.fraction,
        pretrain_epochs=args.pretrain_epochs,
        progress=_progress,
    )
    _write_csv(
        os.path.join(out_dir, "gradient_accuracy.csv"),
        ["seed", "arm", "max_grad", "test_acc", "acc_drop"],
        rows,
    )
    _write_summary(out_dir, config, {"fraction": args.fraction, "rows": rows})
    for row in rows:
        print(
            f"seed {row['seed']} {row['arm']}: max_grad {row['max_grad']:.4f} "
            f"acc_drop {row['acc_drop']:.4f}"
        )
    return 0


def cmd_inspect(args) -> int:
    info = peek_checkpoint(args.checkpoint)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_flops_ratio(args) -> int:
    from .models import build_model

    config = _load_config(args)
    model = build_model(config.model)
    ratio = uniform_ratio_for_flops(model, args.target)
    print(f"{ratio:.6f}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunekit",
        description="Iterative filter-pruning trainer and its diagnostic experiments.",
    )
    parser.add_argument("--version", action="version", version=f"prunekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the JSON run config")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--out", default=None, help="output directory (overrides config)")
    common.add_argument("--adaptive", choices=["on", "off"], default=None)
    common.add_argument("--uniform-ratio", type=float, default=None, dest="uniform_ratio")
    common.add_argument(
        "--recon", choices=["reload", "reactivate", "reinit", "none"], default=None
    )
    common.add_argument("--detect", choices=["weight-norm", "grad-norm"], default=None)
    common.add_argument(
        "--threshold-pool", choices=["all", "pruned"], default=None, dest="threshold_pool"
    )

    p = sub.add_parser("run", parents=[common], help="execute one prune/train run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser(
        "ablate", parents=[common], help="2x2 grid: uniform/adaptive x with/without restore"
    )
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--pretrain-epochs", type=int, default=10, dest="pretrain_epochs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser(
        "wsr-trace", parents=[common], help="per-epoch per-layer weight sparsity CSV"
    )
    p.set_defaults(func=cmd_wsr_trace)

    p = sub.add_parser(
        "sensitivity", parents=[common], help="accuracy vs. pruning ratio for one layer"
    )
    p.add_argument("--layer", required=True, help="maskable layer id to prune")
    p.add_argument("--ratios", default="0.0,0.2,0.4,0.6,0.8", help="comma-separated grid")
    p.add_argument("--finetune-epochs", type=int, default=5, dest="finetune_epochs")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser(
        "gradient-accuracy",
        parents=[common],
        help="lower- vs upper-importance-half pruning: gradient size and accuracy drop",
    )
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9", help="comma-separated seed list")
    p.add_argument("--fraction", type=float, default=0.5, help="fraction of filters to cut")
    p.add_argument("--pretrain-epochs", type=int, default=10, dest="pretrain_epochs")
    p.set_defaults(func=cmd_gradient_accuracy)

    p = sub.add_parser(
        "flops-ratio", parents=[common], help="uniform ratio matching a FLOPs-removal target"
    )
    p.add_argument("--target", type=float, required=True, help="FLOPs removal fraction")
    p.set_defaults(func=cmd_flops_ratio)

    p = sub.add_parser("inspect", help="dump checkpoint metadata as JSON")
    p.add_argument("checkpoint", help="path to a checkpoint file")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
