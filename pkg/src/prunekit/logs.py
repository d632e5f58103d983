"""CSV serialization of experiment logs.

One row per epoch, RFC-4180 quoting via the stdlib ``csv`` module.  The
header line doubles as the schema version: readers reject files whose
column set differs from the one this build writes, so a silently
reinterpreted log cannot slip through.  The nested per-layer metrics ride
in a single JSON-encoded column, which keeps the flat columns plot-ready.
"""

from __future__ import annotations

import csv
import json

from .errors import DataError
from .trainer import EpochRecord

__all__ = ["LOG_COLUMNS", "write_log_csv", "read_log_csv"]

LOG_COLUMNS = [
    "epoch",
    "phase",
    "lr",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "param_ratio_removed",
    "flops_removed_fraction",
    "abnormal_total",
    "per_layer",
    "wall_time_s",
]

_FLOAT_COLUMNS = {
    "lr",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "param_ratio_removed",
    "flops_removed_fraction",
    "wall_time_s",
}
_INT_COLUMNS = {"epoch", "abnormal_total"}


def write_log_csv(path, records) -> None:
    """Write epoch records (any iterable of ``EpochRecord``) to ``path``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for record in records:
            d = record.to_dict()
            row = []
            for col in LOG_COLUMNS:
                value = d[col]
                if col == "per_layer":
                    value = json.dumps(value, sort_keys=True, separators=(",", ":"))
                row.append(value)
            writer.writerow(row)


def read_log_csv(path) -> list[EpochRecord]:
    """Read a log written by :func:`write_log_csv`, validating the schema."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read log: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty log file (missing header)")
    if rows[0] != LOG_COLUMNS:
        raise DataError(
            f"{path}: log schema mismatch — header {rows[0]!r} does not match "
            f"the columns this build writes ({LOG_COLUMNS!r})"
        )
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(LOG_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} fields, got {len(row)}")
        d = dict(zip(LOG_COLUMNS, row))
        try:
            for col in _INT_COLUMNS:
                d[col] = int(d[col])
            for col in _FLOAT_COLUMNS:
                d[col] = float(d[col])
            d["per_layer"] = json.loads(d["per_layer"])
        except (ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed field: {exc}") from exc
        records.append(EpochRecord.from_dict(d))
    return records
