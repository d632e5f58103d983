"""Versioned binary checkpoints with byte-identical round trips.

Layout (all integers little-endian):

    8 bytes   magic ``b"PKCHECK\\0"``
    u32       format version (currently 1)
    u64       header length in bytes
    header    canonical JSON (sorted keys, no whitespace), UTF-8
    payload   float64 tensors in header-manifest order, then one packed
              bitmap per mask (``np.packbits`` over the kept flags)

The header carries everything JSON-representable from the trainer state
(epoch cursor, phase, seed, ratio map, log rows) plus the tensor and mask
manifests that describe the payload, plus caller metadata (the run config
and tool version).  Canonical JSON plus manifest-ordered payloads make
``save -> load -> save`` reproduce the file byte for byte, which is what
the persistence tests pin.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import __version__
from .errors import DataError

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "peek_checkpoint"]

MAGIC = b"PKCHECK\0"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    """A loaded checkpoint: trainer state plus the metadata it was saved with."""

    state: dict
    meta: dict
    format_version: int = FORMAT_VERSION


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def save_checkpoint(path, state: dict, meta: Optional[dict] = None) -> None:
    """Write a trainer ``state_dict`` (plus caller metadata) to ``path``.

    ``meta`` is stored verbatim under the header's ``meta`` key with the
    package version added, so every checkpoint records what produced it.
    """
    meta = dict(meta or {})
    meta.setdefault("tool_version", __version__)

    model = state["model"]
    velocities = state["velocities"]
    masks = state["masks"]
    header = {
        "run": {
            "epoch": state["epoch"],
            "search_epochs_used": state["search_epochs_used"],
            "phase": state["phase"],
            "search_status": state["search_status"],
            "search_exit_ratio": state["search_exit_ratio"],
            "last_prune_ratio": state["last_prune_ratio"],
            "seed": state["seed"],
            "ratios": state["ratios"],
            "log": state["log"],
        },
        "meta": meta,
        "model_tensors": [[name, list(a.shape)] for name, a in model.items()],
        "velocity_tensors": [[name, list(a.shape)] for name, a in velocities.items()],
        "masks": [[lid, int(kept.shape[0])] for lid, kept in masks.items()],
    }
    blob = _canonical_json(header)

    chunks = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
    for _, array in model.items():
        chunks.append(_tensor_bytes(array))
    for _, array in velocities.items():
        chunks.append(_tensor_bytes(array))
    for _, kept in masks.items():
        chunks.append(np.packbits(np.asarray(kept, dtype=bool)).tobytes())

    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _read_header(raw: bytes, path) -> tuple[dict, int]:
    if len(raw) < _HEAD.size:
        raise DataError(f"{path}: too short to be a checkpoint ({len(raw)} bytes)")
    magic, version, header_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint format version {version} "
            f"(this build reads version {FORMAT_VERSION})"
        )
    end = _HEAD.size + header_len
    if len(raw) < end:
        raise DataError(f"{path}: truncated header (expected {header_len} bytes)")
    try:
        header = json.loads(raw[_HEAD.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
    return header, end


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; the returned state plugs into ``load_state_dict``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint: {exc}") from exc
    header, offset = _read_header(raw, path)

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        end = offset + count
        if end > len(raw):
            raise DataError(f"{path}: truncated payload while reading {what}")
        piece = raw[offset:end]
        offset = end
        return piece

    def read_tensors(manifest, what: str) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in manifest:
            size = 8 * int(np.prod(shape, dtype=np.int64))
            data = take(size, f"{what} {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        return out

    model = read_tensors(header["model_tensors"], "tensor")
    velocities = read_tensors(header["velocity_tensors"], "velocity")
    masks = {}
    for lid, out_filters in header["masks"]:
        data = take((out_filters + 7) // 8, f"mask {lid!r}")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:out_filters]
        masks[lid] = bits.astype(bool)
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after payload")

    run = header["run"]
    state = {
        "epoch": run["epoch"],
        "search_epochs_used": run["search_epochs_used"],
        "phase": run["phase"],
        "search_status": run["search_status"],
        "search_exit_ratio": run["search_exit_ratio"],
        "last_prune_ratio": run["last_prune_ratio"],
        "seed": run["seed"],
        "ratios": run["ratios"],
        "log": run["log"],
        "model": model,
        "velocities": velocities,
        "masks": masks,
    }
    return Checkpoint(state=state, meta=header["meta"])


def peek_checkpoint(path) -> dict:
    """Header-only summary for the ``inspect`` subcommand (no tensor decode)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint: {exc}") from exc
    header, _ = _read_header(raw, path)
    run = header["run"]
    return {
        "format_version": FORMAT_VERSION,
        "epoch": run["epoch"],
        "phase": run["phase"],
        "search_status": run["search_status"],
        "seed": run["seed"],
        "ratios": run["ratios"],
        "masks": {lid: n for lid, n in header["masks"]},
        "tensors": len(header["model_tensors"]) + len(header["velocity_tensors"]),
        "log_rows": len(run["log"]),
        "meta": header["meta"],
    }
