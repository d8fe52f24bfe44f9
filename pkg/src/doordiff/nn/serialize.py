"""Deterministic checkpoint format: one JSON header line, then raw float64.

Layout:
    line 1: UTF-8 JSON ``{"format_version": 1, "meta": {...}, "params":
            [{"name": ..., "shape": [...], "offset": ...}, ...]}`` + newline
    rest:   the concatenation of every array as little-endian float64, in
            header order; ``offset`` counts elements from the blob start.

The byte stream is a pure function of its inputs (no timestamps), so
identical saves are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata dict."""
    entries = []
    offset = 0
    blobs = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "params": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (arrays, meta).  Any structural problem
    raises CheckpointError naming the file and the offending entry."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint {path}: malformed header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path}: format version {version!r}, expected {FORMAT_VERSION}")
    data = np.frombuffer(blob, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    total = 0
    for entry in header.get("params", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        offset = entry["offset"]
        size = 1
        for s in shape:
            size *= s
        if offset + size > data.size:
            raise CheckpointError(
                f"checkpoint {path}: entry {name!r} needs {offset + size} values, file has {data.size}"
            )
        arrays[name] = data[offset : offset + size].reshape(shape).copy()
        total = max(total, offset + size)
    if total != data.size:
        raise CheckpointError(f"checkpoint {path}: {data.size - total} trailing values not claimed by header")
    return arrays, header.get("meta", {})


def load_into_params(path, params) -> dict:
    """Load a checkpoint into an existing parameter list, validating that the
    stored names and shapes exactly match the model's parameters."""
    arrays, meta = load_checkpoint(path)
    by_name = {p.name: p for p in params}
    stored = set(arrays)
    expected = set(by_name)
    if stored != expected:
        missing = sorted(expected - stored)
        extra = sorted(stored - expected)
        raise CheckpointError(
            f"checkpoint {path}: parameter names do not match model "
            f"(missing {missing[:5]}, unexpected {extra[:5]})"
        )
    for name, p in by_name.items():
        if arrays[name].shape != p.values.shape:
            raise CheckpointError(
                f"checkpoint {path}: shape mismatch for {name!r}: "
                f"stored {arrays[name].shape}, model {p.values.shape}"
            )
    for name, p in by_name.items():
        p.values[...] = arrays[name]
    return meta
