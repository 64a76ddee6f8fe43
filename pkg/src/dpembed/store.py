"""Binary embedding store.

Layout: magic b"DPEB", version u16, dimension u32, count u32 (all
little-endian), then count*dimension float32 values row-major, then a JSON
trailer running to end of file. The trailer always carries "source_labels"
and a "normalized" flag; writers may add extra keys (e.g. pre-normalization
norms, release metadata).

Values are stored in float32, so a unit-norm vector read back is unit-norm
only to float32 precision; when the store is flagged normalized, the reader
renormalizes in float64 to restore the exact invariant (direction changes
by at most a few float32 ulps).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .aggregation import Embedding, EmbeddingSet

MAGIC = b"DPEB"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


def write_store(path, s: EmbeddingSet, extra: dict | None = None) -> None:
    """Write an embedding set (values as float32) plus its JSON trailer."""
    mat = s.matrix().astype("<f4")
    trailer = {
        "source_labels": list(s.source_labels),
        "normalized": s.all_normalized(),
    }
    if extra:
        for key in ("source_labels", "normalized"):
            if key in extra:
                raise ValueError(f"extra trailer data may not override {key!r}")
        trailer.update(extra)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, s.dimension, len(s)))
        fh.write(mat.tobytes(order="C"))
        fh.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def read_store(path) -> tuple[EmbeddingSet, dict]:
    """Read an embedding store; returns (set, trailer)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated store header")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    body_end = _HEADER.size + 4 * dim * count
    if len(raw) < body_end:
        raise ValueError(f"{path}: store data truncated")
    mat = np.frombuffer(raw[_HEADER.size : body_end], dtype="<f4")
    mat = mat.reshape(count, dim).astype(np.float64)
    try:
        trailer = json.loads(raw[body_end:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: store trailer truncated or corrupt: {exc}") from exc
    labels = tuple(trailer.get("source_labels", ()))
    normalized = bool(trailer.get("normalized", False))
    members = []
    for row in mat:
        if normalized:
            row = row / np.linalg.norm(row)
        members.append(Embedding(values=row, normalized=normalized))
    return EmbeddingSet(members=tuple(members), source_labels=labels), trailer
