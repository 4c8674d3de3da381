"""Bit-exact container for precomputed utterance embeddings (SPCE files).

Layout: magic "SPCE", u32 version (=1), u32 dim, u32 count, then one record
per utterance in ascending utterance_id order: u16 id length, UTF-8 id bytes,
dim little-endian float32 values. The canonical ordering makes files diffable
and independent of producer scheduling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SPCE"
VERSION = 1
HEADER = struct.Struct("<4sIII")


class EmbeddingFileError(Exception):
    """Base class for SPCE read failures."""


class BadMagicError(EmbeddingFileError):
    pass


class UnsupportedVersionError(EmbeddingFileError):
    pass


class TruncatedFileError(EmbeddingFileError):
    pass


@dataclass
class EmbeddingRecord:
    utterance_id: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)


def write_embeddings(records: list[EmbeddingRecord], path: str | Path) -> int:
    """Write records in canonical id order; returns the byte count written."""
    ids = [r.utterance_id for r in records]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})[0]
        raise ValueError(f"duplicate utterance_id {dup!r}")
    dims = {r.vector.shape for r in records}
    if len(dims) > 1:
        raise ValueError(f"mixed embedding shapes {sorted(dims)}")
    for r in records:
        if r.vector.ndim != 1:
            raise ValueError(f"{r.utterance_id}: vector must be 1-D")
        if not np.all(np.isfinite(r.vector)):
            raise ValueError(f"{r.utterance_id}: non-finite embedding values")

    dim = records[0].vector.shape[0] if records else 0
    parts = [HEADER.pack(MAGIC, VERSION, dim, len(records))]
    for r in sorted(records, key=lambda r: r.utterance_id):
        id_bytes = r.utterance_id.encode("utf-8")
        if len(id_bytes) > 0xFFFF:
            raise ValueError(f"utterance_id too long ({len(id_bytes)} bytes)")
        parts.append(struct.pack("<H", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(r.vector.astype("<f4", copy=False).tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def read_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    """Read and validate an SPCE file; never over-allocates on corrupt input."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"file shorter than header ({len(raw)} bytes)")
    magic, version, dim, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    # cheapest possible lower bound before touching any record
    if len(raw) - HEADER.size < count * (2 + 4 * dim):
        raise TruncatedFileError(
            f"{count} records of dim {dim} cannot fit in {len(raw)} bytes"
        )

    records = []
    pos = HEADER.size
    vec_bytes = 4 * dim
    for i in range(count):
        if pos + 2 > len(raw):
            raise TruncatedFileError(f"record {i}: missing id length")
        (id_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + id_len + vec_bytes > len(raw):
            raise TruncatedFileError(f"record {i}: truncated")
        try:
            uid = raw[pos : pos + id_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise TruncatedFileError(f"record {i}: invalid UTF-8 id") from e
        pos += id_len
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).copy()
        pos += vec_bytes
        records.append(EmbeddingRecord(uid, vec))
    if pos != len(raw):
        raise TruncatedFileError(f"{len(raw) - pos} trailing bytes after records")
    return records
