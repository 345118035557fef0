"""PEMB1 embedding file format.

Binary layout (all integers little-endian):

    offset 0   5 bytes   magic "PEMB1"
    offset 5   u32       dim
    offset 9   u64       count
    offset 17  u8        normalized flag (1 = rows are unit vectors)
    offset 18  count*dim float32, row-major vector block
    then, per row in order: u32 byte length + UTF-8 item id

This format is the file boundary between the engine and any external
embedding backend; both sides must produce and consume it bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"PEMB1"
_HEADER = struct.Struct("<IQB")  # dim, count, normalized


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (count, dim)
    ids: list[str]
    normalized: bool

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("ids must align with vector rows")


def write_pemb(path: str, table: EmbeddingTable) -> None:
    vecs = np.ascontiguousarray(table.vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(vecs.shape[1], vecs.shape[0], 1 if table.normalized else 0))
        f.write(vecs.tobytes())
        for item_id in table.ids:
            raw = item_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def read_pemb(path: str) -> EmbeddingTable:
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:5]!r}, expected {MAGIC!r}")
    if len(data) < 5 + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    dim, count, normalized = _HEADER.unpack_from(data, 5)
    if dim == 0:
        raise FormatError(f"{path}: zero embedding dimension")
    offset = 5 + _HEADER.size
    nbytes = count * dim * 4
    if len(data) < offset + nbytes:
        raise FormatError(f"{path}: truncated vector block")
    vecs = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
    vecs = vecs.reshape(count, dim).copy()
    offset += nbytes
    ids: list[str] = []
    for i in range(count):
        if len(data) < offset + 4:
            raise FormatError(f"{path}: truncated id table at row {i}")
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if len(data) < offset + n:
            raise FormatError(f"{path}: truncated id at row {i}")
        ids.append(data[offset : offset + n].decode("utf-8"))
        offset += n
    return EmbeddingTable(vectors=vecs, ids=ids, normalized=bool(normalized))
