"""Versioned binary container shared by every persisted artifact.

Layout: magic ``DRAMA1``, format version, artifact kind, a block of
fixed-width little-endian header integers, then named tensor records
(name length, name bytes, rank, dims, raw float64 payload). Round trips
are bit-exact; strings ride along as float64 arrays carrying their UTF-8
bytes unchanged.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .errors import FormatError

MAGIC = b"DRAMA1"
FORMAT_VERSION = 1

KIND_ENCODER = 0
KIND_ADAPTER = 1
KIND_GATE = 2
KIND_INDEX = 3
KIND_REGISTRY = 4


def write_container(kind: int, header: Sequence[int],
                    tensors: Sequence[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", FORMAT_VERSION, kind)
    out += struct.pack("<I", len(header))
    for v in header:
        out += struct.pack("<q", int(v))
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", data.ndim)
        for d in data.shape:
            out += struct.pack("<q", d)
        out += data.tobytes()
    return bytes(out)


def read_container(blob: bytes, expect_kind: int | None = None) -> tuple[int, list[int], dict[str, np.ndarray]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not a DRAMA1 container")
    off = len(MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise FormatError("truncated container")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, kind = take("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"container kind {kind} does not match expected {expect_kind}")
    (n_header,) = take("<I")
    header = [take("<q")[0] for _ in range(n_header)]
    (n_tensors,) = take("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = take("<I")
        name = blob[off: off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        dims = tuple(take("<q")[0] for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise FormatError(f"truncated tensor payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += nbytes
        records[name] = arr
    if off != len(blob):
        raise FormatError("trailing bytes after last tensor record")
    return kind, header, records


def str_to_array(text: str) -> np.ndarray:
    """Pack a UTF-8 string into a float64 array, bit-preserving."""
    raw = text.encode("utf-8")
    padded = raw + b"\x00" * (-len(raw) % 8)
    packed = np.frombuffer(padded, dtype="<f8") if padded else np.empty(0, dtype="<f8")
    return np.concatenate([np.array([float(len(raw))]), packed])


def array_to_str(arr: np.ndarray) -> str:
    flat = np.ascontiguousarray(arr, dtype="<f8")
    if flat.size < 1:
        raise FormatError("string record missing length prefix")
    n = int(flat.reshape(-1)[0])
    raw = flat.reshape(-1)[1:].tobytes()[:n]
    return raw.decode("utf-8")
