"""Versioned binary container for named float64 arrays.

Layout (little-endian)::

    b"PSCK" | u32 format_version | u64 header_len | header (canonical JSON)
    u32 blob_count | blob*
    blob := u16 name_len | name (utf-8) | u8 ndim | u32 dim * ndim | f64 data

The header is serialized with sorted keys and no whitespace, so
load -> save reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PSCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(header: Mapping) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(header: Mapping, blobs: Mapping[str, np.ndarray]) -> bytes:
    head = _canonical({**header, "format_version": FORMAT_VERSION})
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(head)), head,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version}")
    pos = 16
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last blob")
    return header, blobs


def save(path, header: Mapping, blobs: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, blobs))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
