"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BDVL"            magic
    u32                format version (1)
    u64                iteration
    u32                entry count
    entry*             u32 name length, UTF-8 name, u32 ndim, u64 dims[ndim],
                       f64 data[prod(dims)] in row-major order
    u32                CRC32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"BDVL"
VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray], iteration: int, version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<IQI", version, iteration, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> tuple[int, dict[str, np.ndarray]]:
    where = "data-io.load_checkpoint"
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise FormatError("not a BDVL checkpoint", where)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"checkpoint version {version}, reader supports {VERSION}", where)
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("CRC32 mismatch", where)
    iteration, count = struct.unpack_from("<QI", body, 8)
    pos = 20
    arrays = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            arrays[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed entry table: {e}", where) from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after entries", where)
    return iteration, arrays


def save_checkpoint(path, arrays: dict[str, np.ndarray], iteration: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(arrays, iteration))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
