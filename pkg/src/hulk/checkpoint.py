"""Binary checkpoint container.

Layout (little-endian): magic ``HULKCKPT``, uint32 version, uint32 entry
count, then per entry: uint16 name length, UTF-8 name, uint8 dtype code
(0 = f32, 1 = f64), uint8 rank, uint32 dims[rank], raw row-major data.
"""
from __future__ import annotations

import struct
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np

MAGIC = b"HULKCKPT"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _entries(tensors) -> Iterable[Tuple[str, np.ndarray]]:
    return tensors.items() if isinstance(tensors, Mapping) else tensors


def encode_checkpoint(tensors: Union[Mapping[str, np.ndarray], Iterable]) -> bytes:
    items = []
    seen = set()
    for name, arr in _entries(tensors):
        if name in seen:
            raise CheckpointError(f"name collision: {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]!r}...")
        if arr.ndim > 255:
            raise CheckpointError(f"entry {name!r}: rank {arr.ndim} too large")
        items.append((raw, _CODES[dt], arr.shape, np.ascontiguousarray(arr, dtype=dt).tobytes()))
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for raw, code, shape, data in items:
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", code, len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        out.append(data)
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if len(buf) < 16:
        raise CheckpointError("truncated header")
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 16
    out: Dict[str, np.ndarray] = {}

    def take(k, n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated at entry {k}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for k in range(count):
        (nlen,) = struct.unpack("<H", take(k, 2))
        name = take(k, nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(k, 2))
        if code not in _DTYPES:
            raise CheckpointError(f"entry {k} ({name!r}): unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(k, 4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(k, size), dtype=dt).reshape(shape).copy()
        if name in out:
            raise CheckpointError(f"name collision: {name!r}")
        out[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return out


def save_checkpoint(path, tensors) -> None:
    data = encode_checkpoint(tensors)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def bytes_to_array(b: bytes) -> np.ndarray:
    """Opaque byte payloads (config JSON, hashes) ride along as f64 arrays."""
    return np.frombuffer(b, dtype=np.uint8).astype(np.float64)


def array_to_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.ndim != 1 or np.any((a < 0) | (a > 255) | (a != np.round(a))):
        raise CheckpointError("entry is not a byte payload")
    return a.astype(np.uint8).tobytes()
