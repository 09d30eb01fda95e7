"""Reader/writer for the ``BNT1`` binary tensor container.

Layout (all integers little-endian)::

    b"BNT1" | u8 rank | rank x u32 dims | u8 dtype [| u8 M] | payload

dtype 0 is float32, 1 is M-bit fixed point stored as u16 per value, and 2 is a
bit-plane tensor whose dims give the base shape ``(..., C)``; its payload is
the packed planes as u64 words, ``ceil(C*M / 64)`` per row.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .bitplane import BitPlaneTensor, FixedTensor, PackedBits, n_words

MAGIC = b"BNT1"
FLOAT32, FIXED, PACKED = 0, 1, 2


class ContainerError(ValueError):
    pass


def dumps(obj) -> bytes:
    if isinstance(obj, BitPlaneTensor):
        dims, code, extra = obj.base_shape, PACKED, bytes([obj.bit_width])
        payload = obj.words.astype("<u8").tobytes()
    elif isinstance(obj, FixedTensor):
        dims, code, extra = obj.shape, FIXED, bytes([obj.bit_width])
        payload = obj.values.astype("<u2").tobytes()
    else:
        arr = np.asarray(obj)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        dims, code, extra = arr.shape, FLOAT32, b""
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if len(dims) > 255:
        raise ContainerError("rank too large")
    head = MAGIC + struct.pack(f"<B{len(dims)}I", len(dims), *dims) + bytes([code]) + extra
    return head + payload


def loads(data: bytes):
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}")
    try:
        rank = data[4]
        dims = struct.unpack_from(f"<{rank}I", data, 5)
        pos = 5 + 4 * rank
        code = data[pos]
        pos += 1
        bits = None
        if code in (FIXED, PACKED):
            bits = data[pos]
            pos += 1
    except (IndexError, struct.error) as exc:
        raise ContainerError("truncated header") from exc
    body = data[pos:]
    count = int(np.prod(dims)) if dims else 1

    if code == FLOAT32:
        _check_len(body, 4 * count)
        return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)
    if code == FIXED:
        _check_len(body, 2 * count)
        return FixedTensor(np.frombuffer(body, dtype="<u2").reshape(dims), bits)
    if code == PACKED:
        c = dims[-1]
        nw = n_words(c * bits)
        rows = count // c
        _check_len(body, 8 * rows * nw)
        words = np.frombuffer(body, dtype="<u8").reshape(tuple(dims[:-1]) + (nw,))
        return BitPlaneTensor(tuple(dims), bits, PackedBits(words.astype(np.uint64), c * bits))
    raise ContainerError(f"unknown dtype code {code}")


def _check_len(body: bytes, expected: int):
    if len(body) != expected:
        raise ContainerError(f"payload is {len(body)} bytes, expected {expected}")


def write_tensor(path, obj) -> Path:
    path = Path(path)
    path.write_bytes(dumps(obj))
    return path


def read_tensor(path):
    return loads(Path(path).read_bytes())
