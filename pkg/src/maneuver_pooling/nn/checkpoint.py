"""Binary container for named parameter tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"MPCK"
    version    u8        1
    count      u32       number of tensors
    then, per tensor, in ascending name order:
      name_len u16
      name     name_len bytes, UTF-8
      ndim     u8
      dims     ndim x u32
      values   prod(dims) x float32 (IEEE 754, little-endian, C order)

Nothing else is stored; identical parameters always give identical bytes.
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from ..errors import DataError

MAGIC = b"MPCK"
VERSION = 1


def dumps(state) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(state))]
    for name in sorted(state):
        value = np.asarray(state[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes):
    if blob[:4] != MAGIC:
        raise DataError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 9
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    if pos != len(blob):
        raise DataError(f"trailing {len(blob) - pos} bytes in checkpoint")
    return state


def save(path, state):
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
