"""Named-tensor-block container used for all parameter checkpoints.

Layout (little-endian): magic "HSRLPN1\\0", u32 version, u32 block count,
then per block: u16 name length, utf-8 name, u8 ndim, u32 dims, float64
row-major data. Blocks keep insertion order, so save(load(f)) is
byte-identical to f.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"HSRLPN1\x00"
CHECKPOINT_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    named: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"block {i} name length"))
        name = take(name_len, f"block {i} name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"block {name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"block {name} shape"))
        size = int(np.prod(shape)) if ndim else 1
        raw = take(8 * size, f"block {name} data")
        named[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return named
