"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"PYRORCKPT"                      magic, 9 bytes
    u32 version                       currently 1
    u32 n, n bytes                    UTF-8 JSON echo of the architecture config
    u32 count                         number of tensor entries
    count x entry, sorted by (node id, name):
        u32 node id
        u16 n, n bytes                tensor name, UTF-8
        u8  dtype code                1 = float32, 2 = float64
        u8  ndim
        ndim x u32                    dimensions
        raw little-endian data
"""

import io
import json
import struct

import numpy as np

from .engine import ParamStore

MAGIC = b"PYRORCKPT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def dumps(params: ParamStore, config: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    echo = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    entries = [(nid, name, t) for nid in sorted(params.tensors)
               for name, t in sorted(params.tensors[nid].items())]
    buf.write(struct.pack("<I", len(entries)))
    code = _CODES[params.dtype]
    for nid, name, t in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<IH", nid, len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[ParamStore, dict]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a PYRORCKPT checkpoint")
    (version,) = unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = unpack("<I")
    config = json.loads(bytes(take(n)).decode("utf-8"))
    (count,) = unpack("<I")
    store = None
    for _ in range(count):
        nid, n = unpack("<IH")
        name = bytes(take(n)).decode("utf-8")
        code, ndim = unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        dtype = _DTYPES[code]
        shape = unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(shape)
        if store is None:
            store = ParamStore(dtype.newbyteorder("="))
        store.set(nid, name, arr)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return store if store is not None else ParamStore(), config


def save_checkpoint(path, params: ParamStore, config: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(params, config))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
