"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"FGAMCKPT"
    version      u16       1
    arch id      u16       1 = image conv net, 2 = byte-sequence net
    n_tensors    u32
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (architecture config + training metadata)
    shape table  n_tensors x { name_len u16, name utf-8, ndim u8, dims u32 * ndim }
    payload      every tensor in table order, float32 little-endian, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from fgam.errors import CheckpointError
from fgam.neural.models import ByteSeqNet, ImageConvNet, Model

MAGIC = b"FGAMCKPT"
VERSION = 1
ARCH_IDS = {ImageConvNet.arch: 1, ByteSeqNet.arch: 2}
ARCH_BY_ID = {1: ImageConvNet, 2: ByteSeqNet}


def dumps(model: Model) -> bytes:
    meta = json.dumps({"config": model.config, "metadata": model.metadata}, sort_keys=True).encode()
    names = sorted(model.params)
    out = bytearray(MAGIC)
    out += struct.pack("<HHII", VERSION, ARCH_IDS[model.arch], len(names), len(meta))
    out += meta
    for name in names:
        shape = model.params[name].shape
        enc = name.encode()
        out += struct.pack("<H", len(enc)) + enc + struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
    for name in names:
        out += np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
    return bytes(out)


def loads(blob: bytes) -> Model:
    try:
        return _loads(blob)
    except (struct.error, UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _loads(blob: bytes) -> Model:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, arch_id, n, meta_len = struct.unpack_from("<HHII", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if arch_id not in ARCH_BY_ID:
        raise CheckpointError(f"unknown architecture id {arch_id}")
    pos = 20
    meta = json.loads(blob[pos : pos + meta_len])
    pos += meta_len
    table = []
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * count > len(blob):
            raise CheckpointError(f"payload truncated at tensor {name}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * count
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after payload")
    return ARCH_BY_ID[arch_id](params, meta["config"], meta["metadata"])


def save(model: Model, path: Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: Path) -> Model:
    return loads(Path(path).read_bytes())
