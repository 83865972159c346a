"""Binary model checkpoints.

Layout (little-endian)::

    magic      8 bytes  b"GVITCKPT"
    version    u32
    dtype      u8       0 = float32, 1 = float64
    spec       u32 length + UTF-8 graph spec text
    meta       u32 length + UTF-8 JSON (sorted keys)
    count      u32
    tensors    count x (u16 name length, name, tensor)

Tensors follow the model's declaration order: per layer, parameters then
buffers.  Each tensor uses :func:`gelanvit.tensor.write_tensor`.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from . import fileio
from .tensor import read_tensor, write_tensor
from .zoo import Model, parse_spec, format_spec

MAGIC = b"GVITCKPT"
FORMAT_VERSION = 1
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Checkpoint cannot be loaded."""


def checkpoint_bytes(model: Model, meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IB", FORMAT_VERSION, _DTYPE_CODE[model.dtype]))
    for block in (format_spec(model.spec), json.dumps(meta or {}, sort_keys=True)):
        raw = block.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    items = model.state_arrays()
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> None:
    """Write atomically; an interrupted save leaves any previous file intact."""
    fileio.write_bytes(path, checkpoint_bytes(model, meta))


def _read(stream, n: int, what: str) -> bytes:
    raw = stream.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def read_checkpoint(data: bytes) -> tuple:
    """Parse checkpoint bytes into ``(model, meta)``; nothing is returned on any error."""
    s = io.BytesIO(data)
    if _read(s, len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, code = struct.unpack("<IB", _read(s, 5, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    dtypes = {v: k for k, v in _DTYPE_CODE.items()}
    if code not in dtypes:
        raise CheckpointError(f"unknown dtype code {code}")
    blocks = []
    for what in ("spec", "meta"):
        (n,) = struct.unpack("<I", _read(s, 4, f"{what} length"))
        blocks.append(_read(s, n, what).decode("utf-8"))
    spec = parse_spec(blocks[0])
    meta = json.loads(blocks[1])
    model = Model(spec, seed=0, dtype=dtypes[code])
    expected = model.state_arrays()
    (count,) = struct.unpack("<I", _read(s, 4, "tensor count"))
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, spec {spec.name!r} needs {len(expected)}")
    loaded = []
    for name, arr in expected:
        (n,) = struct.unpack("<H", _read(s, 2, "tensor name length"))
        got = _read(s, n, "tensor name").decode("utf-8")
        if got != name:
            raise CheckpointError(f"tensor {got!r} found where {name!r} was expected")
        try:
            value = read_tensor(s, dtypes[code])
        except EOFError as exc:
            raise CheckpointError(f"truncated checkpoint in tensor {name!r}: {exc}") from None
        if value.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has shape {value.shape}, spec needs {arr.shape}")
        loaded.append(value)
    if s.read(1):
        raise CheckpointError("trailing bytes after the last tensor")
    for (_, arr), value in zip(expected, loaded):
        arr[...] = value
    return model, meta


def load_checkpoint(path) -> Model:
    return read_checkpoint(Path(path).read_bytes())[0]


def load_checkpoint_with_meta(path) -> tuple:
    return read_checkpoint(Path(path).read_bytes())
