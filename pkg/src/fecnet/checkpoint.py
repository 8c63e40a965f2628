"""Versioned little-endian checkpoint files.

Layout (all integers little-endian)::

    b"FECW"                     magic
    u16 version                 currently 1
    u32 n, n bytes              model config, compact sorted-key JSON
    u32 n, n bytes              metadata JSON (e.g. input normalisation)
    u32 count                   number of tensors, then per tensor:
        u16 n, n bytes          name (UTF-8)
        u8 dtype                1 = float32, 2 = float64
        u8 ndim, ndim x u32     shape
        raw values              row-major, little-endian
    32 bytes                    SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptCheckpointError
from .model import Model, ModelConfig

MAGIC = b"FECW"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    for blob in (_json_bytes(config), _json_bytes(meta or {})):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ConfigurationError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes):
    """Parse checkpoint bytes into ``(config, meta, tensors)``."""
    if len(blob) < 4 + 2 + 32 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic: not an FECW checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch (truncated or modified file)")
    view = memoryview(body)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError("unexpected end of checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    try:
        (n,) = struct.unpack("<I", take(4))
        config = json.loads(bytes(take(n)).decode("utf-8"))
        (n,) = struct.unpack("<I", take(4))
        meta = json.loads(bytes(take(n)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(shape) \
            .astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CorruptCheckpointError("trailing bytes after tensor table")
    return config, meta, tensors


def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], meta=None) -> str:
    """Write a checkpoint and return its SHA-256 hex digest."""
    blob = encode_checkpoint(config, tensors, meta)
    Path(path).write_bytes(blob)
    return blob[-32:].hex()


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def save_checkpoint(model: Model, path, meta: dict | None = None) -> str:
    return write_checkpoint(path, model.config.to_dict(), model.state_dict(),
                            meta if meta is not None else getattr(model, "meta", None))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Model:
    """Rebuild a model from ``path``; its metadata lands on ``model.meta``."""
    config_dict, meta, tensors = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(config_dict)
    except (TypeError, ConfigurationError) as exc:
        raise CorruptCheckpointError(f"invalid config echo: {exc}") from None
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = {k: (v, config.to_dict().get(k)) for k, v in expected_config.to_dict().items()
                if config.to_dict().get(k) != v}
        raise ConfigurationError(f"checkpoint config differs from expected: {diff}")
    dtypes = {a.dtype for a in tensors.values()}
    model = Model(config, dtype=dtypes.pop() if len(dtypes) == 1 else None)
    model.load_state_dict(tensors)
    model.meta = meta
    return model
