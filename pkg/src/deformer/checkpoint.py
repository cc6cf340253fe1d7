"""Weight checkpoints.

Layout (little-endian)::

    magic b"DFWT" | version u32 | config (ModelConfig.to_bytes) | k u16 |
    fingerprint 32B | parameters as float32, canonical order of param_shapes

``k`` is the split layer of a decomposed model, or 0xFFFF for a full model.
Values are stored as float32, so the recorded fingerprint is that of the
float32-rounded weights; loading recomputes it and refuses a mismatch.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .decomposed import DeformerModel
from .encoder import CONFIG_STRUCT_SIZE, EncoderWeights, ModelConfig, param_shapes
from .errors import FormatError, StaleArtifactError
from .tensor import Tensor

MAGIC = b"DFWT"
VERSION = 1
FULL = 0xFFFF
_PREFIX = struct.Struct("<4sI")


def encode_checkpoint(model: EncoderWeights | DeformerModel) -> bytes:
    weights, k = (model.weights, model.k) if isinstance(model, DeformerModel) else (model, FULL)
    stored = weights.rounded(np.float32)
    parts = [_PREFIX.pack(MAGIC, VERSION), weights.config.to_bytes(), struct.pack("<H", k),
             stored.fingerprint]
    parts += [np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in stored.tensors()]
    return b"".join(parts)


def save_checkpoint(model: EncoderWeights | DeformerModel, path: Path) -> bytes:
    """Atomically write ``model``; returns the stored fingerprint."""
    data = encode_checkpoint(model)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    off = _PREFIX.size + CONFIG_STRUCT_SIZE + 2
    return data[off:off + 32]


def decode_checkpoint(raw: bytes) -> EncoderWeights | DeformerModel:
    head = _PREFIX.size + CONFIG_STRUCT_SIZE + 2 + 32
    if len(raw) < head:
        raise FormatError("checkpoint shorter than its header")
    magic, version = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = _PREFIX.size
    config = ModelConfig.from_bytes(raw[pos:pos + CONFIG_STRUCT_SIZE])
    pos += CONFIG_STRUCT_SIZE
    (k,) = struct.unpack_from("<H", raw, pos)
    fingerprint = raw[pos + 2:pos + 34]
    pos = head
    params = {}
    for name, shape in param_shapes(config).items():
        n = int(np.prod(shape))
        if pos + 4 * n > len(raw):
            raise FormatError(f"checkpoint truncated inside {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float64)
        params[name] = Tensor(arr.reshape(shape))
        pos += 4 * n
    if pos != len(raw):
        raise FormatError("trailing bytes after the last parameter")
    weights = EncoderWeights(config, params)
    if weights.fingerprint != fingerprint:
        raise StaleArtifactError("checkpoint fingerprint does not match its contents")
    return weights if k == FULL else DeformerModel(weights, k)


def load_checkpoint(path: Path) -> EncoderWeights | DeformerModel:
    return decode_checkpoint(Path(path).read_bytes())


def read_fingerprint(path: Path) -> bytes:
    """The stored fingerprint, without loading the parameters."""
    with open(path, "rb") as fh:
        raw = fh.read(_PREFIX.size + CONFIG_STRUCT_SIZE + 34)
    if len(raw) < _PREFIX.size + CONFIG_STRUCT_SIZE + 34 or raw[:4] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    return raw[-32:]
