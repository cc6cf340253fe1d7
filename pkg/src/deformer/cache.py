"""Offline passage cache: layer-k passage states in one binary file.

Layout (little-endian)::

    header  magic b"DFRM" | version u32 | fingerprint 32B | k u16 | d u16 |
            precision u8 (4 = float32, 2 = bfloat16) | entry count u64
    index   entry count x (key u64, offset u64, rows u16), sorted by key
    payload one block per entry, rows x d scalars, in index order

``offset`` is the absolute byte position of the block. ``rows`` is the
passage block length: the passage tokens plus the trailing [SEP].

The key is the first 8 bytes (little-endian u64) of BLAKE2b over the passage
token ids written as little-endian u32. Fingerprint and k live in the header,
so one file serves exactly one (model, k).

16-bit storage keeps the high half of each float32 after rounding to nearest
even (bfloat16); relative error per element is at most 2**-8.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .decomposed import PASSAGE, DeformerModel, encode_lower
from .errors import CacheCompatibilityError, FormatError, InputError
from .tensor import count_flops, no_tape

MAGIC = b"DFRM"
VERSION = 1
HEADER = struct.Struct("<4sI32sHHBQ")
INDEX_ENTRY = struct.Struct("<QQH")
F32, BF16 = 4, 2


def passage_hash(tokens: Sequence[int]) -> int:
    raw = np.asarray(tokens, dtype="<u4").tobytes()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class CacheKey:
    content_hash: int
    fingerprint: bytes
    k: int

    @classmethod
    def for_passage(cls, tokens: Sequence[int], model: DeformerModel) -> "CacheKey":
        return cls(passage_hash(tokens), model.weights.fingerprint, model.k)


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    token_count: int
    states: np.ndarray  # (token_count, d) float32
    precision: int


@dataclass(frozen=True)
class CacheSummary:
    path: Path
    entries: int
    bytes: int
    payload_bytes: int
    offline_flops: int


def to_bf16(x: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounding = 0x7FFF + ((bits >> 16) & 1)
    return ((bits + rounding) >> 16).astype(np.uint16)


def from_bf16(h: np.ndarray) -> np.ndarray:
    return (h.astype(np.uint32) << 16).view(np.float32)


def estimate_size(token_count: int, hidden_dim: int, bytes_per_scalar: int) -> int:
    """Payload bytes for one cached passage (header and index not included)."""
    if min(token_count, hidden_dim, bytes_per_scalar) <= 0:
        raise InputError("all sizes must be positive")
    return token_count * hidden_dim * bytes_per_scalar


def header_size(entries: int) -> int:
    return HEADER.size + entries * INDEX_ENTRY.size


def _encode_block(states: np.ndarray, precision: int) -> bytes:
    if precision == F32:
        return np.ascontiguousarray(states, dtype="<f4").tobytes()
    return to_bf16(states).astype("<u2").tobytes()


def write_cache(path: Path, fingerprint: bytes, k: int, d: int, precision: int,
                blocks: dict[int, np.ndarray]) -> int:
    """Write ``blocks`` (hash -> rows x d states) atomically; returns file size."""
    if precision not in (F32, BF16):
        raise InputError(f"precision must be {F32} or {BF16}")
    if len(fingerprint) != 32:
        raise InputError("fingerprint must be 32 bytes")
    keys = sorted(blocks)
    payloads = [_encode_block(blocks[key], precision) for key in keys]
    offset = header_size(len(keys))
    parts = [HEADER.pack(MAGIC, VERSION, fingerprint, k, d, precision, len(keys))]
    for key, payload in zip(keys, payloads):
        parts.append(INDEX_ENTRY.pack(key, offset, blocks[key].shape[0]))
        offset += len(payload)
    data = b"".join(parts + payloads)
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def encode_and_store(passages: Sequence[Sequence[int]], model: DeformerModel,
                     precision: int, path: Path) -> CacheSummary:
    """Encode each unique passage through layers 1..k and persist layer k."""
    if not passages:
        raise InputError("no passages to cache")
    blocks: dict[int, np.ndarray] = {}
    with count_flops() as counter, no_tape():
        for tokens in passages:
            tokens = list(tokens)
            if len(tokens) > model.config.p_max:
                raise InputError(f"passage of length {len(tokens)} exceeds {model.config.p_max}")
            key = passage_hash(tokens)
            if key in blocks:
                continue
            states = encode_lower(tokens, PASSAGE, model)
            blocks[key] = np.asarray(states.top.data[0], dtype=np.float32)
    size = write_cache(path, model.weights.fingerprint, model.k, model.config.hidden_dim,
                       precision, blocks)
    payload = sum(estimate_size(b.shape[0], b.shape[1], precision) for b in blocks.values())
    return CacheSummary(Path(path), len(blocks), size, payload, counter.total)


class CacheFile:
    """Read-only view of a cache file. Lookups return None on a miss."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._raw = self.path.read_bytes()
        raw = self._raw
        if len(raw) < HEADER.size:
            raise FormatError("file shorter than the header")
        magic, version, fp, k, d, precision, count = HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if precision not in (F32, BF16):
            raise FormatError(f"unknown precision tag {precision}")
        if len(raw) < header_size(count):
            raise FormatError("index truncated")
        self.fingerprint, self.k, self.d, self.precision = fp, k, d, precision
        self.index: dict[int, tuple[int, int]] = {}
        last_key, last_off = -1, -1
        for i in range(count):
            key, off, rows = INDEX_ENTRY.unpack_from(raw, HEADER.size + i * INDEX_ENTRY.size)
            if key <= last_key or off <= last_off:
                raise FormatError("index is not strictly increasing")
            if off < header_size(count) or off + rows * d * precision > len(raw):
                raise FormatError(f"block for key {key:#x} out of bounds")
            self.index[key] = (off, rows)
            last_key, last_off = key, off

    def __len__(self) -> int:
        return len(self.index)

    def keys(self) -> list[int]:
        return list(self.index)

    def check_model(self, model: DeformerModel) -> None:
        if self.fingerprint != model.weights.fingerprint:
            raise CacheCompatibilityError("cache file was built by different weights")
        if self.k != model.k:
            raise CacheCompatibilityError(f"cache file is for k={self.k}, model has k={model.k}")

    def lookup(self, key: CacheKey) -> CacheEntry | None:
        if key.fingerprint != self.fingerprint or key.k != self.k:
            raise CacheCompatibilityError("key does not belong to this cache file")
        return self._read(key.content_hash)

    def lookup_tokens(self, tokens: Sequence[int]) -> CacheEntry | None:
        return self._read(passage_hash(list(tokens)))

    def _read(self, content_hash: int) -> CacheEntry | None:
        hit = self.index.get(content_hash)
        if hit is None:
            return None
        off, rows = hit
        n = rows * self.d
        if self.precision == F32:
            states = np.frombuffer(self._raw, dtype="<f4", count=n, offset=off)
        else:
            states = from_bf16(np.frombuffer(self._raw, dtype="<u2", count=n, offset=off))
        states = states.reshape(rows, self.d).astype(np.float32)
        return CacheEntry(CacheKey(content_hash, self.fingerprint, self.k), rows, states,
                          self.precision)


def lookup(key: CacheKey, file: CacheFile) -> CacheEntry | None:
    return file.lookup(key)
