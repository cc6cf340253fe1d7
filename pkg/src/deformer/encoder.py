"""The full (non-decomposed) transformer encoder and its span-extraction head.

Input layout for a (question, passage) pair::

    [CLS] q_1 .. q_q [PAD] .. [PAD] [SEP] | p_1 .. p_p [SEP] [PAD] ..
    \\_______ question block: q_max + 2 ________/ \\____ passage block ____/

The question is always padded to ``q_max`` so passage tokens sit at the same
positions (starting at ``q_max + 2``) whatever the question length. This is
what makes cached passage states reusable across questions.

Layers are post-norm (BERT style)::

    h = LN(x + Attn(x));  y = LN(h + W2 gelu(W1 h + b1) + b2)

The key projection has no bias: a per-query constant added to every score is
removed by softmax, so such a bias is not identifiable and has no gradient.
For the same reason the span head has no bias.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputError, NumericalError, ShapeError
from .tensor import Tensor
from .vocab import CLS, PAD, SEP

SPECIAL_TOKENS = 3  # CLS, SEP after the question, SEP after the passage


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_dim: int = 32
    n_heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 64
    max_positions: int = 32
    q_max: int = 2
    p_max: int = 16
    layer_norm_eps: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be >= 0")
        if min(self.hidden_dim, self.n_heads, self.ffn_dim, self.vocab_size) < 1:
            raise ConfigurationError("dimensions must be positive")
        if self.hidden_dim % self.n_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.q_max < 1 or self.p_max < 1:
            raise ConfigurationError("q_max and p_max must be positive")
        if self.q_max + self.p_max + SPECIAL_TOKENS > self.max_positions:
            raise ConfigurationError("q_max + p_max + 3 exceeds max_positions")
        if not self.layer_norm_eps > 0:
            raise ConfigurationError("layer_norm_eps must be positive")

    @property
    def passage_offset(self) -> int:
        return self.q_max + 2

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_bytes(self) -> bytes:
        return struct.pack("<8Id Q", self.n_layers, self.hidden_dim, self.n_heads,
                           self.ffn_dim, self.vocab_size, self.max_positions, self.q_max,
                           self.p_max, self.layer_norm_eps, self.seed)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelConfig":
        vals = struct.unpack("<8Id Q", raw)
        return cls(*vals)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


CONFIG_STRUCT_SIZE = struct.calcsize("<8Id Q")

LAYER_PARAMS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in the canonical (checkpoint) order.

    The last layer has no output layer-norm bias: the span head is invariant
    to a shift shared by all positions, so that bias could never be learned.
    """
    d, f = config.hidden_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
        "seg_emb": (2, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    per_layer = {"wq": (d, d), "bq": (d,), "wk": (d, d), "wv": (d, d), "bv": (d,),
                 "wo": (d, d), "bo": (d,), "ln1_g": (d,), "ln1_b": (d,),
                 "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
                 "ln2_g": (d,), "ln2_b": (d,)}
    for i in range(config.n_layers):
        for name in LAYER_PARAMS:
            if name == "ln2_b" and i == config.n_layers - 1:
                continue
            shapes[f"layer{i}.{name}"] = per_layer[name]
    shapes["qa_w"] = (d, 2)
    return shapes


@dataclass(frozen=True)
class LayerWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass(frozen=True)
class EncoderWeights:
    config: ModelConfig
    params: dict[str, Tensor]
    _fp: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.params) != list(expected):
            raise ConfigurationError("parameter names do not follow the canonical order")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigurationError(
                    f"{name}: shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None) -> "EncoderWeights":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                arr = np.ones(shape)
            elif leaf.startswith("b") or leaf.endswith("_b"):
                arr = np.zeros(shape)
            elif leaf.endswith("emb"):
                arr = rng.normal(0.0, 1.0, shape)
            else:
                arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            params[name] = Tensor(arr)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def layer(self, i: int) -> LayerWeights:
        p = self.params
        d = self.config.hidden_dim
        return LayerWeights(*(p[f"layer{i}.{n}"] if f"layer{i}.{n}" in p
                              else Tensor(np.zeros(d, dtype=self.dtype)) for n in LAYER_PARAMS))

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def with_params(self, new: Sequence[Tensor] | dict[str, Tensor]) -> "EncoderWeights":
        if not isinstance(new, dict):
            new = dict(zip(self.params, new))
        return EncoderWeights(self.config, dict(new))

    def astype(self, dtype) -> "EncoderWeights":
        return self.with_params({k: Tensor(v.data, dtype=dtype) for k, v in self.params.items()})

    def rounded(self, dtype=np.float32) -> "EncoderWeights":
        """Round values through ``dtype`` but keep the current dtype."""
        cur = self.dtype
        return self.with_params(
            {k: Tensor(v.data.astype(dtype).astype(cur)) for k, v in self.params.items()})

    @property
    def fingerprint(self) -> bytes:
        """SHA-256 over the config and every parameter value (as float64)."""
        if not self._fp:
            h = hashlib.sha256(b"deformer-weights-v1")
            h.update(self.config.to_bytes())
            for name, t in self.params.items():
                h.update(name.encode())
                h.update(struct.pack(f"<{t.ndim}I", *t.shape))
                h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
            self._fp.append(h.digest())
        return self._fp[0]


# ---------------------------------------------------------------------------
# Packing


@dataclass(frozen=True)
class SegmentPair:
    question_ids: tuple[int, ...]
    passage_ids: tuple[int, ...]
    token_ids: np.ndarray
    position_ids: np.ndarray
    segment_ids: np.ndarray
    valid: np.ndarray
    q_max: int

    @property
    def passage_offset(self) -> int:
        return self.q_max + 2

    def batch(self) -> "PairBatch":
        return PairBatch(self.token_ids[None], self.position_ids[None],
                         self.segment_ids[None], self.valid[None], self.q_max,
                         np.array([len(self.passage_ids)]))


@dataclass(frozen=True)
class PairBatch:
    """Several packed pairs sharing one sequence length (passages padded)."""
    token_ids: np.ndarray     # (B, S)
    position_ids: np.ndarray  # (B, S)
    segment_ids: np.ndarray   # (B, S)
    valid: np.ndarray         # (B, S) bool
    q_max: int
    passage_lens: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]

    @property
    def passage_offset(self) -> int:
        return self.q_max + 2

    def passage_slots(self) -> np.ndarray:
        """(B, S - offset) bool: real passage tokens (no SEP, no padding)."""
        width = self.seq_len - self.passage_offset
        return np.arange(width)[None, :] < self.passage_lens[:, None]

    def question_block(self) -> slice:
        return slice(0, self.passage_offset)

    def passage_block(self) -> slice:
        return slice(self.passage_offset, self.seq_len)


def question_block_ids(question: Sequence[int], q_max: int):
    q = len(question)
    ids = [CLS, *question, *([PAD] * (q_max - q)), SEP]
    valid = [True] * (q + 1) + [False] * (q_max - q) + [True]
    pos = list(range(q_max + 2))
    return ids, pos, [0] * (q_max + 2), valid


def passage_block_ids(passage: Sequence[int], q_max: int, pad_to: int | None = None):
    p = len(passage)
    pad = 0 if pad_to is None else pad_to - p
    ids = [*passage, SEP, *([PAD] * pad)]
    valid = [True] * (p + 1) + [False] * pad
    start = q_max + 2
    pos = list(range(start, start + p + 1 + pad))
    return ids, pos, [1] * (p + 1 + pad), valid


def _check_lengths(question: Sequence[int], passage: Sequence[int], config: ModelConfig):
    if not 1 <= len(question) <= config.q_max:
        raise InputError(f"question length {len(question)} outside [1, {config.q_max}]")
    if not 1 <= len(passage) <= config.p_max:
        raise InputError(f"passage length {len(passage)} outside [1, {config.p_max}]")


def pack_pair(question: Sequence[int], passage: Sequence[int], config: ModelConfig,
              pad_to: int | None = None) -> SegmentPair:
    """Lay out one pair; ``pad_to`` appends passage padding up to that length."""
    _check_lengths(question, passage, config)
    if pad_to is not None and not len(passage) <= pad_to <= config.p_max:
        raise InputError("pad_to must lie between the passage length and p_max")
    qi, qp, qs, qv = question_block_ids(question, config.q_max)
    pi, pp, ps, pv = passage_block_ids(passage, config.q_max, pad_to)
    return SegmentPair(tuple(question), tuple(passage),
                       np.array(qi + pi, dtype=np.int64), np.array(qp + pp, dtype=np.int64),
                       np.array(qs + ps, dtype=np.int64), np.array(qv + pv, dtype=bool),
                       config.q_max)


def pack_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], config: ModelConfig,
               pad_to: int | None = None) -> PairBatch:
    if not pairs:
        raise InputError("empty batch")
    width = max(len(p) for _, p in pairs) if pad_to is None else pad_to
    packed = [pack_pair(q, p, config, pad_to=width) for q, p in pairs]
    return PairBatch(np.stack([s.token_ids for s in packed]),
                     np.stack([s.position_ids for s in packed]),
                     np.stack([s.segment_ids for s in packed]),
                     np.stack([s.valid for s in packed]),
                     config.q_max,
                     np.array([len(p) for _, p in pairs]))


def as_batch(pair: SegmentPair | PairBatch) -> PairBatch:
    return pair.batch() if isinstance(pair, SegmentPair) else pair


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class HiddenStack:
    """Token representations per layer; ``layers[i]`` is layer ``first_layer + i``."""
    layers: list[Tensor]
    valid: np.ndarray  # (B, S)
    q_block: int       # rows belonging to the question block
    first_layer: int = 0

    @property
    def last_layer(self) -> int:
        return self.first_layer + len(self.layers) - 1

    @property
    def final(self) -> Tensor:
        return self.layers[-1]

    def at(self, layer: int) -> Tensor:
        if not self.first_layer <= layer <= self.last_layer:
            raise IndexError(f"layer {layer} not held (have {self.first_layer}..{self.last_layer})")
        return self.layers[layer - self.first_layer]


def key_mask(valid: np.ndarray) -> np.ndarray:
    """(B, S, S) mask letting every row attend to every valid key."""
    return np.broadcast_to(valid[:, None, :], valid.shape + valid.shape[-1:])


def block_diagonal_mask(valid: np.ndarray, q_block: int) -> np.ndarray:
    """Valid keys inside the query's own block only."""
    s = valid.shape[-1]
    block = np.arange(s) >= q_block
    same = block[:, None] == block[None, :]
    return key_mask(valid) & same[None]


def embed(ids: np.ndarray, pos: np.ndarray, seg: np.ndarray, w: EncoderWeights) -> Tensor:
    p = w.params
    x = T.index(p["tok_emb"], ids) + T.index(p["pos_emb"], pos) + T.index(p["seg_emb"], seg)
    return T.layer_norm(x, p["emb_ln_g"], p["emb_ln_b"], w.config.layer_norm_eps)


def attention_layer(x: Tensor, mask: np.ndarray, lw: LayerWeights, n_heads: int,
                    eps: float) -> Tensor:
    """One post-norm transformer layer; ``mask[b, i, j]`` lets token i see token j."""
    mask = np.asarray(mask, dtype=bool)
    if x.ndim == 2:
        out = attention_layer(T.reshape(x, (1,) + x.shape), mask, lw, n_heads, eps)
        return T.reshape(out, x.shape)
    b, s, d = x.shape
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[-2:] != (s, s):
        raise ShapeError(f"mask shape {mask.shape} does not fit sequence length {s}")
    if not mask.any(axis=-1).all():
        raise InputError("attention mask has a row with no visible token")
    dh = d // n_heads

    def heads(t):
        return T.transpose(T.reshape(t, (b, s, n_heads, dh)), (0, 2, 1, 3))

    q = heads(x @ lw.wq + lw.bq)
    k = heads(x @ lw.wk)
    v = heads(x @ lw.wv + lw.bv)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    scores = T.where(mask[:, None, :, :], scores, -np.inf)
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    h = T.layer_norm(x + (ctx @ lw.wo + lw.bo), lw.ln1_g, lw.ln1_b, eps)
    ffn = T.gelu(h @ lw.w1 + lw.b1) @ lw.w2 + lw.b2
    return T.layer_norm(h + ffn, lw.ln2_g, lw.ln2_b, eps)


def run_layers(x: Tensor, masks, w: EncoderWeights, start: int, stop: int) -> list[Tensor]:
    """Apply layers ``start``..``stop - 1``; ``masks`` is one mask or a per-layer callable."""
    out = []
    cfg = w.config
    for i in range(start, stop):
        mask = masks(i) if callable(masks) else masks
        x = attention_layer(x, mask, w.layer(i), cfg.n_heads, cfg.layer_norm_eps)
        if not np.isfinite(x.data).all():
            raise NumericalError(f"non-finite activation after layer {i + 1}")
        out.append(x)
    return out


def encode_full(pair: SegmentPair | PairBatch, w: EncoderWeights, masks=None) -> HiddenStack:
    """X^{l+1} = L_l(X^l) for every layer, with full attention over valid tokens.

    ``masks`` optionally overrides the attention mask per layer (callable of
    the 0-based layer index); used by the block-diagonal oracle.
    """
    batch = as_batch(pair)
    x = embed(batch.token_ids, batch.position_ids, batch.segment_ids, w)
    if not np.isfinite(x.data).all():
        raise NumericalError("non-finite activation after layer 0 (embeddings)")
    layers = [x] + run_layers(x, masks if masks is not None else key_mask(batch.valid), w,
                              0, w.config.n_layers)
    return HiddenStack(layers, batch.valid, batch.passage_offset)


# ---------------------------------------------------------------------------
# Span head


@dataclass
class PredictionDistribution:
    """Start/end distributions over passage-block slots (B, width)."""
    start: Tensor
    end: Tensor
    valid: np.ndarray

    def example(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.start.data[i], self.end.data[i]


def span_distribution(logits: Tensor, valid: np.ndarray) -> PredictionDistribution:
    """Masked softmax of (B, width, 2) logits over the valid slots."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise InputError("no valid passage slot")
    lt = T.transpose(logits, (0, 2, 1))  # (B, 2, width)
    probs = T.softmax(T.where(valid[:, None, :], lt, -np.inf), axis=-1)
    return PredictionDistribution(T.index(probs, (slice(None), 0)),
                                  T.index(probs, (slice(None), 1)), valid)


def qa_head(stack: HiddenStack, pair: SegmentPair | PairBatch,
            w: EncoderWeights) -> PredictionDistribution:
    batch = as_batch(pair)
    x = stack.final
    if x.shape[1] != batch.seq_len:
        raise ShapeError("stack and pair have different sequence lengths")
    passage = T.index(x, (slice(None), batch.passage_block()))
    return span_distribution(passage @ w.params["qa_w"], batch.passage_slots())


def predict_span(start: np.ndarray, end: np.ndarray, max_span_len: int) -> tuple[int, int]:
    """argmax of start[s] * end[e] over s <= e < s + max_span_len.

    Ties go to the smallest s, then the smallest e (row-major argmax).
    """
    if max_span_len < 1:
        raise InputError("max_span_len must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    n = start.shape[0]
    offs = np.arange(n)[None, :] - np.arange(n)[:, None]
    band = (offs >= 0) & (offs < max_span_len)
    scores = np.where(band, start[:, None] * end[None, :], -np.inf)
    flat = int(np.argmax(scores))
    return divmod(flat, n)


def predict_spans(dist: PredictionDistribution, max_span_len: int) -> list[tuple[int, int]]:
    return [predict_span(*dist.example(i), max_span_len) for i in range(dist.start.shape[0])]


def forward(pair: SegmentPair | PairBatch, w: EncoderWeights):
    batch = as_batch(pair)
    stack = encode_full(batch, w)
    return qa_head(stack, batch, w), stack
