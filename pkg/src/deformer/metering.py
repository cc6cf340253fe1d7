"""Analytic compute, memory and dollar-cost accounting.

FLOP convention: a multiply-accumulate is 2 FLOPs. The analytic formulas
charge exactly what the tensor primitives charge (see ``deformer.tensor``),
so on any configuration they agree with :func:`count_oracle` op by op.

Per layer over ``s`` rows with width d, h heads and FFN width f::

    matmul      8 s d^2 + 4 s^2 d + 4 s d f
    add         6 s d + s f          (biases and residuals; no key bias)
    mul         h s^2                (score scaling)
    softmax     5 h s^2
    layer_norm  16 s d
    gelu        8 s f

Embeddings over r rows cost 2 r d (adds) + 8 r d (layer norm); the span head
over the passage block (P = p + 1 rows) costs 4 P d + 10 P.

Sequence lengths follow the packed layout: the question block is
``q_len + 2`` rows ([CLS] question [SEP]), the passage block ``p_len + 1``
rows (passage [SEP]). ``q_len`` is the padded question slot (``q_max``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .encoder import ModelConfig
from .errors import InputError, ParameterError
from .tensor import FlopCounter, count_flops

OPS = ("matmul", "add", "mul", "softmax", "layer_norm", "gelu")


def _merge(*parts: dict[str, int]) -> dict[str, int]:
    out = {op: 0 for op in OPS}
    for p in parts:
        for op, n in p.items():
            out[op] += n
    return out


def _scale(part: dict[str, int], times: int) -> dict[str, int]:
    return {op: n * times for op, n in part.items()}


def layer_flops(s: int, d: int, h: int, f: int) -> dict[str, int]:
    return {"matmul": 8 * s * d * d + 4 * s * s * d + 4 * s * d * f,
            "add": 6 * s * d + s * f,
            "mul": h * s * s,
            "softmax": 5 * h * s * s,
            "layer_norm": 16 * s * d,
            "gelu": 8 * s * f}


def attention_part(s: int, d: int, h: int) -> int:
    """Self-attention sub-layer, including its residual and layer norm."""
    return 8 * s * d * d + 4 * s * s * d + 6 * h * s * s + 12 * s * d


def ffn_part(s: int, d: int, f: int) -> int:
    return 4 * s * d * f + 9 * s * f + 10 * s * d


def embedding_flops(rows: int, d: int) -> dict[str, int]:
    return {"add": 2 * rows * d, "layer_norm": 8 * rows * d}


def head_flops(passage_rows: int, d: int) -> dict[str, int]:
    return {"matmul": 4 * passage_rows * d, "softmax": 10 * passage_rows}


@dataclass
class FlopReport:
    per_layer: list[int]
    embedding: int
    attention: int
    ffn: int
    head: int
    online: int
    offline: int
    cache_bytes: int
    peak_memory_bytes: int
    by_op: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.online + self.offline

    def gflops(self) -> float:
        return self.online / 1e9

    def as_record(self) -> dict:
        return {"online": self.online, "offline": self.offline, "embedding": self.embedding,
                "attention": self.attention, "ffn": self.ffn, "head": self.head,
                "cache_bytes": self.cache_bytes, "peak_memory_bytes": self.peak_memory_bytes,
                "per_layer": list(self.per_layer), "by_op": dict(self.by_op)}


def _check_lengths(q_len: int, p_len: int):
    if q_len < 1 or p_len < 1:
        raise InputError("q_len and p_len must be positive")


def flops_full(config: ModelConfig, q_len: int, p_len: int,
               bytes_per_scalar: int = 4) -> FlopReport:
    _check_lengths(q_len, p_len)
    d, h, f, n = config.hidden_dim, config.n_heads, config.ffn_dim, config.n_layers
    s = q_len + p_len + 3
    per = layer_flops(s, d, h, f)
    emb, head = embedding_flops(s, d), head_flops(p_len + 1, d)
    by_op = _merge(emb, _scale(per, n), head)
    layer_total = sum(per.values())
    return FlopReport(
        per_layer=[layer_total] * n,
        embedding=sum(emb.values()),
        attention=n * attention_part(s, d, h),
        ffn=n * ffn_part(s, d, f),
        head=sum(head.values()),
        online=sum(by_op.values()),
        offline=0,
        cache_bytes=0,
        peak_memory_bytes=memory_estimate(config, q_len, p_len, 0, "full", bytes_per_scalar),
        by_op=by_op,
    )


def flops_decomposed(config: ModelConfig, q_len: int, p_len: int, k: int,
                     bytes_per_scalar: int = 4) -> FlopReport:
    """Online = question through layers 1..k, joint layers k+1..n, head.

    Offline = passage embeddings and layers 1..k. At k = 0 nothing is cached
    and the passage embedding is charged online, so the report equals
    :func:`flops_full`.
    """
    _check_lengths(q_len, p_len)
    n = config.n_layers
    if not 0 <= k <= n:
        raise ParameterError(f"k={k} outside [0, {n}]")
    d, h, f = config.hidden_dim, config.n_heads, config.ffn_dim
    qs, ps = q_len + 2, p_len + 1
    s = qs + ps
    q_layer, p_layer, joint = layer_flops(qs, d, h, f), layer_flops(ps, d, h, f), \
        layer_flops(s, d, h, f)
    head = head_flops(ps, d)
    if k == 0:
        online_parts = _merge(embedding_flops(s, d), _scale(joint, n), head)
        offline_parts = _merge()
    else:
        online_parts = _merge(embedding_flops(qs, d), _scale(q_layer, k),
                              _scale(joint, n - k), head)
        offline_parts = _merge(embedding_flops(ps, d), _scale(p_layer, k))
    per_layer = [sum(q_layer.values())] * k + [sum(joint.values())] * (n - k)
    return FlopReport(
        per_layer=per_layer,
        embedding=sum(embedding_flops(qs if k else s, d).values()),
        attention=k * attention_part(qs, d, h) + (n - k) * attention_part(s, d, h),
        ffn=k * ffn_part(qs, d, f) + (n - k) * ffn_part(s, d, f),
        head=sum(head.values()),
        online=sum(online_parts.values()),
        offline=sum(offline_parts.values()),
        cache_bytes=ps * d * bytes_per_scalar if k else 0,
        peak_memory_bytes=memory_estimate(config, q_len, p_len, k, "decomposed",
                                          bytes_per_scalar),
        by_op=_merge(online_parts, offline_parts),
    )


def layer_live_scalars(rows: int, d: int, h: int, f: int) -> int:
    """Layer input + attention scores + FFN intermediate."""
    return rows * d + h * rows * rows + rows * f


def memory_estimate(config: ModelConfig, q_len: int, p_len: int, k: int, mode: str,
                    bytes_per_scalar: int = 4) -> int:
    """Activation bytes under a retain-everything liveness model.

    Each executed layer keeps its input, its attention score matrix and its
    FFN intermediate alive until the forward pass ends (graph-mode
    accounting, no buffer reuse), so the peak equals the sum over layers.
    Decomposed mode counts only what runs online: question layers 1..k, the
    cached passage block loaded at layer k, and the joint layers above.
    """
    _check_lengths(q_len, p_len)
    n, d, h, f = config.n_layers, config.hidden_dim, config.n_heads, config.ffn_dim
    if not 0 <= k <= n:
        raise ParameterError(f"k={k} outside [0, {n}]")
    qs, ps = q_len + 2, p_len + 1
    s = qs + ps
    if mode == "full" or k == 0:
        scalars = n * layer_live_scalars(s, d, h, f)
    elif mode == "decomposed":
        scalars = (k * layer_live_scalars(qs, d, h, f) + ps * d
                   + (n - k) * layer_live_scalars(s, d, h, f))
    else:
        raise InputError(f"unknown mode {mode!r}")
    return scalars * bytes_per_scalar


def memory_reduction(config: ModelConfig, q_len: int, p_len: int, k: int) -> float:
    full = memory_estimate(config, q_len, p_len, k, "full")
    dec = memory_estimate(config, q_len, p_len, k, "decomposed")
    return 100.0 * (full - dec) / full


def speedup(config: ModelConfig, q_len: int, p_len: int, k: int) -> float:
    return flops_full(config, q_len, p_len).online / flops_decomposed(config, q_len, p_len,
                                                                      k).online


def count_oracle(closure: Callable[[], object]) -> FlopCounter:
    """Run ``closure`` and count the FLOPs its tensor primitives actually perform."""
    with count_flops() as counter:
        closure()
    return counter


# ---------------------------------------------------------------------------
# Dollar cost


@dataclass(frozen=True)
class CostParams:
    g_u: float = 2.48          # accelerator $/hour
    n_seq: float = 30e6        # sequences per month
    b: int = 640               # batch size
    t_b: float = 4.6           # seconds per batch
    s: float = 226.0           # cached GB
    s_u: float = 0.02          # $/GB/month
    r_u: float = 0.004         # $ per 10,000 reads

    def __post_init__(self):
        for name in ("g_u", "n_seq", "t_b", "s", "s_u", "r_u"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.b < 1:
            raise ParameterError("batch size must be >= 1")


def cost_original(p: CostParams) -> float:
    """Monthly accelerator cost: t_b * (n_seq / b) * g_u / 3600."""
    return p.t_b * (p.n_seq / p.b) * p.g_u / 3600.0


@dataclass(frozen=True)
class DecomposedCost:
    gpu: float
    reads: float
    storage: float

    @property
    def total(self) -> float:
        return self.gpu + self.reads + self.storage


def cost_decomposed(p: CostParams) -> DecomposedCost:
    """Accelerator time plus one cache read per sequence plus monthly storage.

    Reads are charged per sequence (n_seq / 10,000 * r_u) and storage as
    s * s_u per month, matching the worked dollar figures.
    """
    return DecomposedCost(gpu=cost_original(p), reads=p.n_seq / 10_000 * p.r_u,
                          storage=p.s * p.s_u)


BERT_BASE = ModelConfig(n_layers=12, hidden_dim=768, n_heads=12, ffn_dim=3072, vocab_size=30522,
                        max_positions=512, q_max=64, p_max=445)
BERT_LARGE = ModelConfig(n_layers=24, hidden_dim=1024, n_heads=16, ffn_dim=4096,
                         vocab_size=30522, max_positions=512, q_max=64, p_max=445)
