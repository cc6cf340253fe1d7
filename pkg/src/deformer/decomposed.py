"""Decomposed encoder: segment-local lower layers, joint upper layers.

Layers 1..k see only the tokens of their own segment, so the passage half
of layer k depends on the passage alone and can be computed offline.
Layers k+1..n run over the concatenation exactly as in the full model.

The question block carries [CLS] and its [SEP]; the passage block is the
passage plus its trailing [SEP]. Both blocks keep the positions and segment
ids they would have inside :func:`~deformer.encoder.pack_pair`, which makes
the decomposed pipeline identical (up to float summation order) to the full
encoder run with a block-diagonal attention mask below layer k.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import (EncoderWeights, HiddenStack, PairBatch, PredictionDistribution,
                      SegmentPair, as_batch, block_diagonal_mask, embed, encode_full, key_mask,
                      passage_block_ids, question_block_ids, run_layers, span_distribution)
from .errors import (CacheCompatibilityError, InputError, NumericalError, ParameterError,
                     ShapeError, StateError)
from .tensor import Tensor

QUESTION, PASSAGE = "question", "passage"


@dataclass(frozen=True)
class DeformerModel:
    weights: EncoderWeights
    k: int

    def __post_init__(self):
        if not 0 <= self.k <= self.weights.config.n_layers:
            raise ParameterError(
                f"split layer k={self.k} outside [0, {self.weights.config.n_layers}]")

    @property
    def config(self):
        return self.weights.config

    @property
    def fingerprint(self) -> tuple[bytes, int]:
        return (self.weights.fingerprint, self.k)

    def astype(self, dtype) -> "DeformerModel":
        return DeformerModel(self.weights.astype(dtype), self.k)


def transfer_weights(full: EncoderWeights, k: int) -> DeformerModel:
    """Initialise a decomposed model from a full one; parameters copied verbatim."""
    copied = {name: Tensor(t.data.copy(), dtype=t.dtype) for name, t in full.params.items()}
    return DeformerModel(EncoderWeights(full.config, copied), k)


@dataclass
class SegmentStates:
    """Per-layer states of one segment block; ``layers[i]`` is layer ``first_layer + i``."""
    role: str
    layers: list[Tensor]  # each (B, rows, d)
    valid: np.ndarray     # (B, rows)
    lengths: np.ndarray   # (B,) real tokens, specials excluded
    first_layer: int = 0

    @property
    def top_layer(self) -> int:
        return self.first_layer + len(self.layers) - 1

    @property
    def top(self) -> Tensor:
        return self.layers[-1]


def _block_arrays(segments: Sequence[Sequence[int]], role: str, config, pad_to=None):
    if role == QUESTION:
        limit, build = config.q_max, (lambda s: question_block_ids(s, config.q_max))
    elif role == PASSAGE:
        limit = config.p_max
        width = max(len(s) for s in segments) if pad_to is None else pad_to
        build = (lambda s: passage_block_ids(s, config.q_max, width))
    else:
        raise InputError(f"unknown segment role {role!r}")
    for s in segments:
        if len(s) == 0:
            raise InputError(f"empty {role}")
        if len(s) > limit:
            raise InputError(f"{role} of length {len(s)} exceeds {limit}")
    rows = [build(s) for s in segments]
    ids, pos, seg, valid = (np.array([r[i] for r in rows]) for i in range(4))
    return ids, pos, seg, valid.astype(bool), np.array([len(s) for s in segments])


def _encode_block(ids, pos, seg, valid, lengths, role: str, model: DeformerModel) -> SegmentStates:
    w = model.weights
    x = embed(ids, pos, seg, w)
    if not np.isfinite(x.data).all():
        raise NumericalError("non-finite activation after layer 0 (embeddings)")
    layers = [x] + run_layers(x, key_mask(valid), w, 0, model.k)
    return SegmentStates(role, layers, valid, lengths)


def encode_lower(tokens: Sequence[int] | Sequence[Sequence[int]], role: str,
                 model: DeformerModel, pad_to: int | None = None) -> SegmentStates:
    """Run layers 1..k on one segment (or a batch of segments) in isolation."""
    segments = [tokens] if len(tokens) and np.isscalar(tokens[0]) else list(tokens)
    if not segments:
        raise InputError(f"empty {role}")
    arrays = _block_arrays(segments, role, model.config, pad_to)
    return _encode_block(*arrays, role, model)


def join_and_encode_upper(q_states: SegmentStates, p_states: SegmentStates,
                          model: DeformerModel) -> HiddenStack:
    """Concatenate layer-k states in pair layout and run layers k+1..n jointly."""
    if q_states.role != QUESTION or p_states.role != PASSAGE:
        raise StateError(f"expected (question, passage) states, got "
                         f"({q_states.role}, {p_states.role})")
    for st in (q_states, p_states):
        if st.top_layer != model.k:
            raise StateError(f"{st.role} states end at layer {st.top_layer}, model splits at "
                             f"{model.k}")
    q, p = q_states.top, p_states.top
    if q.shape[-1] != p.shape[-1] or q.shape[-1] != model.config.hidden_dim:
        raise ShapeError("hidden dimensions differ")
    if q.shape[0] != p.shape[0]:
        raise ShapeError("question and passage batches differ in size")
    x = T.concat([q, p], axis=1)
    valid = np.concatenate([q_states.valid, p_states.valid], axis=1)
    upper = run_layers(x, key_mask(valid), model.weights, model.k, model.config.n_layers)
    return HiddenStack([x] + upper, valid, q.shape[1], first_layer=model.k)


def _head(stack: HiddenStack, p_states: SegmentStates, model: DeformerModel):
    passage = T.index(stack.final, (slice(None), slice(stack.q_block, None)))
    rows = passage.shape[1]
    slots = np.arange(rows)[None, :] < p_states.lengths[:, None]
    return span_distribution(passage @ model.weights.params["qa_w"], slots)


def _full_stack(q_states: SegmentStates, p_states: SegmentStates,
                upper: HiddenStack) -> HiddenStack:
    """Prefix the joint stack with the concatenated lower-layer segment states."""
    if p_states.first_layer != 0:
        return upper
    lower = [T.concat([qa, pa], axis=1) for qa, pa in zip(q_states.layers[:-1],
                                                          p_states.layers[:-1])]
    return HiddenStack(lower + upper.layers, upper.valid, upper.q_block, first_layer=0)


def forward_batch(pair: SegmentPair | PairBatch, model: DeformerModel):
    """Decomposed forward over packed pairs: returns (distribution, full HiddenStack)."""
    batch = as_batch(pair)
    qb, pbk = batch.question_block(), batch.passage_block()
    q_states = _encode_block(batch.token_ids[:, qb], batch.position_ids[:, qb],
                             batch.segment_ids[:, qb], batch.valid[:, qb],
                             batch.valid[:, 1:qb.stop - 1].sum(axis=1), QUESTION, model)
    p_states = _encode_block(batch.token_ids[:, pbk], batch.position_ids[:, pbk],
                             batch.segment_ids[:, pbk], batch.valid[:, pbk],
                             batch.passage_lens, PASSAGE, model)
    upper = join_and_encode_upper(q_states, p_states, model)
    return _head(upper, p_states, model), _full_stack(q_states, p_states, upper)


def passage_states_from_cache(entry, model: DeformerModel) -> SegmentStates:
    fp, k = model.fingerprint
    if entry.key.fingerprint != fp:
        raise CacheCompatibilityError("cache entry was produced by different weights")
    if entry.key.k != k:
        raise CacheCompatibilityError(f"cache entry is for k={entry.key.k}, model has k={k}")
    states = np.asarray(entry.states).astype(model.weights.dtype)
    rows = states.shape[0]
    return SegmentStates(PASSAGE, [Tensor(states[None], dtype=model.weights.dtype)],
                         np.ones((1, rows), dtype=bool), np.array([rows - 1]), first_layer=k)


def deformer_forward(question: Sequence[int], passage, model: DeformerModel):
    """Answer one question over a raw passage or a cached passage entry.

    Returns (PredictionDistribution, HiddenStack). With a cached passage the
    stack starts at layer k since lower passage layers were never computed.
    """
    q_states = encode_lower(list(question), QUESTION, model)
    if hasattr(passage, "states"):
        p_states = passage_states_from_cache(passage, model)
    else:
        p_states = encode_lower(list(passage), PASSAGE, model)
    upper = join_and_encode_upper(q_states, p_states, model)
    return _head(upper, p_states, model), _full_stack(q_states, p_states, upper)


def masked_oracle(pair: SegmentPair | PairBatch, full: EncoderWeights, k: int) -> HiddenStack:
    """The full encoder with block-diagonal attention in layers 1..k."""
    if not 0 <= k <= full.config.n_layers:
        raise ParameterError(f"k={k} outside [0, {full.config.n_layers}]")
    batch = as_batch(pair)
    local = block_diagonal_mask(batch.valid, batch.passage_offset)
    joint = key_mask(batch.valid)
    return encode_full(batch, full, masks=lambda i: local if i < k else joint)


def predictions(model, pair: SegmentPair | PairBatch) -> tuple[PredictionDistribution, HiddenStack]:
    """Forward either a full EncoderWeights or a DeformerModel over packed pairs."""
    if isinstance(model, DeformerModel):
        return forward_batch(pair, model)
    from .encoder import forward
    return forward(pair, model)
