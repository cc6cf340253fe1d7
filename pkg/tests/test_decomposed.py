import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pair, random_tokens, tiny_config
from deformer.decomposed import (PASSAGE, QUESTION, DeformerModel, SegmentStates,
                                 deformer_forward, encode_lower, forward_batch,
                                 join_and_encode_upper, masked_oracle, transfer_weights)
from deformer.encoder import (EncoderWeights, attention_layer, encode_full, forward, pack_batch,
                              pack_pair)
from deformer.errors import InputError, ParameterError, ShapeError, StateError
from deformer.tensor import Tensor
from test_encoder import _gelu, _ln


def _max_diff(stack_a, stack_b):
    return max(float(np.max(np.abs(a.data - b.data)))
               for a, b in zip(stack_a.layers, stack_b.layers))


class TestTransfer:
    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_parameters_bit_equal(self, weights, k):
        model = transfer_weights(weights, k)
        for name, t in weights.params.items():
            assert model.weights.params[name].data.tobytes() == t.data.tobytes()
        assert model.fingerprint == (weights.fingerprint, k)

    @pytest.mark.parametrize("k", [-1, 3])
    def test_out_of_range(self, weights, k):
        with pytest.raises(ParameterError):
            transfer_weights(weights, k)


class TestEncodeLower:
    def test_k0_is_embeddings(self, weights):
        states = encode_lower([5, 6], QUESTION, transfer_weights(weights, 0))
        assert len(states.layers) == 1 and states.top_layer == 0

    def test_row_counts(self, config, weights):
        model = transfer_weights(weights, 2)
        q = encode_lower([5, 6], QUESTION, model)
        p = encode_lower([7, 8, 9], PASSAGE, model)
        assert all(t.shape[1] == config.q_max + 2 for t in q.layers)
        assert all(t.shape[1] == 4 for t in p.layers)

    def test_empty_segment(self, weights):
        with pytest.raises(InputError):
            encode_lower([], PASSAGE, transfer_weights(weights, 1))

    def test_question_matches_masked_full(self, config, weights, rng):
        model = transfer_weights(weights, 2)
        q, p = random_pair(rng, config)
        oracle = masked_oracle(pack_pair(q, p, config), weights, 2)
        states = encode_lower(q, QUESTION, model)
        for layer in range(3):
            got = states.layers[layer].data[0]
            want = oracle.at(layer).data[0, :config.passage_offset]
            valid = states.valid[0]
            assert np.max(np.abs(got[valid] - want[valid])) <= 1e-8

    def test_passage_independent_of_question(self, config, weights, rng):
        model = transfer_weights(weights, 2)
        passage = random_tokens(rng, config, 1, config.p_max)
        reference = None
        for _ in range(5):
            q = random_tokens(rng, config, 1, config.q_max)
            _, stack = deformer_forward(q, passage, model)
            rows = stack.at(2).data[0, config.passage_offset:]
            if reference is None:
                reference = rows
            assert reference.tobytes() == rows.tobytes()


class TestJoin:
    def test_k0_equals_full(self, config, weights, rng):
        model = transfer_weights(weights, 0)
        for _ in range(5):
            q, p = random_pair(rng, config)
            upper = join_and_encode_upper(encode_lower(q, QUESTION, model),
                                          encode_lower(p, PASSAGE, model), model)
            full = encode_full(pack_pair(q, p, config), weights)
            assert _max_diff(upper, full) == 0.0

    def test_swapped_roles(self, weights):
        model = transfer_weights(weights, 1)
        q = encode_lower([5], QUESTION, model)
        p = encode_lower([6, 7], PASSAGE, model)
        with pytest.raises(StateError):
            join_and_encode_upper(p, q, model)

    def test_layer_mismatch(self, weights):
        model = transfer_weights(weights, 1)
        q = encode_lower([5], QUESTION, transfer_weights(weights, 2))
        p = encode_lower([6, 7], PASSAGE, model)
        with pytest.raises(StateError):
            join_and_encode_upper(q, p, model)

    def test_hidden_dim_mismatch(self, weights):
        model = transfer_weights(weights, 1)
        q = encode_lower([5], QUESTION, model)
        p = encode_lower([6, 7], PASSAGE, model)
        narrow = SegmentStates(PASSAGE, [Tensor(p.top.data[..., :4])], p.valid, p.lengths,
                               first_layer=1)
        with pytest.raises(ShapeError):
            join_and_encode_upper(q, narrow, model)


class TestMaskedOracle:
    def test_k0_is_encode_full(self, config, weights, rng):
        pair = pack_pair(*random_pair(rng, config), config)
        assert _max_diff(masked_oracle(pair, weights, 0), encode_full(pair, weights)) == 0.0

    def test_random_config(self, rng):
        c = tiny_config(n_layers=4, hidden_dim=16, n_heads=4, ffn_dim=24, q_max=4, p_max=9)
        w = EncoderWeights.init(c, seed=5)
        model = transfer_weights(w, 2)
        pairs = [random_pair(rng, c) for _ in range(6)]
        batch = pack_batch(pairs, c)
        _, stack = forward_batch(batch, model)
        oracle = masked_oracle(batch, w, 2)
        for a, b in zip(stack.layers, oracle.layers):
            diff = np.abs(a.data - b.data)[batch.valid]
            assert diff.max() < 1e-8

    def test_k_equals_n_blocks_are_isolated(self, config, weights, rng):
        # with k = n each block is a standalone encoder over its own tokens
        q, p = random_pair(rng, config)
        pair = pack_pair(q, p, config)
        oracle = masked_oracle(pair, weights, config.n_layers)
        off = config.passage_offset
        other = pack_pair(random_tokens(rng, config, 1, config.q_max), p, config)
        again = masked_oracle(other, weights, config.n_layers)
        np.testing.assert_allclose(oracle.final.data[0, off:], again.final.data[0, off:],
                                   rtol=0, atol=1e-12)

    def test_single_token_layer_math(self, config, weights, rng):
        # a token that sees only itself: attention output is its own value vector
        lw = weights.layer(0)
        x = rng.normal(size=(1, config.hidden_dim))
        p = {k: v.data for k, v in lw.__dict__.items()}
        eps = config.layer_norm_eps
        h = _ln(x + (x @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"], p["ln1_g"], p["ln1_b"], eps)
        want = _ln(h + _gelu(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"], p["ln2_g"],
                   p["ln2_b"], eps)
        got = attention_layer(Tensor(x), np.ones((1, 1), dtype=bool), lw, config.n_heads, eps)
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)


class TestEquivalenceProperty:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 6), st.sampled_from([8, 16, 24, 32]), st.integers(0, 2 ** 31 - 1))
    def test_decomposed_equals_masked(self, n, d, seed):
        rng = np.random.default_rng(seed)
        heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
        c = tiny_config(n_layers=n, hidden_dim=d, n_heads=heads, ffn_dim=2 * d,
                        q_max=int(rng.integers(1, 5)), p_max=int(rng.integers(2, 10)), seed=seed)
        w = EncoderWeights.init(c)
        k = int(rng.integers(0, n + 1))
        pair = pack_pair(*random_pair(rng, c), c)
        _, stack = deformer_forward(list(pair.question_ids), list(pair.passage_ids),
                                    transfer_weights(w, k))
        oracle = masked_oracle(pair, w, k)
        for a, b in zip(stack.layers, oracle.layers):
            assert np.max(np.abs(a.data - b.data)[pair.batch().valid]) <= 1e-8


class TestDegenerate:
    def test_k0_predictions_equal_full(self, config, weights, rng):
        model = transfer_weights(weights, 0)
        for _ in range(10):
            q, p = random_pair(rng, config)
            d_full, _ = forward(pack_pair(q, p, config), weights)
            d_dec, _ = deformer_forward(q, p, model)
            assert np.max(np.abs(d_full.start.data - d_dec.start.data)) <= 1e-6
            assert np.max(np.abs(d_full.end.data - d_dec.end.data)) <= 1e-6

    def test_deformer_model_validates_k(self, weights):
        with pytest.raises(ParameterError):
            DeformerModel(weights, 9)

    def test_precision_flag(self, weights):
        m32 = transfer_weights(weights, 1).astype(np.float32)
        dist, _ = deformer_forward([5], [6, 7], m32)
        assert dist.start.dtype == np.float32
        assert math.isclose(float(dist.start.data.sum()), 1.0, abs_tol=1e-5)
