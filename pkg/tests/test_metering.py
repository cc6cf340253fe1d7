import numpy as np
import pytest

from conftest import tiny_config
from deformer.decomposed import deformer_forward, transfer_weights
from deformer.encoder import EncoderWeights, forward, pack_pair
from deformer.errors import InputError, ParameterError
from deformer.metering import (BERT_BASE, BERT_LARGE, CostParams, count_oracle, cost_decomposed,
                               cost_original, flops_decomposed, flops_full, memory_estimate,
                               memory_reduction, speedup)
from deformer.tensor import Tensor


def _ids(rng, config, n):
    return [int(x) for x in rng.integers(4, config.vocab_size, n)]


class TestPublishedShapes:
    def test_bert_base(self):
        g = flops_full(BERT_BASE, 31, 286).online / 1e9
        assert abs(g - 58.4) <= 0.03 * 58.4

    def test_bert_large(self):
        g = flops_full(BERT_LARGE, 31, 286).online / 1e9
        assert abs(g - 204.1) <= 0.03 * 204.1

    def test_speedup_bracket(self):
        assert 2.4 <= speedup(BERT_BASE, 32, 286, 9) <= 4.0

    def test_memory_bracket(self):
        assert 55.0 <= memory_reduction(BERT_BASE, 32, 286, 9) <= 80.0


class TestDecomposedReport:
    def test_k0_equals_full(self, config):
        full, dec = flops_full(config, 3, 6), flops_decomposed(config, 3, 6, 0)
        assert dec.online == full.online and dec.offline == 0 and dec.cache_bytes == 0
        assert dec.by_op == full.by_op

    def test_k_equals_n_has_no_joint_layer(self, config):
        rep = flops_decomposed(config, 3, 6, config.n_layers)
        q_layer = rep.per_layer[0]
        assert rep.per_layer == [q_layer] * config.n_layers
        assert rep.online == rep.embedding + config.n_layers * q_layer + rep.head

    def test_cache_bytes(self, config):
        # passage block is p_len tokens plus the trailing separator
        assert flops_decomposed(config, 3, 6, 1).cache_bytes == 7 * config.hidden_dim * 4
        assert flops_decomposed(config, 3, 6, 1, bytes_per_scalar=2).cache_bytes == 7 * 8 * 2

    @pytest.mark.parametrize("k", [-1, 3])
    def test_k_out_of_range(self, config, k):
        with pytest.raises(ParameterError):
            flops_decomposed(config, 3, 6, k)

    def test_bad_lengths(self, config):
        with pytest.raises(InputError):
            flops_full(config, 0, 6)

    def test_monotone_in_k(self):
        for config in (tiny_config(n_layers=5), BERT_BASE):
            online = [flops_decomposed(config, 32, 100, k).online
                      for k in range(config.n_layers + 1)]
            assert all(a > b for a, b in zip(online, online[1:]))

    def test_parts_add_up(self):
        rep = flops_full(BERT_BASE, 32, 286)
        assert rep.embedding + rep.attention + rep.ffn + rep.head == rep.online
        assert sum(rep.by_op.values()) == rep.online


class TestCountOracle:
    def test_single_matmul(self):
        c = count_oracle(lambda: Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 4))))
        assert c.total == 48

    def test_tiny_spec_shape(self):
        # n=2, d=8, ffn=16, s=6: one question token and two passage tokens
        config = tiny_config(n_layers=2, hidden_dim=8, ffn_dim=16, q_max=1, p_max=2)
        w = EncoderWeights.init(config, seed=3)
        rng = np.random.default_rng(0)
        q, p = _ids(rng, config, 1), _ids(rng, config, 2)
        counted = count_oracle(lambda: forward(pack_pair(q, p, config), w))
        assert counted.total == flops_full(config, 1, 2).online
        nonzero = {op: n for op, n in counted.by_op.items() if n}
        assert nonzero == {op: n for op, n in flops_full(config, 1, 2).by_op.items() if n}

    def test_twenty_random_configs(self):
        rng = np.random.default_rng(2024)
        for i in range(20):
            heads = int(rng.choice([1, 2, 4]))
            config = tiny_config(n_layers=int(rng.integers(1, 5)),
                                 hidden_dim=heads * int(rng.integers(1, 5)), n_heads=heads,
                                 ffn_dim=int(rng.integers(1, 20)), q_max=int(rng.integers(1, 5)),
                                 p_max=int(rng.integers(1, 9)), seed=i)
            w = EncoderWeights.init(config)
            k = int(rng.integers(0, config.n_layers + 1))
            q, p = _ids(rng, config, config.q_max), _ids(rng, config, config.p_max)
            full = count_oracle(lambda: forward(pack_pair(q, p, config), w)).total
            dec = count_oracle(lambda: deformer_forward(q, p, transfer_weights(w, k))).total
            rep = flops_decomposed(config, config.q_max, config.p_max, k)
            assert full == flops_full(config, config.q_max, config.p_max).online
            assert dec == rep.online + rep.offline


class TestMemory:
    def test_hand_liveness_table(self):
        # n=2, d=8, h=2, f=16, q=2, p=3: question block 4 rows, passage block 4, joint 8.
        #   joint layer:    8*8 + 2*8*8 + 8*16 = 320 scalars
        #   question layer: 4*8 + 2*4*4 + 4*16 = 128 scalars
        #   cached passage: 4*8              =  32 scalars
        # full       = 2 * 320             = 640 scalars = 2560 bytes
        # decomposed = 128 + 32 + 320      = 480 scalars = 1920 bytes (k = 1)
        config = tiny_config(n_layers=2, hidden_dim=8, n_heads=2, ffn_dim=16)
        assert memory_estimate(config, 2, 3, 1, "full") == 2560
        assert memory_estimate(config, 2, 3, 1, "decomposed") == 1920
        assert memory_estimate(config, 2, 3, 2, "decomposed") == 4 * (2 * 128 + 32)
        assert memory_estimate(config, 2, 3, 1, "full", bytes_per_scalar=2) == 1280

    def test_k0_modes_equal(self, config):
        assert memory_estimate(config, 3, 6, 0, "full") == memory_estimate(config, 3, 6, 0,
                                                                           "decomposed")

    def test_unknown_mode(self, config):
        with pytest.raises(InputError):
            memory_estimate(config, 3, 6, 1, "sideways")


class TestCost:
    def test_original(self):
        assert abs(cost_original(CostParams(t_b=4.6)) - 148.5) <= 0.1

    def test_decomposed(self):
        cost = cost_decomposed(CostParams(t_b=1.4))
        assert abs(cost.total - 61.7) <= 0.1
        assert cost.reads == pytest.approx(12.0) and cost.storage == pytest.approx(4.52)

    def test_gpu_term_only(self):
        assert abs(cost_decomposed(CostParams(t_b=1.4, s=0, r_u=0)).total - 45.2) <= 0.1

    def test_decomposed_cheaper(self):
        assert cost_decomposed(CostParams(t_b=1.4)).total < cost_original(CostParams(t_b=4.6))

    def test_no_sequences(self):
        assert cost_original(CostParams(n_seq=0)) == 0.0

    def test_linear_in_price(self):
        assert cost_original(CostParams(g_u=4.96)) == pytest.approx(
            2 * cost_original(CostParams(g_u=2.48)), rel=1e-15)

    @pytest.mark.parametrize("kwargs", [{"b": 0}, {"g_u": -1.0}, {"r_u": -0.1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            CostParams(**kwargs)
