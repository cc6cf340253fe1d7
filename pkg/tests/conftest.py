import numpy as np
import pytest

from deformer.encoder import EncoderWeights, ModelConfig


def tiny_config(n_layers=2, hidden_dim=8, n_heads=2, ffn_dim=12, vocab_size=16, q_max=3,
                p_max=6, seed=0) -> ModelConfig:
    return ModelConfig(n_layers=n_layers, hidden_dim=hidden_dim, n_heads=n_heads,
                       ffn_dim=ffn_dim, vocab_size=vocab_size,
                       max_positions=q_max + p_max + 3, q_max=q_max, p_max=p_max, seed=seed)


def random_tokens(rng, config: ModelConfig, lo: int, hi: int) -> list[int]:
    n = int(rng.integers(lo, hi + 1))
    return [int(t) for t in rng.integers(4, config.vocab_size, n)]


def random_pair(rng, config: ModelConfig):
    return (random_tokens(rng, config, 1, config.q_max),
            random_tokens(rng, config, 1, config.p_max))


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def weights(config):
    return EncoderWeights.init(config, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
