import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmdial.corpus import SyntheticSpec, generate_synthetic
from mmdial.model import ModelConfig, init_params
from mmdial.text import build_vocab


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(n_dialogues=12, turns_per_dialogue=4, d_v=3, d_a=2, n_activities=3,
                         min_segments=2, max_segments=4, seed=5)
    samples, oracle = generate_synthetic(spec)
    vocab = build_vocab(t for s in samples for t in s.texts())
    return samples, oracle, vocab


@pytest.fixture
def tiny_config(tiny_data):
    _, _, vocab = tiny_data
    return ModelConfig(n_layers=2, hidden=8, n_heads=2, vocab_size=len(vocab), max_positions=96,
                       d_v=3, d_a=2, dropout=0.0)


@pytest.fixture
def tiny_params64(tiny_config):
    return init_params(tiny_config, seed=3, dtype=np.float64, std=0.3)


def as_numpy(params):
    return {n: t.data.astype(np.float64) for n, t in params.items()}


def random_scorer(seed, vocab_size=8, std=1.0, context_len=None):
    """A tiny random transformer continuing a random text context."""
    from mmdial.batch import Builder
    from mmdial.generation import ContextScorer
    from mmdial.text import BOS_ID, USER1_ID, USER2_ID

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=1, hidden=8, n_heads=2, vocab_size=vocab_size, max_positions=32,
                      d_v=1, d_a=1, dropout=0.0)
    params = init_params(cfg, seed=seed, dtype=np.float64, std=std)
    b = Builder(cfg.feature_dim)
    b.text([BOS_ID], USER1_ID)
    n = context_len if context_len is not None else int(rng.integers(1, 6))
    b.text(rng.integers(0, vocab_size, size=n).tolist(), USER1_ID)
    b.text([USER2_ID], USER2_ID)
    return ContextScorer(params, b, USER2_ID)
