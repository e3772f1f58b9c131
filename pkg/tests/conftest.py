import numpy as np
import pytest

from dialogail.policy import PolicyConfig, TransformerPolicy
from dialogail.textdata import SynthSpec, build_trajectories, build_vocab, synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    convs = synth_corpus(SynthSpec(n_conversations=40, n_tweets=8, seed=0))
    trajs, stats = build_trajectories(convs)
    vocab = build_vocab(trajs, 128)
    return convs, trajs, vocab


def make_policy(vocab_size, dtype=np.float64, seed=0, **overrides):
    defaults = dict(embed_dim=16, n_layers=1, n_heads=2, ff_dim=24, max_context=48, max_response=8)
    defaults.update(overrides)
    cfg = PolicyConfig(vocab_size=vocab_size, **defaults)
    return TransformerPolicy(cfg, np.random.default_rng(seed), dtype=dtype)
