import numpy as np
import pytest

from htqe.dataset import gen_synthetic
from htqe.embeddings import random_embeddings
from htqe.model import ModelConfig, QEModel

TINY = dict(embed_dim=6, conv_channels=5, lstm_hidden=4)


def tiny_model(seed=3, **overrides):
    corpus = gen_synthetic(12, 1)
    src = random_embeddings([t for ex in corpus for t in ex.source_tokens], 6, seed=1)
    tgt = random_embeddings([t for ex in corpus for t in ex.target_tokens], 6, seed=2)
    cfg = ModelConfig(**{**TINY, **overrides})
    return QEModel(cfg, src, tgt, seed=seed), corpus


def randomize(model, seed=0, scale=1.0):
    """Move every trainable tensor to a random O(scale) point (PAD rows stay zero)."""
    rng = np.random.default_rng(seed)
    for p in model.trainable().values():
        p.data[...] = rng.uniform(-scale, scale, p.shape)
    for table in model.vocabs.values():
        table.matrix.data[table.pad_index] = 0.0


@pytest.fixture
def tiny():
    return tiny_model()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
