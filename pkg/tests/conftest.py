import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sarlab.biencoder import BiEncoder, EncoderConfig, Stage1Config  # noqa: E402
from sarlab.distill import Stage2Config  # noqa: E402
from sarlab.synthetic import SyntheticSpec, generate_synthetic  # noqa: E402

TINY_SPEC = SyntheticSpec(n_topics=2, articles_per_topic=16, n_train=16, n_val=4, n_test=6,
                          concepts_per_topic=4, topic_words=10, common_words=20,
                          background_words=40, article_len=(8, 20), query_len=(4, 8))
TINY_ENCODER = EncoderConfig(dim=8, layers=1, heads=2, ff_dim=16, dropout=0.1, chunk_len=8,
                             max_chunks=3, query_max_len=12, article_layers=1)
TINY_STAGE1 = Stage1Config(epochs=2, batch_size=8, peak_lr=5e-3)
TINY_STAGE2 = Stage2Config(epochs=2, batch_size=8, gat_heads=2)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(TINY_SPEC, seed=3)


@pytest.fixture
def tiny_model(tiny_data):
    corpus = tiny_data[0]
    return BiEncoder(TINY_ENCODER, len(corpus.vocab), np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
