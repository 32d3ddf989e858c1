import numpy as np
import pytest
from hypothesis import settings

from trimformer.data import ingest_text, sample_calibration, synthetic_markov_text
from trimformer.distill import conventional_loop
from trimformer.model import ModelConfig, build_model

settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile("ci")

TOY_CONFIG = ModelConfig(
    num_layers=4,
    d_model=64,
    num_heads=8,
    num_query_groups=2,
    d_head=8,
    d_hidden=256,
    vocab_size=257,
    max_seq_len=64,
)


@pytest.fixture(scope="session")
def toy_config():
    return TOY_CONFIG


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_text(synthetic_markov_text(n_docs=120, doc_len=240, seed=7))
    return ingest_text(str(path), seed=0)


@pytest.fixture(scope="session")
def toy_teacher(corpus):
    """A small model trained long enough to have real structure to distill."""
    model = build_model(TOY_CONFIG, seed=11)
    model, _ = conventional_loop(
        model, corpus, steps=400, seed=11, batch_size=8, seq_len=32
    )
    return model


@pytest.fixture(scope="session")
def calib(corpus):
    return sample_calibration(corpus, n=16, seq_len=32, seed=3)


@pytest.fixture(scope="session")
def eval_batch(corpus):
    return sample_calibration(corpus, n=16, seq_len=32, seed=5, split="val")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
