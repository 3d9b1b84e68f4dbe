import json

import numpy as np
import pytest

from model.reflect import build_model_state
from model.tensor import make_rng, set_default_dtype
from utils.config import RunConfig, parse_run_config
from utils.corpus import Vocab, collate
from utils.synthetic import generate_synthetic

TINY = {
    "data": {"max_context_len": 40},
    "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "ff_mult": 2, "max_response_len": 12},
    "train": {"batch_size": 4, "warmup_steps": 10, "max_iters": 3, "eval_every": 2, "patience": 2, "snapshot_every": 2},
    "diffusion": {"T": 10, "emu_steps": 2, "hidden": 16, "time_dim": 4},
}


def tiny_document(**sections) -> dict:
    """TINY merged with per-section overrides."""
    document = json.loads(json.dumps(TINY))
    for name, values in sections.items():
        document.setdefault(name, {}).update(values)
    return document


def grown_vocab(vocab: Vocab) -> Vocab:
    """`vocab` plus one token no corpus uses."""
    return Vocab.from_json(json.dumps(json.loads(vocab.to_json()) + ["zzzextra"]))


@pytest.fixture(autouse=True)
def float64_default():
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")


@pytest.fixture
def rng():
    return make_rng(0)


@pytest.fixture
def tiny_config() -> RunConfig:
    return parse_run_config(tiny_document())


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic(seed=0, n_dialogues=12)


@pytest.fixture(scope="session")
def vocab(corpus) -> Vocab:
    return Vocab.build(corpus)


@pytest.fixture
def model_state(tiny_config, vocab):
    return build_model_state(tiny_config, vocab)


@pytest.fixture
def batch(corpus, vocab, tiny_config):
    return collate(corpus[:4], vocab, tiny_config.data.max_context_len, tiny_config.model.max_response_len)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_document()), encoding="utf-8")
    return str(path)


def assert_distribution(p: np.ndarray, axis: int = -1, atol: float = 1e-9) -> None:
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=atol)
