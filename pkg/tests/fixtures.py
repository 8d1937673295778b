import pytest
from configuraptor.singleton import Singleton

from src.edwh_clipdistill.checkpoint import new_train_state
from src.edwh_clipdistill.config import load_preset
from src.edwh_clipdistill.data import eval_batch, generate_corpus, make_batch
from src.edwh_clipdistill.helpers import deterministic_mode


@pytest.fixture
def clean_settings():
    Singleton.clear()  # clean cached Settings
    yield
    Singleton.clear()


@pytest.fixture
def tiny_cfg():
    return load_preset("tiny")


@pytest.fixture
def tiny_corpus(tiny_cfg):
    return generate_corpus(24, tiny_cfg.seed, tiny_cfg.source_size)


@pytest.fixture
def tiny_state(tiny_cfg):
    return new_train_state(tiny_cfg)


@pytest.fixture
def tiny_batch(tiny_cfg, tiny_corpus):
    return make_batch(tiny_corpus, tiny_cfg, 0)


@pytest.fixture
def tiny_eval_batch(tiny_cfg, tiny_corpus):
    return eval_batch(tiny_corpus[: tiny_cfg.batch_size], tiny_cfg)


@pytest.fixture
def single_threaded():
    with deterministic_mode():
        yield
