import numpy as np
import pytest

from spdsim.data import sample_calibration, synthetic_corpus, tokenize_bytes
from spdsim.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(n_layers=2, max_seq=64)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return init_model(small_cfg, seed=7)


@pytest.fixture(scope="session")
def bias_cfg():
    return ModelConfig(n_layers=2, max_seq=64, attn_out_bias=True,
                       norm_kind="layernorm")


@pytest.fixture(scope="session")
def bias_model(bias_cfg):
    return init_model(bias_cfg, seed=7)


@pytest.fixture(scope="session")
def corpus_tokens():
    return tokenize_bytes(synthetic_corpus(60_000, seed=0))


@pytest.fixture(scope="session")
def small_calib(corpus_tokens):
    return sample_calibration(corpus_tokens, 4, 48, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
