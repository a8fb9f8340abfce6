import numpy as np
import pytest

from core.codecs import Vocabulary
from core.dataset import DataConfig, gen_dataset
from core.model import ModelConfig
from core.ndcore import precision
from core.seqlayout import Packer

TINY_DATA = DataConfig(
    pretrain_chains=2,
    demo_chains=3,
    eval_chains=1,
    vqa_train_states=4,
    vqa_eval_states=2,
    vqa_per_state=3,
    dump_ppm=2,
)


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def packer(vocab):
    return Packer(vocab, max_len=192, action_horizon=4)


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(
        n_layers=1, d_model=16, n_heads=2, ffn_mult=2, max_len=192,
        vocab_size=vocab.size, action_horizon=4, action_hidden=16,
    )


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    gen_dataset(TINY_DATA, str(out), seed=0)
    return str(out)
