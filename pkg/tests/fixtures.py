import json

import pytest

from refseg.data import generate_synthetic, split_labeled
from refseg.segmenter import SegmenterConfig, build_segmenter
from refseg.ssl import SSLConfig
from refseg.templatebank import build_bank


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic(
        seed=1,
        num_patients=6,
        slices_per_patient=2,
        num_classes=2,
        size=32,
        root=str(root),
    )


@pytest.fixture(scope="module")
def split_corpus(corpus):
    return split_labeled(corpus, 0.4, seed=1)


@pytest.fixture(scope="module")
def bank(corpus):
    return build_bank(corpus, "labeled")


@pytest.fixture
def small_config():
    return SegmenterConfig(
        num_classes=2, feature_channels=16, prompt_dim=8, num_heads=2
    )


@pytest.fixture
def small_segmenter(small_config):
    return build_segmenter(small_config, seed=3)


@pytest.fixture
def ssl_config():
    return SSLConfig(
        iterations=4,
        warmup=0,
        labeled_batch=2,
        unlabeled_batch=2,
        channels=8,
        eval_interval=2,
        log_interval=2,
    )


TINY_EXPERIMENT = {
    "ratio": 0.5,
    "corpus": {"patients": 4, "slices": 1, "size": 32, "pretrain_patients": 3},
    "segmenter": {"feature_channels": 16, "prompt_dim": 8, "num_heads": 2},
    "pretrain": {"steps": 1, "batch_size": 2, "log_interval": 1},
    "ssl": {
        "iterations": 2,
        "warmup": 0,
        "labeled_batch": 2,
        "unlabeled_batch": 2,
        "channels": 8,
        "eval_interval": 2,
        "log_interval": 1,
    },
}


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(TINY_EXPERIMENT))
    return str(path)
