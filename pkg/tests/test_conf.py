import json
import os

import pytest

from unittest import mock

from refseg.conf import ImproperlyConfigured, setup_settings
from refseg.experiment import ExperimentConfig, load_config


@mock.patch.dict(os.environ, {"REFSEG_ENV_FILE": "/nonexistent.env"})
def test_defaults():
    settings = setup_settings()
    assert settings.LOG_LEVEL == "INFO"
    assert settings.DESCRIPTOR_BACKEND == "refseg.descriptors.handcrafted"
    assert settings.LOGGING_CONFIG["loggers"]["refseg"]["level"] == "INFO"


@mock.patch.dict(
    os.environ,
    {"REFSEG_ENV_FILE": "/nonexistent.env", "REFSEG_LOG": "DEBUG"},
)
def test_log_level_is_case_insensitive():
    assert setup_settings().LOG_LEVEL == "DEBUG"


@pytest.mark.parametrize(
    "environment",
    [{"REFSEG_LOG": "loud"}, {"REFSEG_NUM_THREADS": "many"}],
)
def test_invalid_environment(environment):
    environment = dict(environment, REFSEG_ENV_FILE="/nonexistent.env")
    with mock.patch.dict(os.environ, environment):
        with pytest.raises(ImproperlyConfigured):
            setup_settings()


def test_env_file_is_read(tmp_path):
    env_file = tmp_path / "refseg.env"
    env_file.write_text("REFSEG_NUM_THREADS=3\n")
    with mock.patch.dict(os.environ, {"REFSEG_ENV_FILE": str(env_file)}):
        os.environ.pop("REFSEG_NUM_THREADS", None)
        assert setup_settings().NUM_THREADS == 3


def test_load_config_defaults():
    config = load_config()
    assert config == ExperimentConfig()
    assert config.ssl.threshold == 0.95
    assert config.temperature == 0.1


def test_load_config_precedence(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps({"seed": 4, "ratio": 0.1, "ssl": {"iterations": 20}})
    )
    config = load_config(
        str(path), {"seed": 7, "ssl.iterations": None, "pretrain.steps": 3}
    )
    assert config.seed == 7
    assert config.ratio == 0.1
    assert config.ssl.iterations == 20
    assert config.pretrain.steps == 3


@pytest.mark.parametrize(
    ["raw", "message"],
    [
        ({"sed": 1}, "Unknown experiment keys: sed"),
        ({"ssl": {"treshold": 0.9}}, "Unknown ssl keys"),
        ({"ratio": 0.0}, "ratio"),
        ({"ssl": {"dropout_prob": 0.2}}, "Invalid ssl"),
        ([1, 2], "JSON object"),
    ],
)
def test_load_config_rejects_bad_files(tmp_path, raw, message):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ImproperlyConfigured, match=message):
        load_config(str(path))


def test_derived_configs_follow_toggles():
    toggles = {"use_memory": False, "use_feedback": False}
    config = load_config(overrides=toggles)
    assert config.segmenter_config(3).use_memory is False
    assert config.segmenter_config(3).num_classes == 3
    assert config.ssl_config().use_feedback is False
    assert config.header["seed"] == 1
    assert config.hash == load_config(overrides=toggles).hash
    assert config.hash != load_config().hash
