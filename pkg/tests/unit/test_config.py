"""Test the experiment configuration and its file format."""

import dataclasses
from pathlib import Path

import pytest

from cunet.config import (
    Embedding,
    ExperimentConfig,
    FilmMode,
    GeneratorConfig,
    LossReduction,
    default_data_root,
    load_config,
    preset,
    save_config,
)
from cunet.constants import ENVVAR_NAME_DATA_ROOT
from cunet.exceptions import ConfigError, NotFound


@pytest.mark.parametrize("name", ["default", "tiny"])
def test_presets_are_valid(name):
    """Ensure every built-in preset passes validation."""
    preset(name).validate()


def test_unknown_preset():
    """Ensure an unknown preset name is reported."""
    with pytest.raises(ConfigError):
        preset("huge")


def test_tiny_preset_shapes():
    """Ensure the tiny preset pairs its spectrogram with a matching model input."""
    config = preset("tiny")
    assert config.model.input_shape == (32, 16)
    assert config.model.encoder_channels == (4, 8, 16)


def test_save_and_load(tmp_path):
    """Ensure a saved config file reads back as the same configuration."""
    config = dataclasses.replace(preset("tiny"), data_root=Path("data"), output_dir=Path("out"))
    save_config(config, tmp_path / "config.yaml")
    assert load_config(tmp_path / "config.yaml") == config


def test_file_overrides_preset(tmp_path):
    """Ensure values in a file replace the base values and keep the others."""
    path = tmp_path / "config.yaml"
    path.write_text("train:\n  batch_size: 16\n  loss_reduction: mean\ngenerator:\n  embedding: cnn\n")
    config = load_config(path, preset("tiny"))
    assert config.train.batch_size == 16
    assert config.train.loss_reduction is LossReduction.MEAN
    assert config.generator.embedding is Embedding.CNN
    assert config.spectrogram == preset("tiny").spectrogram


@pytest.mark.parametrize(
    "content",
    [
        "colour: blue\n",
        "train:\n  speed: 3\n",
        "train:\n  batch_size: eight\n",
        "train:\n  progressive: 1\n",
        "model:\n  film_mode: medium\n",
        "- a\n- b\n",
        "train: [unclosed\n",
    ],
)
def test_invalid_files(tmp_path, content):
    """Ensure unknown keys, wrong types, and malformed YAML are configuration errors."""
    path = tmp_path / "config.yaml"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path):
    """Ensure a missing config file is reported as such."""
    with pytest.raises(NotFound):
        load_config(tmp_path / "missing.yaml")


def test_dedicated_from_file(tmp_path):
    """Ensure a dedicated run can be described in a file."""
    path = tmp_path / "config.yaml"
    path.write_text("model:\n  conditioned: false\ngenerator: null\ndedicated_task: bass\n")
    config = load_config(path)
    config.validate()
    assert config.generator is None
    assert config.trained_tasks == ("bass",)


@pytest.mark.parametrize(
    "change",
    [
        lambda c: dataclasses.replace(c, train=dataclasses.replace(c.train, batch_size=1)),
        lambda c: dataclasses.replace(c, model=dataclasses.replace(c.model, film_mode=FilmMode.COMPLEX)),
        lambda c: dataclasses.replace(c, model=dataclasses.replace(c.model, input_shape=(64, 16))),
        lambda c: dataclasses.replace(c, model=dataclasses.replace(c.model, kernel=(4, 4))),
        lambda c: dataclasses.replace(c, generator=GeneratorConfig(n_tasks=3)),
        lambda c: dataclasses.replace(c, generator=None),
        lambda c: dataclasses.replace(c, dedicated_task="bass"),
        lambda c: dataclasses.replace(c, tasks=("vocals", "vocals", "bass", "rest")),
        lambda c: dataclasses.replace(c, spectrogram=dataclasses.replace(c.spectrogram, hop=0)),
        lambda c: dataclasses.replace(c, eval=dataclasses.replace(c.eval, filter_len=0)),
    ],
)
def test_inconsistent_configs(change):
    """Ensure inconsistent sections are rejected."""
    with pytest.raises(ConfigError):
        change(preset("tiny")).validate()


def test_dedicated_task_must_be_known():
    """Ensure a dedicated task is one of the configured tasks."""
    config = preset("tiny")
    config = dataclasses.replace(
        config,
        model=dataclasses.replace(config.model, conditioned=False),
        generator=None,
        dedicated_task="piano",
    )
    with pytest.raises(ConfigError):
        config.validate()


def test_digest_tracks_the_architecture_only():
    """Ensure the digest changes with the architecture but not with training settings."""
    config = preset("tiny")
    retrained = dataclasses.replace(config, train=dataclasses.replace(config.train, learning_rate=0.01))
    wider = dataclasses.replace(config, model=dataclasses.replace(config.model, base_filters=8))
    assert config.architecture_digest() == retrained.architecture_digest()
    assert config.architecture_digest() != wider.architecture_digest()
    assert len(config.architecture_digest()) == 64


def test_variant_names():
    """Ensure variants map to their FiLM mode and embedding and back."""
    generator = GeneratorConfig.from_variant("CoC", n_tasks=4)
    assert generator.film_mode is FilmMode.COMPLEX
    assert generator.embedding is Embedding.CNN
    assert generator.variant == "CoC"
    assert GeneratorConfig().variant == "SiF"


def test_default_data_root(monkeypatch, tmp_path):
    """Ensure the dataset root can come from the environment."""
    monkeypatch.delenv(ENVVAR_NAME_DATA_ROOT, raising=False)
    assert default_data_root() is None
    monkeypatch.setenv(ENVVAR_NAME_DATA_ROOT, str(tmp_path))
    assert default_data_root() == tmp_path


def test_default_experiment_matches_full_scale():
    """Ensure the defaults describe the full-scale setup."""
    config = ExperimentConfig()
    assert config.spectrogram.sample_rate == 8192
    assert config.model.input_shape == (512, 128)
    assert config.model.encoder_channels == (16, 32, 64, 128, 256, 512)
    assert config.train.progressive_period == 5
