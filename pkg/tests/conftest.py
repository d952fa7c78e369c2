"""Aggregate the pytest fixtures in one location."""

from collections.abc import Generator
import dataclasses

import pytest

from cunet.config import ExperimentConfig, preset
from cunet.dataset import DatasetManifest, StemDataset, synth_dataset
from cunet.logger import LOG
from tests.constants import SYNTH_DURATION, SYNTH_TEST_TRACKS, SYNTH_TRACKS


@pytest.fixture
def _log() -> Generator:
    """Ensure the LOG level is restored to original value."""
    original_log_level = LOG.getEffectiveLevel()
    yield
    LOG.setLevel(original_log_level)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Get the desk-scale config with short training, for tests that fit models."""
    config = preset("tiny")
    train = dataclasses.replace(
        config.train,
        batch_size=4,
        max_epochs=2,
        patience=1,
        instances_per_epoch=8,
        val_instances=8,
        n_val=1,
    )
    return dataclasses.replace(config, train=train)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory: pytest.TempPathFactory) -> DatasetManifest:
    """Write one small synthetic dataset shared by every test of the session."""
    root = tmp_path_factory.mktemp("synth")
    return synth_dataset(SYNTH_TRACKS, SYNTH_DURATION, seed=0, out_dir=root, n_test=SYNTH_TEST_TRACKS)


@pytest.fixture
def tiny_dataset(synth_manifest: DatasetManifest, tiny_config: ExperimentConfig) -> StemDataset:
    """Get a dataset over the shared synthetic tracks with the tiny spectrogram settings."""
    return StemDataset(synth_manifest, tiny_config.spectrogram, tiny_config.tasks)
