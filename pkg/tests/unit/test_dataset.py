"""Test the stem datasets: synthesis, manifests, splitting, and sampling."""

import logging

from hypothesis import given, settings
from hypothesis import strategies as st
import librosa
import numpy as np
import pytest

from cunet.audio import Patch, load_wav
from cunet.conditioning import one_hot
from cunet.constants import DEFAULT_TASKS, MANIFEST_NAME, MIXTURE_STEM
from cunet.dataset import (
    DatasetManifest,
    StemDataset,
    progressive_weight,
    sample_instance,
    split_dataset,
    synth_dataset,
)
from cunet.exceptions import DataError, FormatError, InputError, NotFound
from tests.constants import SYNTH_DURATION, SYNTH_TEST_TRACKS, SYNTH_TRACKS


def test_synth_layout(synth_manifest):
    """Ensure every track has its stems and mixture, and the last tracks form the test partition."""
    assert len(synth_manifest.tracks) == SYNTH_TRACKS
    assert len(synth_manifest.test_ids) == SYNTH_TEST_TRACKS
    assert synth_manifest.test_ids == (f"track_{SYNTH_TRACKS - 1:03d}",)
    assert (synth_manifest.root / MANIFEST_NAME).is_file()
    for track_id in synth_manifest.train_ids:
        for stem in (*DEFAULT_TASKS, MIXTURE_STEM):
            assert synth_manifest.stem_path(track_id, stem).is_file()


def test_manifest_reads_back(synth_manifest):
    """Ensure the written manifest loads into an equal object."""
    assert DatasetManifest.load(synth_manifest.root) == synth_manifest


def test_mixture_is_the_sum_of_the_stems(synth_manifest):
    """Ensure the mixture equals the float32 sum of the four stems and stays below full scale."""
    track_id = synth_manifest.train_ids[0]
    stems = [load_wav(synth_manifest.stem_path(track_id, task)).samples.astype(np.float32) for task in DEFAULT_TASKS]
    mixture = load_wav(synth_manifest.stem_path(track_id, MIXTURE_STEM))
    assert mixture.duration == pytest.approx(SYNTH_DURATION)
    np.testing.assert_array_equal(mixture.samples.astype(np.float32), stems[0] + stems[1] + stems[2] + stems[3])
    assert np.max(np.abs(mixture.samples)) <= 0.9 + 1e-6


@pytest.mark.parametrize("track_index", range(SYNTH_TRACKS))
def test_stems_have_distinct_spectral_signatures(synth_manifest, track_index):
    """Ensure the spectral centroids order bass < vocals < rest and the drums are the broadest stem."""
    track = synth_manifest.tracks[track_index]
    centroid = {}
    bandwidth = {}
    for task in DEFAULT_TASKS:
        signal = load_wav(synth_manifest.stem_path(track.track_id, task))
        centroid[task] = np.mean(librosa.feature.spectral_centroid(y=signal.samples, sr=signal.sample_rate))
        bandwidth[task] = np.mean(librosa.feature.spectral_bandwidth(y=signal.samples, sr=signal.sample_rate))
    assert centroid["bass"] < centroid["vocals"] < centroid["rest"]
    assert max(bandwidth, key=bandwidth.get) == "drums"


def test_synth_same_seed_same_bytes(tmp_path):
    """Ensure identical arguments write byte-identical files."""
    first = synth_dataset(1, 4.0, seed=11, out_dir=tmp_path / "a", n_test=0)
    second = synth_dataset(1, 4.0, seed=11, out_dir=tmp_path / "b", n_test=0)
    for stem in (*DEFAULT_TASKS, MIXTURE_STEM):
        assert first.stem_path("track_000", stem).read_bytes() == second.stem_path("track_000", stem).read_bytes()


def test_synth_different_seed_different_audio(tmp_path):
    """Ensure the seed changes the audio."""
    first = synth_dataset(1, 4.0, seed=1, out_dir=tmp_path / "a", n_test=0)
    second = synth_dataset(1, 4.0, seed=2, out_dir=tmp_path / "b", n_test=0)
    assert first.stem_path("track_000", "bass").read_bytes() != second.stem_path("track_000", "bass").read_bytes()


@pytest.mark.parametrize(
    ("n_tracks", "duration", "n_test"),
    [(2, 3.9, 0), (0, 4.0, 0), (2, 4.0, 3), (2, 4.0, -1)],
)
def test_synth_invalid_arguments(tmp_path, n_tracks, duration, n_test):
    """Ensure short tracks, no tracks, and impossible test partitions are rejected."""
    with pytest.raises(InputError):
        synth_dataset(n_tracks, duration, seed=0, out_dir=tmp_path, n_test=n_test)


def test_manifest_missing(tmp_path):
    """Ensure a directory without a manifest is reported as such."""
    with pytest.raises(NotFound):
        DatasetManifest.load(tmp_path)


@pytest.mark.parametrize(
    "content",
    [
        "sample_rate: 8192\n",
        "tracks:\n  - partition: train\n",
        "tracks:\n  - {id: a, partition: validation}\n",
        "tracks: [unclosed\n",
    ],
)
def test_manifest_malformed(tmp_path, content):
    """Ensure missing tracks, missing ids, unknown partitions, and broken YAML are format errors."""
    (tmp_path / MANIFEST_NAME).write_text(content)
    with pytest.raises(FormatError):
        DatasetManifest.load(tmp_path)


def test_split_is_deterministic_and_disjoint():
    """Ensure the same seed gives the same split and no track is in two partitions."""
    ids = [f"t{index}" for index in range(10)]
    split = split_dataset(ids, n_val=3, seed=4, test_ids=["x", "y"])
    assert split == split_dataset(ids, n_val=3, seed=4, test_ids=["x", "y"])
    assert len(split.val_tracks) == 3
    assert set(split.train_tracks) | set(split.val_tracks) == set(ids)
    assert not set(split.train_tracks) & set(split.val_tracks)
    assert split.test_tracks == ("x", "y")


@settings(max_examples=40, deadline=None)
@given(n_tracks=st.integers(2, 30), data=st.data())
def test_split_sizes(n_tracks, data):
    """Ensure the validation partition has exactly `n_val` tracks and the training tracks stay sorted."""
    n_val = data.draw(st.integers(0, n_tracks - 1))
    seed = data.draw(st.integers(0, 2**32 - 1))
    split = split_dataset([f"t{index}" for index in range(n_tracks)], n_val, seed)
    assert len(split.val_tracks) == n_val
    assert len(split.train_tracks) == n_tracks - n_val
    assert list(split.train_tracks) == sorted(split.train_tracks)


def test_split_rejects_duplicates():
    """Ensure a test track can not also be a training track."""
    with pytest.raises(InputError):
        split_dataset(["a", "b", "c"], 1, 0, test_ids=["c"])


@pytest.mark.parametrize("n_val", [-1, 3])
def test_split_n_val_out_of_range(n_val):
    """Ensure at least one training track remains."""
    with pytest.raises(InputError):
        split_dataset(["a", "b", "c"], n_val, 0)


def test_split_without_validation_warns(caplog):
    """Ensure an empty validation partition is allowed with a warning."""
    with caplog.at_level(logging.WARNING):
        split = split_dataset(["a", "b"], 0, 0)
    assert split.val_tracks == ()
    assert "early stopping is disabled" in caplog.text


def test_track_spectrograms(tiny_dataset, tiny_config):
    """Ensure a track's spectrograms share the mixture scale and keep the signal length."""
    track = tiny_dataset.track(tiny_dataset.manifest.train_ids[0])
    assert track.mixture.values.shape[0] == tiny_config.spectrogram.window_size // 2 + 1
    assert track.mixture.values.max() == pytest.approx(1.0)
    assert set(track.stems) == set(DEFAULT_TASKS)
    assert all(stem.norm_scale == track.norm_scale for stem in track.stems.values())
    assert track.signal_length == int(SYNTH_DURATION * tiny_config.spectrogram.sample_rate)


def test_tracks_are_cached(tiny_dataset):
    """Ensure a track is read once and then served from the cache."""
    track_id = tiny_dataset.manifest.train_ids[0]
    assert tiny_dataset.track(track_id) is tiny_dataset.track(track_id)


def test_preload_with_workers(tiny_dataset):
    """Ensure tracks can be read concurrently ahead of sampling."""
    tiny_dataset.preload(tiny_dataset.manifest.train_ids, workers=2)
    for track_id in tiny_dataset.manifest.train_ids:
        assert tiny_dataset.track(track_id).mixture.n_frames > 0


def test_missing_stem(synth_manifest, tiny_config):
    """Ensure a task without a stem file is a data error."""
    dataset = StemDataset(synth_manifest, tiny_config.spectrogram, (*DEFAULT_TASKS, "piano"))
    with pytest.raises(DataError):
        dataset.track(synth_manifest.train_ids[0])


def test_sample_instance(tiny_dataset, tiny_config):
    """Ensure an instance pairs aligned mixture and target patches with the task's one-hot vector."""
    instance = sample_instance(tiny_dataset, tiny_dataset.manifest.train_ids, 2, np.random.default_rng(0))
    assert instance.X.values.shape == tiny_config.model.input_shape
    assert instance.Y.values.shape == tiny_config.model.input_shape
    assert instance.z == one_hot(2, 4)
    assert instance.task_index == 2
    assert instance.X.frame_offset == instance.Y.frame_offset
    assert instance.X.source_track == instance.Y.source_track


def test_same_seed_same_instance(tiny_dataset):
    """Ensure sampling is fully determined by the random generator."""
    ids = tiny_dataset.manifest.train_ids
    first = sample_instance(tiny_dataset, ids, 1, np.random.default_rng(5))
    second = sample_instance(tiny_dataset, ids, 1, np.random.default_rng(5))
    np.testing.assert_array_equal(first.X.values, second.X.values)
    np.testing.assert_array_equal(first.Y.values, second.Y.values)


def test_target_comes_from_the_task_stem(tiny_dataset):
    """Ensure the target patch is cut from the selected task's stem at the mixture's offset."""
    instance = sample_instance(tiny_dataset, tiny_dataset.manifest.train_ids, 0, np.random.default_rng(1))
    stem = tiny_dataset.track(instance.Y.source_track).stems["vocals"]
    offset = instance.Y.frame_offset
    expected = stem.values[:-1, offset : offset + instance.Y.n_valid]
    np.testing.assert_array_equal(instance.Y.values[:, : instance.Y.n_valid], expected)


def test_sample_from_no_tracks(tiny_dataset):
    """Ensure sampling needs at least one track."""
    with pytest.raises(DataError):
        sample_instance(tiny_dataset, (), 0, np.random.default_rng(0))


def test_progressive_weight_skips_without_drawing():
    """Ensure instances off the weighting period are returned unchanged and consume no random draw."""
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    z = one_hot(1, 4)
    Y = Patch(np.ones((2, 2)), "t", 0, 2)
    for counter in (1, 2, 3, 4, 6):
        weighted_z, weighted_Y = progressive_weight(z, Y, counter, rng)
        assert weighted_z is z
        assert weighted_Y is Y
    assert rng.bit_generator.state == state


def test_progressive_weight_statistics():
    """Ensure exactly one instance in five is weighted, with weights averaging one half."""
    rng = np.random.default_rng(0)
    Y = Patch(np.ones((1, 1)), "t", 0, 1)
    weights = []
    for counter in range(1, 10_001):
        z = one_hot(counter % 4, 4)
        weighted_z, _ = progressive_weight(z, Y, counter, rng)
        if weighted_z is not z:
            weights.append(max(weighted_z.weights))
    assert len(weights) == 10_000 // 5
    assert 0.47 <= np.mean(weights) <= 0.53


def test_progressive_weight_scales_z_and_y_together():
    """Ensure the condition vector and the target are multiplied by the same weight."""
    z = one_hot(1, 4)
    Y = Patch(np.ones((2, 2)), "t", 0, 2)
    weight = np.random.default_rng(3).uniform(0.0, 1.0)
    weighted_z, weighted_Y = progressive_weight(z, Y, 5, np.random.default_rng(3))
    assert weighted_z.weights[1] == pytest.approx(weight)
    np.testing.assert_allclose(weighted_Y.values, weight)
    assert weighted_Y.frame_offset == Y.frame_offset
