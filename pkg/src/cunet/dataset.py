"""Stem datasets: the on-disk layout, the seeded synthetic generator, splitting, and instance sampling.

A dataset root holds a `manifest.yaml` and one directory per track with a WAV file per stem plus the mixture:

```
root/
├── manifest.yaml
├── track_000/
│   ├── mixture.wav
│   ├── vocals.wav
│   ├── drums.wav
│   ├── bass.wav
│   └── rest.wav
└── ...
```
"""

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
import dataclasses
from pathlib import Path
import threading

import numpy as np
from ruamel.yaml import YAML, YAMLError

from cunet.audio import (
    AudioSignal,
    MagnitudeSpectrogram,
    Patch,
    PhaseSpectrogram,
    cut_patch,
    load_wav,
    magnitude_phase,
    normalize_per_song,
    resample,
    stft,
    write_wav,
)
from cunet.conditioning import ConditionVector, one_hot
from cunet.config import SpectrogramConfig
from cunet.constants import (
    DEFAULT_SAMPLE_RATE,
    DEFAULT_TASKS,
    MANIFEST_NAME,
    MIXTURE_STEM,
    PROGRESSIVE_PERIOD,
    STEM_SUFFIX,
)
from cunet.exceptions import DataError, FormatError, InputError, NotFound
from cunet.logger import LOG, progress_spinner

PARTITIONS = ("train", "test")
MIN_SYNTH_DURATION = 4.0
# Peak of the synthetic mixtures, leaving headroom below full scale
SYNTH_PEAK = 0.9


@dataclasses.dataclass(frozen=True)
class TrackEntry:
    """One track of the manifest."""

    track_id: str
    partition: str
    duration: float
    seed: int | None = None


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    """The list of tracks of a dataset root, with their partition."""

    root: Path
    tracks: tuple[TrackEntry, ...]
    tasks: tuple[str, ...] = DEFAULT_TASKS
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def train_ids(self) -> tuple[str, ...]:
        """Get the identifiers of the training partition, which is split again into training and validation."""
        return tuple(track.track_id for track in self.tracks if track.partition == "train")

    @property
    def test_ids(self) -> tuple[str, ...]:
        """Get the identifiers of the fixed test partition."""
        return tuple(track.track_id for track in self.tracks if track.partition == "test")

    def stem_path(self, track_id: str, stem: str) -> Path:
        """Get the path of a stem (or the mixture) of a track."""
        return self.root / track_id / f"{stem}{STEM_SUFFIX}"

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        """Read the manifest of a dataset root."""
        path = Path(root) / MANIFEST_NAME
        if not path.is_file():
            msg = f"No dataset manifest found at {path}"
            raise NotFound(msg)
        yaml = YAML(typ="safe")
        try:
            data = yaml.load(path.read_text(encoding="utf-8"))
            tracks = tuple(
                TrackEntry(
                    track_id=str(entry["id"]),
                    partition=str(entry["partition"]),
                    duration=float(entry.get("duration", 0.0)),
                    seed=entry.get("seed"),
                )
                for entry in data["tracks"]
            )
            manifest = cls(
                root=Path(root),
                tracks=tracks,
                tasks=tuple(data.get("tasks", DEFAULT_TASKS)),
                sample_rate=int(data.get("sample_rate", DEFAULT_SAMPLE_RATE)),
            )
        except (YAMLError, KeyError, TypeError, ValueError) as err:
            msg = f"Dataset manifest `{path}` is malformed"
            raise FormatError(msg) from err
        unknown = sorted({track.partition for track in tracks} - set(PARTITIONS))
        if unknown:
            msg = f"Unknown partition(s) in `{path}`: {', '.join(unknown)}"
            raise FormatError(msg)
        return manifest

    def save(self) -> Path:
        """Write the manifest to the dataset root and return its path."""
        data = {
            "sample_rate": self.sample_rate,
            "tasks": list(self.tasks),
            "tracks": [
                {"id": track.track_id, "partition": track.partition, "duration": track.duration, "seed": track.seed}
                for track in self.tracks
            ],
        }
        yaml = YAML(typ="safe")
        yaml.default_flow_style = False
        path = self.root / MANIFEST_NAME
        with path.open("w", encoding="utf-8") as f:
            yaml.dump(data, f)
        return path


def _synth_stems(rng: np.random.Generator, n_samples: int, sample_rate: int) -> dict[str, np.ndarray]:
    """Generate the four stems of one track. Each has its own spectral signature."""
    t = np.arange(n_samples) / sample_rate

    # Vocals: a harmonic tone with vibrato and a slow loudness contour
    f0 = rng.uniform(200.0, 400.0)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    vocals = sum(np.sin(k * phase) / k for k in range(1, 5))
    vocals *= 0.25 * (0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t) ** 2)

    # Drums: white noise bursts with an exponential decay, at a fixed period
    period = int(rng.uniform(0.25, 0.5) * sample_rate)
    decay = np.exp(-np.arange(period) / (0.03 * sample_rate))
    envelope = np.resize(decay, n_samples)
    drums = 0.3 * envelope * rng.standard_normal(n_samples)

    # Bass: a low tone with a weak second harmonic
    f_bass = rng.uniform(40.0, 120.0)
    bass = 0.3 * (np.sin(2 * np.pi * f_bass * t) + 0.2 * np.sin(4 * np.pi * f_bass * t))

    # Rest: a chirp sweeping slowly between 1 and 3 kHz
    sweep_rate = 1.0 / rng.uniform(2.0, 4.0)
    frequency = 2000.0 + 1000.0 * np.sin(2 * np.pi * sweep_rate * t + rng.uniform(0, 2 * np.pi))
    rest = 0.15 * np.sin(2 * np.pi * np.cumsum(frequency) / sample_rate)

    return {"vocals": vocals, "drums": drums, "bass": bass, "rest": rest}


@progress_spinner("Synthesizing dataset")
def synth_dataset(
    n_tracks: int,
    duration_s: float,
    seed: int,
    out_dir: Path,
    n_test: int | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> DatasetManifest:
    """Write a seeded synthetic four stem dataset and its manifest.

    The stems are written as 32-bit float WAV files and the mixture is their float32 sum, so the mixture equals the
    sum of the stems exactly. The last `n_test` tracks (a fifth by default) form the test partition.
    Identical arguments give byte-identical files.
    """
    if duration_s < MIN_SYNTH_DURATION:
        msg = f"Synthetic tracks must last at least {MIN_SYNTH_DURATION} s, got {duration_s}"
        raise InputError(msg)
    if n_test is None:
        n_test = n_tracks // 5
    if n_tracks < 1 or not 0 <= n_test <= n_tracks:
        msg = f"Need at least one track and 0 <= n_test <= n_tracks, got {n_tracks} tracks and {n_test} test tracks"
        raise InputError(msg)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_samples = int(round(duration_s * sample_rate))
    tracks = []
    for index in range(n_tracks):
        track_id = f"track_{index:03d}"
        rng = np.random.default_rng([seed, index])
        stems = _synth_stems(rng, n_samples, sample_rate)
        peak = np.max(np.abs(sum(stems.values())))
        gain = SYNTH_PEAK / peak if peak > SYNTH_PEAK else 1.0
        stems32 = {name: (samples * gain).astype(np.float32) for name, samples in stems.items()}
        mixture = stems32["vocals"] + stems32["drums"] + stems32["bass"] + stems32["rest"]
        for name, samples in (*stems32.items(), (MIXTURE_STEM, mixture)):
            write_wav(AudioSignal(samples, sample_rate), out_dir / track_id / f"{name}{STEM_SUFFIX}", subtype="FLOAT")
        partition = "test" if index >= n_tracks - n_test else "train"
        tracks.append(TrackEntry(track_id, partition, n_samples / sample_rate, index))
        LOG.debug("Synthesized %s (%s)", track_id, partition)

    manifest = DatasetManifest(root=out_dir, tracks=tuple(tracks), tasks=DEFAULT_TASKS, sample_rate=sample_rate)
    manifest.save()
    LOG.info("Wrote %d synthetic tracks (%d for testing) to %s", n_tracks, n_test, out_dir)
    return manifest


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    """Disjoint training, validation, and test track identifiers."""

    train_tracks: tuple[str, ...]
    val_tracks: tuple[str, ...]
    test_tracks: tuple[str, ...]


def split_dataset(
    track_ids: Sequence[str],
    n_val: int,
    seed: int,
    test_ids: Sequence[str] = (),
) -> DatasetSplit:
    """Split the training partition into training and validation tracks with a seeded shuffle.

    The test partition is taken as given and never shuffled.
    """
    all_ids = [*track_ids, *test_ids]
    if len(set(all_ids)) != len(all_ids):
        duplicates = sorted({track_id for track_id in all_ids if all_ids.count(track_id) > 1})
        msg = f"Duplicated track identifiers: {', '.join(duplicates)}"
        raise InputError(msg)
    if not 0 <= n_val < len(track_ids):
        msg = f"n_val must be in [0, {len(track_ids)}) for {len(track_ids)} training tracks, got {n_val}"
        raise InputError(msg)
    if n_val == 0:
        LOG.warning("No validation tracks: early stopping is disabled")

    order = np.random.default_rng(seed).permutation(len(track_ids))
    shuffled = [track_ids[index] for index in order]
    return DatasetSplit(
        train_tracks=tuple(sorted(shuffled[n_val:])),
        val_tracks=tuple(sorted(shuffled[:n_val])),
        test_tracks=tuple(test_ids),
    )


@dataclasses.dataclass(frozen=True)
class TrackSpectrograms:
    """Normalized magnitudes of a track's mixture and stems, with what is needed to rebuild audio."""

    mixture: MagnitudeSpectrogram
    stems: dict[str, MagnitudeSpectrogram]
    phase: PhaseSpectrogram
    signal_length: int

    @property
    def norm_scale(self) -> float:
        """Get the song scale the magnitudes were divided by."""
        return self.mixture.norm_scale


class StemDataset:
    """Reads tracks on demand and caches their normalized spectrograms. Safe to share between threads."""

    def __init__(self, manifest: DatasetManifest, spectrogram: SpectrogramConfig, tasks: Sequence[str]) -> None:
        """Prepare an empty cache. Tracks are read on first access, from `manifest.root`."""
        self.manifest = manifest
        self.spectrogram = spectrogram
        self.tasks = tuple(tasks)
        self._cache: dict[str, TrackSpectrograms] = {}
        self._lock = threading.Lock()

    def load_signal(self, track_id: str, stem: str) -> AudioSignal:
        """Read a stem (or the mixture) at the configured sample rate."""
        try:
            signal = load_wav(self.manifest.stem_path(track_id, stem))
        except NotFound as err:
            msg = f"Track `{track_id}` has no `{stem}` stem"
            raise DataError(msg) from err
        return resample(signal, self.spectrogram.sample_rate)

    def _magnitude(self, signal: AudioSignal) -> tuple[MagnitudeSpectrogram, PhaseSpectrogram]:
        return magnitude_phase(stft(signal, self.spectrogram.window_size, self.spectrogram.hop))

    def track(self, track_id: str) -> TrackSpectrograms:
        """Get the normalized spectrograms of a track, reading it the first time."""
        with self._lock:
            cached = self._cache.get(track_id)
        if cached is not None:
            return cached

        mixture_signal = self.load_signal(track_id, MIXTURE_STEM)
        mixture, phase = self._magnitude(mixture_signal)
        mixture = normalize_per_song(mixture)
        stems = {}
        for task in self.tasks:
            magnitude, _ = self._magnitude(self.load_signal(track_id, task))
            stems[task] = normalize_per_song(magnitude, mixture.norm_scale)
        entry = TrackSpectrograms(mixture, stems, phase, len(mixture_signal))
        LOG.trace("Cached %s: %d frames, scale %.4g", track_id, mixture.n_frames, mixture.norm_scale)
        with self._lock:
            return self._cache.setdefault(track_id, entry)

    def preload(self, track_ids: Sequence[str], workers: int = 1) -> None:
        """Read and cache tracks ahead of sampling, decoding several at once when `workers > 1`."""
        if workers <= 1:
            for track_id in track_ids:
                self.track(track_id)
            return
        with ThreadPoolExecutor(max_workers=workers) as executor:
            # Consume the results so that worker exceptions propagate
            list(executor.map(self.track, track_ids))


@dataclasses.dataclass(frozen=True)
class TrainingInstance:
    """A mixture patch `X`, the target patch `Y` of the selected task, and the condition vector `z`."""

    X: Patch
    Y: Patch
    z: ConditionVector
    task_index: int


def sample_instance(
    dataset: StemDataset,
    track_ids: Sequence[str],
    task_index: int,
    rng: np.random.Generator,
) -> TrainingInstance:
    """Draw a training instance: a uniformly chosen track and frame offset, for the task `task_index`.

    `X` comes from the mixture and `Y` from the task's stem, both normalized by the mixture's scale.
    """
    if not track_ids:
        msg = "Can not sample from an empty list of tracks"
        raise DataError(msg)
    track_id = track_ids[int(rng.integers(len(track_ids)))]
    track = dataset.track(track_id)
    width = dataset.spectrogram.patch_width
    max_offset = max(track.mixture.n_frames - width, 0)
    offset = int(rng.integers(max_offset + 1))
    task = dataset.tasks[task_index]
    return TrainingInstance(
        X=cut_patch(track.mixture.values, offset, width, track_id),
        Y=cut_patch(track.stems[task].values, offset, width, track_id),
        z=one_hot(task_index, len(dataset.tasks)),
        task_index=task_index,
    )


def progressive_weight(
    z: ConditionVector,
    Y: Patch,
    instance_counter: int,
    rng: np.random.Generator,
    period: int = PROGRESSIVE_PERIOD,
) -> tuple[ConditionVector, Patch]:
    """Scale `z` and `Y` by one weight drawn uniformly from [0, 1] on every `period`-th instance.

    `instance_counter` is 1-based, so the 5th, 10th, ... instances are weighted. Other instances are returned as is,
    and no random draw is made for them.
    """
    if instance_counter % period:
        return z, Y
    weight = float(rng.uniform(0.0, 1.0))
    return z.scaled(weight), dataclasses.replace(Y, values=Y.values * weight)
