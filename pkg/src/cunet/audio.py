"""Audio I/O and the spectrogram front end.

The separation model works on normalized magnitude spectrogram patches. This module provides everything around it:
reading and writing WAV files, resampling, the STFT and its inverse, per song normalization, patch extraction, and
the reconstruction of a separated stem from estimated magnitudes and the unaltered mixture phase.

Every function here is a pure function of its inputs.
"""

import dataclasses
from inspect import cleandoc
from math import gcd
from pathlib import Path

import librosa
import numpy as np
from scipy.signal import check_NOLA, resample_poly
from scipy.signal.windows import get_window
import soundfile as sf

from cunet.exceptions import (
    ConfigError,
    DegenerateInput,
    FormatError,
    InputTooShort,
    NotFound,
    ShapeError,
)
from cunet.logger import LOG

WINDOW = "hann"
# Kaiser window used by the polyphase resampling filter
RESAMPLE_WINDOW = ("kaiser", 8.6)
WAV_SUBTYPES = frozenset({"PCM_16", "FLOAT"})


@dataclasses.dataclass(frozen=True)
class AudioSignal:
    """Mono time domain signal with samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        """Ensure the samples are a finite 1D float64 array and the rate is positive."""
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            msg = f"Audio samples must be one dimensional, got shape {samples.shape}"
            raise ShapeError(msg)
        if not np.all(np.isfinite(samples)):
            msg = "Audio samples must be finite"
            raise DegenerateInput(msg)
        if self.sample_rate <= 0:
            msg = f"Sample rate must be positive, got {self.sample_rate}"
            raise ConfigError(msg)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        """Get the number of samples."""
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Get the duration, in seconds."""
        return len(self) / self.sample_rate


@dataclasses.dataclass(frozen=True)
class ComplexSpectrogram:
    """Complex STFT bins, shaped `[window_size // 2 + 1, frames]`."""

    bins: np.ndarray
    window_size: int
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        """Get the number of frames."""
        return self.bins.shape[1]


@dataclasses.dataclass(frozen=True)
class MagnitudeSpectrogram:
    """Non-negative magnitudes, shaped `[frequency_bins, frames]`.

    `norm_scale` is the value the magnitudes were divided by; it is 1.0 for unnormalized magnitudes.
    """

    values: np.ndarray
    norm_scale: float = 1.0

    @property
    def n_frames(self) -> int:
        """Get the number of frames."""
        return self.values.shape[1]


@dataclasses.dataclass(frozen=True)
class PhaseSpectrogram:
    """Phase angles in radians, paired with a magnitude spectrogram of the same shape.

    The STFT settings travel with the phase because the phase is what reconstruction is anchored to.
    """

    angles: np.ndarray
    window_size: int
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        """Get the number of frames."""
        return self.angles.shape[1]


@dataclasses.dataclass(frozen=True)
class Patch:
    """Fixed width slice of a normalized magnitude spectrogram with the Nyquist bin dropped.

    `n_valid` is the number of frames taken from the spectrogram; the frames after it are zero padding.
    """

    values: np.ndarray
    source_track: str
    frame_offset: int
    n_valid: int

    @property
    def is_padded(self) -> bool:
        """Predicate for whether the patch holds zero padded trailing frames."""
        return self.n_valid < self.values.shape[1]


def load_wav(path: Path) -> AudioSignal:
    """Read a PCM WAV file (16-bit int or 32-bit float) as a mono signal scaled to [-1, 1].

    Multichannel files are averaged to mono.
    """
    path = Path(path)
    if not path.is_file():
        msg = f"Audio file not found: {path}"
        raise NotFound(msg)
    try:
        info = sf.info(str(path))
        if info.format != "WAV":
            msg = f"`{path}` is a {info.format} file, not WAV"
            raise FormatError(msg)
        samples, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (sf.LibsndfileError, RuntimeError) as err:
        msg = f"`{path}` is not a readable WAV file"
        raise FormatError(msg) from err
    LOG.debug("Read %s: %d frames, %d channel(s) at %d Hz", path, samples.shape[0], samples.shape[1], sample_rate)
    return AudioSignal(samples.mean(axis=1), int(sample_rate))


def write_wav(signal: AudioSignal, path: Path, subtype: str = "PCM_16") -> None:
    """Write a signal as a mono WAV file. `subtype` is `PCM_16` (default) or `FLOAT`."""
    if subtype not in WAV_SUBTYPES:
        msg = f"Unsupported WAV subtype `{subtype}`. Choose one of: {', '.join(sorted(WAV_SUBTYPES))}"
        raise ConfigError(msg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = signal.samples
    if subtype == "PCM_16":
        samples = np.clip(samples, -1.0, 1.0)
    else:
        samples = samples.astype(np.float32)
    sf.write(str(path), samples, signal.sample_rate, subtype=subtype, format="WAV")


def resample(signal: AudioSignal, target_rate: int) -> AudioSignal:
    """Resample with a band limited polyphase filter (windowed sinc, Kaiser window).

    The output holds `ceil(len * target_rate / sample_rate)` samples, which preserves the duration within one sample.
    """
    if target_rate <= 0:
        msg = f"Target sample rate must be positive, got {target_rate}"
        raise ConfigError(msg)
    if target_rate == signal.sample_rate:
        return signal
    divisor = gcd(signal.sample_rate, target_rate)
    up, down = target_rate // divisor, signal.sample_rate // divisor
    samples = resample_poly(signal.samples, up, down, window=RESAMPLE_WINDOW)
    return AudioSignal(samples, target_rate)


def stft(signal: AudioSignal, window_size: int, hop: int) -> ComplexSpectrogram:
    """Compute the STFT with a periodic Hann window and no centering.

    Frame `t` is the DFT of the windowed segment starting at sample `t * hop`, so there are
    `1 + (len - window_size) // hop` frames and `window_size // 2 + 1` bins.
    """
    if hop <= 0 or hop > window_size:
        msg = f"hop must be in (0, window_size], got {hop} for window {window_size}"
        raise ConfigError(msg)
    if len(signal) < window_size:
        msg = f"Signal of {len(signal)} samples is shorter than one window ({window_size})"
        raise InputTooShort(msg)
    bins = librosa.stft(signal.samples, n_fft=window_size, hop_length=hop, window=WINDOW, center=False)
    return ComplexSpectrogram(bins, window_size, hop, signal.sample_rate)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> AudioSignal:
    """Invert an STFT by overlap-add with window-sum normalization.

    The window and hop must satisfy the non-zero overlap-add condition, otherwise some samples can not be recovered.
    The natural output length is `window_size + hop * (frames - 1)`; `length` pads with zeros or trims to a size.
    """
    window = get_window(WINDOW, spec.window_size, fftbins=True)
    if not check_NOLA(window, spec.window_size, spec.window_size - spec.hop):
        msg = f"Window `{WINDOW}` of {spec.window_size} samples with hop {spec.hop} does not satisfy overlap-add"
        raise ConfigError(msg)
    expected_bins = spec.window_size // 2 + 1
    if spec.bins.shape[0] != expected_bins:
        msg = f"Expected {expected_bins} frequency bins, got {spec.bins.shape[0]}"
        raise ShapeError(msg)
    natural_length = spec.window_size + spec.hop * (spec.n_frames - 1)
    samples = librosa.istft(
        spec.bins,
        hop_length=spec.hop,
        n_fft=spec.window_size,
        window=WINDOW,
        center=False,
        length=natural_length,
    )
    if length is not None:
        samples = librosa.util.fix_length(samples, size=length)
    return AudioSignal(samples, spec.sample_rate)


def magnitude_phase(spec: ComplexSpectrogram) -> tuple[MagnitudeSpectrogram, PhaseSpectrogram]:
    """Split a complex spectrogram into its magnitude and phase."""
    magnitude = MagnitudeSpectrogram(np.abs(spec.bins))
    phase = PhaseSpectrogram(np.angle(spec.bins), spec.window_size, spec.hop, spec.sample_rate)
    return magnitude, phase


def normalize_per_song(mag: MagnitudeSpectrogram, scale: float | None = None) -> MagnitudeSpectrogram:
    """Divide magnitudes by the song scale, which is the maximum of the song's mixture.

    Without `scale` the maximum of `mag` itself is used, which is how a mixture is normalized. Stems are normalized
    by passing the scale of their mixture, so that masks keep relating stems to the mixture.
    """
    if scale is None:
        scale = float(np.max(mag.values)) if mag.values.size else 0.0
        if scale <= 0.0:
            msg = "Can not normalize an all-zero magnitude spectrogram"
            raise DegenerateInput(msg)
    elif scale <= 0.0:
        msg = f"Normalization scale must be positive, got {scale}"
        raise DegenerateInput(msg)
    return MagnitudeSpectrogram(mag.values / scale, norm_scale=scale)


def cut_patch(values: np.ndarray, offset: int, width: int, source_track: str = "") -> Patch:
    """Cut `width` frames starting at `offset` from magnitudes, dropping the Nyquist bin and zero padding the end."""
    chunk = values[:-1, offset : offset + width]
    n_valid = chunk.shape[1]
    if n_valid < width:
        chunk = np.pad(chunk, ((0, 0), (0, width - n_valid)))
    return Patch(np.ascontiguousarray(chunk), source_track, offset, n_valid)


def extract_patches(mag: MagnitudeSpectrogram, width: int, source_track: str = "") -> list[Patch]:
    """Cut a magnitude spectrogram into consecutive, non-overlapping patches of `width` frames.

    The highest (Nyquist) bin is dropped. The trailing remainder is zero padded to the full width, and so is a
    spectrogram with fewer frames than `width`, which yields a single padded patch.
    """
    if width <= 0:
        msg = f"Patch width must be positive, got {width}"
        raise ConfigError(msg)
    n_frames = mag.values.shape[1]
    return [cut_patch(mag.values, offset, width, source_track) for offset in range(0, max(n_frames, 1), width)]


def concatenate_patches(patch_values: list[np.ndarray], n_frames: int) -> np.ndarray:
    """Concatenate patch matrices in time, trim to `n_frames`, and re-attach the Nyquist bin as zeros.

    This is the inverse of `extract_patches`. Fewer concatenated frames than `n_frames` are allowed (the result is
    shorter), but more than one patch of surplus frames is a `ShapeError`.
    """
    if not patch_values:
        msg = "At least one patch is needed"
        raise ShapeError(msg)
    rows = {values.shape[0] for values in patch_values}
    widths = {values.shape[1] for values in patch_values}
    if len(rows) != 1 or len(widths) != 1:
        msg = f"Patches must all have the same shape, got rows {sorted(rows)} and widths {sorted(widths)}"
        raise ShapeError(msg)
    width = widths.pop()
    joined = np.concatenate(patch_values, axis=1)
    surplus = joined.shape[1] - n_frames
    if surplus >= width:
        msg = f"{joined.shape[1]} concatenated frames exceed the {n_frames} spectrogram frames by a full patch or more"
        raise ShapeError(msg)
    joined = joined[:, :n_frames]
    return np.pad(joined, ((0, 1), (0, 0)))


def reconstruct(
    estimated_mags: list[np.ndarray],
    mix_phase: PhaseSpectrogram,
    norm_scale: float,
    length: int | None = None,
) -> AudioSignal:
    """Rebuild a separated signal from estimated patch magnitudes and the unaltered mixture phase.

    The patches are concatenated without overlap, trimmed to the phase frame count, scaled back by `norm_scale`,
    combined with the mixture phase, and inverted with `istft`. When the patches cover fewer frames than the phase,
    only the covered frames are reconstructed.
    """
    magnitudes = concatenate_patches(estimated_mags, mix_phase.n_frames) * norm_scale
    expected_rows = mix_phase.angles.shape[0]
    if magnitudes.shape[0] != expected_rows:
        msg = f"Patches have {magnitudes.shape[0] - 1} rows but the phase implies {expected_rows - 1}"
        raise ShapeError(msg)
    angles = mix_phase.angles[:, : magnitudes.shape[1]]
    bins = magnitudes * np.exp(1j * angles)
    spec = ComplexSpectrogram(bins, mix_phase.window_size, mix_phase.hop, mix_phase.sample_rate)
    return istft(spec, length=length)


def accompaniment(mix: AudioSignal, estimate: AudioSignal) -> AudioSignal:
    """Subtract an isolated estimate from its mixture."""
    if mix.sample_rate != estimate.sample_rate or len(mix) != len(estimate):
        msg = f"""
            Mixture ({len(mix)} @ {mix.sample_rate} Hz) and estimate ({len(estimate)} @ {estimate.sample_rate} Hz)
            must have equal lengths and sample rates"""
        raise ShapeError(cleandoc(msg))
    return AudioSignal(mix.samples - estimate.samples, mix.sample_rate)
