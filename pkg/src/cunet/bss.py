"""BSS-eval decomposition of an estimated source and the SDR, SIR, and SAR metrics.

An estimate is split into a target part (its projection onto delayed copies of the target reference), an
interference part (what the projection onto delayed copies of every reference adds), and an artifact part (the
remainder). Delays span `0 .. filter_len - 1` samples, so all components are `filter_len - 1` samples longer than
the estimate, which is zero padded to the same length.
"""

import dataclasses
import warnings

import numpy as np
from scipy import linalg
from scipy.fft import irfft, next_fast_len, rfft
from scipy.signal import fftconvolve

from cunet.constants import DEFAULT_FILTER_LEN, METRIC_CLIP_DB, METRIC_FLOOR, PROJECTION_RIDGE
from cunet.exceptions import ConfigError, ShapeError, UndefinedMetric
from cunet.logger import LOG


@dataclasses.dataclass(frozen=True)
class BssDecomposition:
    """Target, interference, and artifact components. They sum to the zero padded estimate."""

    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray


@dataclasses.dataclass(frozen=True)
class BssMetrics:
    """Source-to-distortion, source-to-interference, and source-to-artifact ratios, in dB."""

    sdr: float
    sir: float
    sar: float

    @property
    def clipped(self) -> bool:
        """Predicate for whether any ratio hit the ±100 dB clipping bound."""
        return any(abs(value) >= METRIC_CLIP_DB for value in (self.sdr, self.sir, self.sar))


def _correlations(spectra: np.ndarray, other: np.ndarray, n_fft: int, filter_len: int) -> np.ndarray:
    """Cross-correlations `sum_t a(t) b(t + m)` at lags `-(filter_len - 1) .. filter_len - 1`, indexed modulo n_fft."""
    full = irfft(np.conj(spectra) * other, n=n_fft, axis=-1)
    lags = np.r_[0 : filter_len, n_fft - filter_len + 1 : n_fft]
    return full[..., lags]


def _solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the normal equations, falling back to a ridge regularized solve when they are singular."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            return linalg.solve(gram, rhs, assume_a="sym")
    except (linalg.LinAlgError, linalg.LinAlgWarning):
        mean_diagonal = float(np.mean(np.diag(gram)))
        ridge = PROJECTION_RIDGE * mean_diagonal if mean_diagonal > 0 else PROJECTION_RIDGE
        LOG.warning("Singular projection system: solving with a ridge of %.3g", ridge)
        regularized = gram + ridge * np.eye(gram.shape[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            return linalg.solve(regularized, rhs, assume_a="sym")


def project(references: np.ndarray, estimate: np.ndarray, filter_len: int) -> np.ndarray:
    """Least-squares projection of `estimate` onto the delayed copies of every row of `references`.

    The result is `filter_len - 1` samples longer than the estimate.
    """
    n_sources, n_samples = references.shape
    n_fft = next_fast_len(n_samples + filter_len - 1, real=True)
    spectra = rfft(references, n=n_fft, axis=-1)
    estimate_spectrum = rfft(estimate, n=n_fft)

    gram = np.zeros((n_sources * filter_len, n_sources * filter_len))
    for i in range(n_sources):
        for j in range(i, n_sources):
            corr = _correlations(spectra[i], spectra[j], n_fft, filter_len)
            # Block (i, j) at row k and column l holds the correlation at lag k - l
            block = linalg.toeplitz(corr[:filter_len], np.r_[corr[0], corr[filter_len:][::-1]])
            gram[i * filter_len : (i + 1) * filter_len, j * filter_len : (j + 1) * filter_len] = block
            gram[j * filter_len : (j + 1) * filter_len, i * filter_len : (i + 1) * filter_len] = block.T
    rhs = _correlations(spectra, estimate_spectrum, n_fft, filter_len)[:, :filter_len].reshape(-1)

    coefficients = _solve(gram, rhs).reshape(n_sources, filter_len)
    projection = np.zeros(n_samples + filter_len - 1)
    for i in range(n_sources):
        projection += fftconvolve(references[i], coefficients[i])
    return projection


def bss_decompose(
    estimate: np.ndarray,
    references: np.ndarray,
    target_index: int,
    filter_len: int = DEFAULT_FILTER_LEN,
) -> BssDecomposition:
    """Decompose an estimate against references shaped `(n_sources, n_samples)`.

    Delayed copies of a reference allow the estimate to be a filtered version of it with a filter of `filter_len`
    taps without being penalized.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    references = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if estimate.ndim != 1 or references.shape[1] != estimate.shape[0]:
        msg = f"Estimate of shape {estimate.shape} does not match references of shape {references.shape}"
        raise ShapeError(msg)
    if not 0 <= target_index < references.shape[0]:
        msg = f"Target index {target_index} is out of range for {references.shape[0]} reference(s)"
        raise IndexError(msg)
    if filter_len < 1:
        msg = f"filter_len must be positive, got {filter_len}"
        raise ConfigError(msg)

    padded = np.pad(estimate, (0, filter_len - 1))
    s_target = project(references[target_index : target_index + 1], estimate, filter_len)
    all_sources = project(references, estimate, filter_len)
    return BssDecomposition(
        s_target=s_target,
        e_interf=all_sources - s_target,
        e_artif=padded - all_sources,
    )


def _ratio_db(numerator: float, denominator: float, floor: float) -> float:
    value = 10.0 * np.log10(numerator / max(denominator, floor))
    return float(np.clip(value, -METRIC_CLIP_DB, METRIC_CLIP_DB))


def metrics(d: BssDecomposition) -> BssMetrics:
    """Compute SDR, SIR, and SAR. Denominators are floored so that perfect components clip at +100 dB."""
    target_energy = float(np.sum(d.s_target**2))
    if target_energy == 0.0:
        msg = "The target component is silent: SDR, SIR, and SAR are undefined"
        raise UndefinedMetric(msg)
    floor = METRIC_FLOOR * target_energy
    return BssMetrics(
        sdr=_ratio_db(target_energy, float(np.sum((d.e_interf + d.e_artif) ** 2)), floor),
        sir=_ratio_db(target_energy, float(np.sum(d.e_interf**2)), floor),
        sar=_ratio_db(float(np.sum((d.s_target + d.e_interf) ** 2)), float(np.sum(d.e_artif**2)), floor),
    )
