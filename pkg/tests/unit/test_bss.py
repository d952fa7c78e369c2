"""Test the BSS-eval decomposition and its metrics."""

import logging

import numpy as np
import pytest

from cunet.bss import BssDecomposition, bss_decompose, metrics, project
from cunet.constants import METRIC_CLIP_DB
from cunet.exceptions import ConfigError, ShapeError, UndefinedMetric


def dense_projection(references: np.ndarray, estimate: np.ndarray, filter_len: int) -> np.ndarray:
    """Project with an explicit matrix of delayed reference copies and a generic least-squares solver."""
    n_samples = estimate.shape[0]
    columns = []
    for reference in references:
        for delay in range(filter_len):
            column = np.zeros(n_samples + filter_len - 1)
            column[delay : delay + n_samples] = reference
            columns.append(column)
    basis = np.stack(columns, axis=1)
    coefficients, *_ = np.linalg.lstsq(basis, np.pad(estimate, (0, filter_len - 1)), rcond=None)
    return basis @ coefficients


@pytest.fixture
def sources() -> np.ndarray:
    """Get two independent noise sources that are silent for their last samples."""
    values = np.random.default_rng(0).standard_normal((2, 600))
    values[:, -20:] = 0.0
    return values


@pytest.mark.parametrize("filter_len", [1, 4, 16])
def test_projection_matches_dense_least_squares(sources, filter_len):
    """Ensure the correlation based projection solves the same least-squares problem as the dense system."""
    estimate = 0.7 * sources[0] - 0.2 * sources[1] + 0.1 * np.random.default_rng(1).standard_normal(600)
    np.testing.assert_allclose(
        project(sources, estimate, filter_len),
        dense_projection(sources, estimate, filter_len),
        atol=1e-8,
    )


@pytest.mark.parametrize("filter_len", [1, 2, 3, 4])
def test_short_signal_components_match_dense_least_squares(filter_len):
    """Ensure every component of a short decomposition matches the one built from the dense oracle."""
    rng = np.random.default_rng(7)
    references = rng.standard_normal((3, 64))
    estimate = 0.8 * references[1] + 0.3 * references[2] + 0.2 * rng.standard_normal(64)
    d = bss_decompose(estimate, references, 1, filter_len)
    s_target = dense_projection(references[1:2], estimate, filter_len)
    all_sources = dense_projection(references, estimate, filter_len)
    np.testing.assert_allclose(d.s_target, s_target, atol=1e-8)
    np.testing.assert_allclose(d.e_interf, all_sources - s_target, atol=1e-8)
    np.testing.assert_allclose(d.e_artif, np.pad(estimate, (0, filter_len - 1)) - all_sources, atol=1e-8)


def test_metrics_are_scale_invariant(sources):
    """Ensure scaling the estimate leaves every ratio unchanged."""
    estimate = 0.6 * sources[0] + 0.2 * sources[1] + 0.1 * np.random.default_rng(8).standard_normal(600)
    reference = metrics(bss_decompose(estimate, sources, 0, filter_len=4))
    for scale in (0.01, 3.0):
        scaled = metrics(bss_decompose(scale * estimate, sources, 0, filter_len=4))
        assert scaled.sdr == pytest.approx(reference.sdr, abs=1e-6)
        assert scaled.sir == pytest.approx(reference.sir, abs=1e-6)
        assert scaled.sar == pytest.approx(reference.sar, abs=1e-6)


def test_components_sum_to_the_padded_estimate(sources):
    """Ensure the three components add up to the estimate, zero padded by `filter_len - 1` samples."""
    estimate = 0.5 * sources[0] + 0.3 * sources[1] + 0.05 * np.random.default_rng(2).standard_normal(600)
    d = bss_decompose(estimate, sources, 0, filter_len=8)
    assert d.s_target.shape == (607,)
    total = d.s_target + d.e_interf + d.e_artif
    np.testing.assert_allclose(total, np.pad(estimate, (0, 7)), atol=1e-10)


def test_artifacts_are_orthogonal_to_the_projections(sources):
    """Ensure the artifacts are orthogonal to the target part and to the projection on all references."""
    estimate = 0.4 * sources[0] + 0.3 * sources[1] + 0.2 * np.random.default_rng(9).standard_normal(600)
    d = bss_decompose(estimate, sources, 0, filter_len=8)
    for projection in (d.s_target, d.s_target + d.e_interf):
        cosine = np.dot(projection, d.e_artif) / (np.linalg.norm(projection) * np.linalg.norm(d.e_artif))
        assert abs(cosine) < 1e-8


def test_perfect_estimate_clips():
    """Ensure an estimate equal to the target scores the clipping bound on every metric."""
    references = np.random.default_rng(3).standard_normal((2, 512))
    result = metrics(bss_decompose(references[0].copy(), references, 0, filter_len=16))
    assert result.sdr == METRIC_CLIP_DB
    assert result.sir == METRIC_CLIP_DB
    assert result.sar == METRIC_CLIP_DB
    assert result.clipped


def test_delayed_target_is_not_penalized(sources):
    """Ensure a delay shorter than the filter counts as part of the target."""
    estimate = np.roll(sources[0], 3)
    result = metrics(bss_decompose(estimate, sources, 0, filter_len=8))
    assert result.sdr > 80.0


def test_interference_lowers_sir(sources):
    """Ensure leaking the other source is measured as interference, and more leakage scores lower."""
    slight = metrics(bss_decompose(sources[0] + 0.1 * sources[1], sources, 0, filter_len=4))
    strong = metrics(bss_decompose(sources[0] + 0.5 * sources[1], sources, 0, filter_len=4))
    expected = 10 * np.log10(np.sum(sources[0] ** 2) / np.sum((0.1 * sources[1]) ** 2))
    assert slight.sir == pytest.approx(expected, abs=0.2)
    assert strong.sir < slight.sir
    # Without artifacts the distortion is the interference alone
    assert slight.sdr == pytest.approx(slight.sir, abs=1e-6)
    assert not slight.clipped


def test_artifacts_lower_sar(sources):
    """Ensure noise unrelated to every reference is measured as artifacts."""
    noise = np.random.default_rng(4).standard_normal(600)
    result = metrics(bss_decompose(sources[0] + 0.1 * noise, sources, 0, filter_len=4))
    assert 15.0 < result.sar < 25.0
    assert result.sir > result.sar


def test_silent_estimate():
    """Ensure metrics of an estimate with no target component are undefined."""
    references = np.random.default_rng(5).standard_normal((2, 256))
    with pytest.raises(UndefinedMetric):
        metrics(bss_decompose(np.zeros(256), references, 0, filter_len=4))


def test_silent_target_reference(caplog):
    """Ensure a silent target reference falls back to a regularized solve and undefined metrics."""
    references = np.random.default_rng(6).standard_normal((2, 256))
    references[0] = 0.0
    with caplog.at_level(logging.WARNING):
        d = bss_decompose(references[1], references, 0, filter_len=4)
    assert "Singular projection system" in caplog.text
    assert np.all(np.isfinite(d.s_target))
    with pytest.raises(UndefinedMetric):
        metrics(d)


def test_metrics_of_a_hand_built_decomposition():
    """Ensure each ratio uses the components it names."""
    d = BssDecomposition(
        s_target=np.array([1.0, 0.0, 0.0]),
        e_interf=np.array([0.0, 0.1, 0.0]),
        e_artif=np.array([0.0, 0.0, 0.01]),
    )
    result = metrics(d)
    assert result.sir == pytest.approx(20.0)
    assert result.sdr == pytest.approx(10 * np.log10(1.0 / 0.0101))
    assert result.sar == pytest.approx(10 * np.log10(1.01 / 0.0001))


@pytest.mark.parametrize(
    ("estimate", "references", "target_index", "filter_len", "error"),
    [
        (np.zeros(10), np.zeros((2, 12)), 0, 4, ShapeError),
        (np.zeros((2, 10)), np.zeros((2, 10)), 0, 4, ShapeError),
        (np.zeros(10), np.zeros((2, 10)), 2, 4, IndexError),
        (np.zeros(10), np.zeros((2, 10)), -1, 4, IndexError),
        (np.zeros(10), np.zeros((2, 10)), 0, 0, ConfigError),
    ],
)
def test_invalid_arguments(estimate, references, target_index, filter_len, error):
    """Ensure mismatched lengths, a bad target index, and a bad filter length are rejected."""
    with pytest.raises(error):
        bss_decompose(estimate, references, target_index, filter_len)
