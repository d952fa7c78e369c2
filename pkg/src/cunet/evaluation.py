"""Evaluate separations with BSS-eval and compare model families.

Each test track is separated through the patch pipeline, rebuilt with the mixture phase, and scored against two
references: the target stem and its accompaniment, which is the sum of the remaining stems. Results are kept in long
format (one row per track, task, and metric) so that two model families can be paired point by point.
"""

from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
import dataclasses
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from rich.table import Table
from scipy import stats

from cunet.audio import (
    AudioSignal,
    accompaniment,
    extract_patches,
    magnitude_phase,
    normalize_per_song,
    reconstruct,
    resample,
    stft,
)
from cunet.bss import bss_decompose, metrics
from cunet.checkpoint import Checkpoint
from cunet.conditioning import one_hot
from cunet.config import SpectrogramConfig
from cunet.constants import DEFAULT_FILTER_LEN, DEFAULT_TASKS, METRIC_CLIP_DB, METRICS
from cunet.dataset import StemDataset, TrackSpectrograms
from cunet.exceptions import (
    FormatError,
    IncompatibleCheckpoint,
    NotFound,
    ShapeError,
    UndefinedCorrelation,
    UndefinedMetric,
)
from cunet.logger import LOG, progress_spinner
from cunet.model import ConditionedUNet, Model, separate_patches

RESULT_COLUMNS = ("track_id", "task", "metric", "value")
MIN_CORRELATION_POINTS = 3


@dataclasses.dataclass(frozen=True)
class EvalResult:
    """Metrics of one task on one track, in dB."""

    track_id: str
    task: str
    sdr: float
    sir: float
    sar: float
    clipped: bool = False

    def metric(self, name: str) -> float:
        """Get a metric by name (`sdr`, `sir`, or `sar`)."""
        return getattr(self, name)


class MagnitudeEstimator(Protocol):
    """Anything that estimates normalized target magnitudes from normalized mixture patches."""

    name: str

    def estimate(self, track: TrackSpectrograms, patches: np.ndarray, task: str) -> np.ndarray:
        """Estimate the target patches of `task`, shaped like `patches` `(N, frequency, frames)`."""


class ModelEstimator:
    """Estimate with a trained network, conditioned on the task or dedicated to it."""

    def __init__(self, model: Model, tasks: Sequence[str], trained_tasks: Sequence[str], name: str = "model") -> None:
        """Wrap `model`; `tasks` orders the condition vector and `trained_tasks` are the tasks it may separate."""
        self.model = model
        self.tasks = tuple(tasks)
        self.trained_tasks = tuple(trained_tasks)
        self.name = name

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, name: str = "model") -> "ModelEstimator":
        """Rebuild the model of a checkpoint."""
        config = ckpt.experiment_config()
        return cls(ckpt.build_model(), config.tasks, ckpt.tasks, name)

    def estimate(self, track: TrackSpectrograms, patches: np.ndarray, task: str) -> np.ndarray:  # noqa: ARG002, D102
        if task not in self.trained_tasks:
            msg = f"The model was trained for {', '.join(self.trained_tasks)}, not `{task}`"
            raise IncompatibleCheckpoint(msg)
        z = None
        if isinstance(self.model, ConditionedUNet):
            z = one_hot(self.tasks.index(task), len(self.tasks))
        return separate_patches(self.model, patches, z)


class MixtureEstimator:
    """Baseline that returns the mixture itself as the estimate of every task."""

    name = "mixture"

    def estimate(self, track: TrackSpectrograms, patches: np.ndarray, task: str) -> np.ndarray:  # noqa: ARG002, D102
        return patches


class OracleEstimator:
    """Upper bound that returns the true stem magnitudes."""

    name = "oracle"

    def estimate(self, track: TrackSpectrograms, patches: np.ndarray, task: str) -> np.ndarray:  # noqa: D102
        stem_patches = extract_patches(track.stems[task], patches.shape[2])
        return np.stack([patch.values for patch in stem_patches])


def evaluate_track(
    dataset: StemDataset,
    track_id: str,
    task: str,
    estimator: MagnitudeEstimator,
    filter_len: int = DEFAULT_FILTER_LEN,
) -> EvalResult | None:
    """Separate one task of a track and score it against the target stem and its accompaniment.

    A silent target stem has undefined metrics: a warning is logged and `None` is returned.
    """
    track = dataset.track(track_id)
    patches = np.stack([patch.values for patch in extract_patches(track.mixture, dataset.spectrogram.patch_width)])
    estimated = estimator.estimate(track, patches, task)
    separated = reconstruct(list(estimated), track.phase, track.norm_scale, length=track.signal_length)

    target = dataset.load_signal(track_id, task).samples
    others = [dataset.load_signal(track_id, other).samples for other in dataset.tasks if other != task]
    backing = np.sum(others, axis=0) if others else np.zeros_like(target)
    if not np.any(target):
        LOG.warning("Skipping %s of %s: the target stem is silent", task, track_id)
        return None
    if target.shape != separated.samples.shape:
        msg = f"{track_id}: the {task} stem has {target.shape[0]} samples, the mixture {separated.samples.shape[0]}"
        raise ShapeError(msg)

    decomposition = bss_decompose(separated.samples, np.stack([target, backing]), 0, filter_len)
    try:
        scores = metrics(decomposition)
    except UndefinedMetric as err:
        LOG.warning("Skipping %s of %s: %s", task, track_id, err)
        return None
    LOG.trace("%s %s %s: %s", estimator.name, track_id, task, scores)
    return EvalResult(track_id, task, scores.sdr, scores.sir, scores.sar, scores.clipped)


def separate_signal(
    estimator: MagnitudeEstimator,
    mixture: AudioSignal,
    task: str,
    spectrogram: SpectrogramConfig,
) -> tuple[AudioSignal, AudioSignal]:
    """Separate `task` from a mixture and return the isolated estimate and its subtraction accompaniment.

    The mixture is resampled to the model rate first; both outputs are at that rate.
    """
    mixture = resample(mixture, spectrogram.sample_rate)
    magnitude, phase = magnitude_phase(stft(mixture, spectrogram.window_size, spectrogram.hop))
    magnitude = normalize_per_song(magnitude)
    track = TrackSpectrograms(magnitude, {}, phase, len(mixture))
    patches = np.stack([patch.values for patch in extract_patches(magnitude, spectrogram.patch_width)])
    estimated = estimator.estimate(track, patches, task)
    isolated = reconstruct(list(estimated), phase, magnitude.norm_scale, length=len(mixture))
    return isolated, accompaniment(mixture, isolated)


@progress_spinner("Evaluating")
def evaluate_split(
    dataset: StemDataset,
    track_ids: Sequence[str],
    tasks: Sequence[str],
    estimator: MagnitudeEstimator,
    filter_len: int = DEFAULT_FILTER_LEN,
    workers: int = 1,
) -> list[EvalResult]:
    """Evaluate every (track, task) pair, concurrently when `workers > 1`.

    The results are sorted by track and then by task order, whatever the completion order.
    """
    jobs = [(track_id, task) for track_id in track_ids for task in tasks]

    def run(job: tuple[str, str]) -> EvalResult | None:
        return evaluate_track(dataset, job[0], job[1], estimator, filter_len)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run, jobs))
    else:
        outcomes = [run(job) for job in jobs]
    results = [result for result in outcomes if result is not None]
    task_order = {task: index for index, task in enumerate(tasks)}
    results.sort(key=lambda result: (result.track_id, task_order[result.task]))
    LOG.info("Evaluated %d of %d (track, task) pair(s) with the %s estimator", len(results), len(jobs), estimator.name)
    return results


def results_frame(results: Iterable[EvalResult]) -> pd.DataFrame:
    """Get results in long format: one row per track, task, and metric."""
    rows = [
        {"track_id": result.track_id, "task": result.task, "metric": name, "value": result.metric(name)}
        for result in results
        for name in METRICS
    ]
    return pd.DataFrame(rows, columns=list(RESULT_COLUMNS))


def write_results_csv(results: Iterable[EvalResult], path: Path) -> Path:
    """Write results as a long format CSV file: `track_id, task, metric, value`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results_frame(results).to_csv(path, index=False, float_format="%.10g")
    return path


def read_results_csv(path: Path) -> list[EvalResult]:
    """Read a results CSV file written by `write_results_csv`."""
    path = Path(path)
    if not path.is_file():
        msg = f"Results file not found: {path}"
        raise NotFound(msg)
    try:
        frame = pd.read_csv(path, dtype={"track_id": str, "task": str, "metric": str, "value": float})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as err:
        msg = f"`{path}` is not a results CSV file"
        raise FormatError(msg) from err
    missing = sorted(set(RESULT_COLUMNS) - set(frame.columns))
    if missing:
        msg = f"`{path}` lacks the column(s): {', '.join(missing)}"
        raise FormatError(msg)
    wide = frame.pivot_table(index=["track_id", "task"], columns="metric", values="value", aggfunc="first", sort=False)
    if set(METRICS) - set(wide.columns) or wide[list(METRICS)].isna().any().any():
        msg = f"`{path}` does not hold every metric for every (track, task) pair"
        raise FormatError(msg)
    return [
        EvalResult(
            track_id=track_id,
            task=task,
            sdr=float(row["sdr"]),
            sir=float(row["sir"]),
            sar=float(row["sar"]),
            clipped=any(abs(float(row[name])) >= METRIC_CLIP_DB for name in METRICS),
        )
        for (track_id, task), row in wide.iterrows()
    ]


@dataclasses.dataclass(frozen=True)
class CorrelationReport:
    """Pearson correlation of paired points. `key` names the task or metric of a breakdown."""

    r: float
    p_value: float
    n_points: int
    grouping: str = "global"
    key: str = "all"


def pearson(xs: Sequence[float], ys: Sequence[float], grouping: str = "global", key: str = "all") -> CorrelationReport:
    """Compute the product-moment correlation and its two-sided p-value under the t-distribution with n − 2 dof."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        msg = f"Samples must be two sequences of equal length, got shapes {x.shape} and {y.shape}"
        raise ShapeError(msg)
    if x.size < MIN_CORRELATION_POINTS:
        msg = f"A correlation needs at least {MIN_CORRELATION_POINTS} points, got {x.size}"
        raise UndefinedCorrelation(msg)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        msg = "A correlation is undefined for samples with zero variance"
        raise UndefinedCorrelation(msg)
    result = stats.pearsonr(x, y)
    r = float(np.clip(result.statistic, -1.0, 1.0))
    return CorrelationReport(r=r, p_value=float(result.pvalue), n_points=int(x.size), grouping=grouping, key=key)


@dataclasses.dataclass(frozen=True)
class ComparisonReport:
    """Correlations between two result sets: pooled over everything, then per task and per metric."""

    global_report: CorrelationReport
    per_task: tuple[CorrelationReport, ...]
    per_metric: tuple[CorrelationReport, ...]
    n_dropped: int

    @property
    def reports(self) -> tuple[CorrelationReport, ...]:
        """Get every correlation of the comparison, the global one first."""
        return (self.global_report, *self.per_task, *self.per_metric)


def compare_models(results_a: Iterable[EvalResult], results_b: Iterable[EvalResult]) -> ComparisonReport:
    """Correlate two result sets over their shared (track, task, metric) points.

    Points present in only one set are dropped with a warning. Breakdowns with fewer than three points, or no
    variance, are left out.
    """
    frame_a = results_frame(results_a)
    frame_b = results_frame(results_b)
    keys = ["track_id", "task", "metric"]
    paired = frame_a.merge(frame_b, on=keys, how="outer", suffixes=("_a", "_b"), indicator=True)
    n_dropped = int((paired["_merge"] != "both").sum())
    if n_dropped:
        LOG.warning("Dropped %d point(s) present in only one of the result sets", n_dropped)
    paired = paired[paired["_merge"] == "both"]
    if paired.empty:
        msg = "The result sets share no (track, task, metric) point"
        raise UndefinedCorrelation(msg)

    global_report = pearson(paired["value_a"], paired["value_b"])

    def breakdown(column: str, grouping: str) -> tuple[CorrelationReport, ...]:
        reports = []
        for key, group in paired.groupby(column, sort=False):
            try:
                reports.append(pearson(group["value_a"], group["value_b"], grouping, str(key)))
            except UndefinedCorrelation as err:
                LOG.debug("No %s correlation for %s: %s", grouping, key, err)
        return tuple(reports)

    return ComparisonReport(
        global_report=global_report,
        per_task=breakdown("task", "per_task"),
        per_metric=breakdown("metric", "per_metric"),
        n_dropped=n_dropped,
    )


def correlations_frame(report: ComparisonReport) -> pd.DataFrame:
    """Get the correlations of a comparison as a table."""
    columns = ["grouping", "key", "r", "p_value", "n_points"]
    return pd.DataFrame([dataclasses.asdict(item) for item in report.reports], columns=columns)


def summary_table(results: Iterable[EvalResult]) -> pd.DataFrame:
    """Summarize results per task (rows) and metric (columns) as `mean ± std (median)` cells."""
    frame = results_frame(results)
    if frame.empty:
        return pd.DataFrame(columns=[name.upper() for name in METRICS])
    grouped = frame.groupby(["task", "metric"], sort=False)["value"]
    stats_frame = grouped.agg(["mean", "std", "median"]).reset_index()
    stats_frame["cell"] = [
        f"{row.mean:.2f} ± {0.0 if np.isnan(row.std) else row.std:.2f} ({row.median:.2f})"
        for row in stats_frame.itertuples()
    ]
    table = stats_frame.pivot(index="task", columns="metric", values="cell")
    table = table.reindex(index=list(dict.fromkeys(frame["task"])), columns=list(METRICS))
    table.columns = [name.upper() for name in table.columns]
    return table


def rich_table(frame: pd.DataFrame, title: str, index_name: str = "") -> Table:
    """Render a table for the console, with metric columns and task rows in their theme styles."""
    table = Table(title=title, header_style="table.header")
    table.add_column(index_name)
    for column in frame.columns:
        name = str(column)
        style = f"metric.{name.lower()}" if name.lower() in METRICS else ""
        table.add_column(name, justify="right", style=style)
    for index, row in frame.iterrows():
        label = str(index)
        if label in DEFAULT_TASKS:
            label = f"[task.{label}]{label}[/]"
        table.add_row(label, *(str(value) for value in row))
    return table


def write_comparison(
    report: ComparisonReport,
    results_a: Sequence[EvalResult],
    results_b: Sequence[EvalResult],
    out_dir: Path,
) -> list[Path]:
    """Write the correlations and both summary tables to `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    correlations_path = out_dir / "correlations.csv"
    correlations_frame(report).to_csv(correlations_path, index=False, float_format="%.10g")
    paths = [correlations_path]
    for label, results in (("a", results_a), ("b", results_b)):
        path = out_dir / f"summary_{label}.txt"
        path.write_text(summary_table(results).to_string() + "\n", encoding="utf-8")
        paths.append(path)
    return paths
