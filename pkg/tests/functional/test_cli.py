"""Test the cunet command line interface (CLI)."""

import logging
import subprocess
import sys

import numpy as np
import pytest

from cunet import __version__
from cunet.cli import CHECKPOINT_NAME, RESULTS_NAME, ReturnCode, get_args, main
from cunet.console import stdout_console
from cunet.constants import DEFAULT_TASKS, MANIFEST_NAME, MIXTURE_STEM, SCRIPT_NAME
from cunet.evaluation import EvalResult, read_results_csv, write_results_csv
from cunet.logger import LOG, LOGGING_TRACE_LEVEL, set_logger_level
from tests.constants import DEDICATED_PARAMS, PYPROJECT, SYNTH_TEST_TRACKS


@pytest.fixture
def wide_stdout(monkeypatch):
    """Render stdout tables wide enough that no cell wraps."""
    monkeypatch.setattr(stdout_console, "width", 200)


@pytest.fixture(scope="module")
def trained_run(synth_manifest, tmp_path_factory):
    """Train a tiny conditioned model for one epoch through the CLI and return its output directory."""
    out_dir = tmp_path_factory.mktemp("run")
    args = ["train", "--preset", "tiny", "--epochs", "1", "--data-root", str(synth_manifest.root)]
    assert main([*args, "--out", str(out_dir)]) == ReturnCode.SUCCESS
    return out_dir


def test_run_as_module():
    """Ensure the CLI can be called as a module.

    This is the `python -m <module_name>` format to "run library module as a script."
    NOTE: The <module_name> is specified as the dotted path to the package where the `__main__.py` module exists.
    """
    cmd = [sys.executable, "-m", "cunet", "--help"]
    ret = subprocess.run(cmd, check=False)
    assert ret.returncode == 0, "Running the package as a module failed"


def test_run_as_script():
    """Ensure the CLI can be called by it's script entry point."""
    scripts = PYPROJECT.get("tool", {}).get("poetry", {}).get("scripts", {})
    assert scripts, "There should be at least one script entry point"
    assert SCRIPT_NAME in scripts, f"The {SCRIPT_NAME} script should be a defined entry point"
    ret = subprocess.run([SCRIPT_NAME, "-h"], check=False)
    assert ret.returncode == 0, f"{SCRIPT_NAME} entry point failed"


def test_version_option():
    """Ensure the correct program name and version is displayed when using the `--version` option."""
    # The argparse module adds a newline to the output
    expected_output = f"{SCRIPT_NAME} {__version__}\n"
    cmd = [sys.executable, "-m", "cunet", "--version"]
    ret = subprocess.run(cmd, check=False, capture_output=True, encoding="utf-8")
    assert not ret.stderr, "Nothing should be written to stderr"
    assert ret.returncode == 0, "A non-successful return code was provided"
    assert ret.stdout == expected_output, "Output did not match expected input"


@pytest.mark.parametrize(
    ("supplied_args", "expected_level"),
    [
        ([], logging.WARNING),
        (["-v"], logging.INFO),
        (["-vv"], logging.DEBUG),
        (["-vvv"], LOGGING_TRACE_LEVEL),
        (["-vvvv"], LOGGING_TRACE_LEVEL),
        (["-q"], logging.ERROR),
        (["-qq"], logging.CRITICAL),
        (["-qqq"], logging.CRITICAL),
    ],
)
@pytest.mark.usefixtures("_log")
def test_log_verbosity_set_correctly(supplied_args, expected_level):
    """Ensure the log verbosity options are handled correctly."""
    args, _ = get_args([*supplied_args, "params"])
    set_logger_level(args.verbose - args.quiet)
    assert LOG.getEffectiveLevel() == expected_level


@pytest.mark.parametrize(
    "supplied_args",
    [
        ["-v", "-q", "params"],
        [],
        ["train", "--variant", "SiF", "--dedicated", "bass"],
        ["evaluate"],
        ["evaluate", "model.cunet", "--baseline", "oracle"],
    ],
)
def test_usage_errors(supplied_args):
    """Ensure invalid combinations of arguments exit with the usage error code."""
    with pytest.raises(SystemExit) as exc_info:
        main(supplied_args)
    assert exc_info.value.code == ReturnCode.USAGE_ERROR


@pytest.mark.usefixtures("wide_stdout")
def test_params(capsys):
    """Ensure the parameter table lists every model family with the full-scale counts."""
    assert main(["params"]) == ReturnCode.SUCCESS
    out = capsys.readouterr().out
    assert "Trainable parameters" in out
    assert f"{DEDICATED_PARAMS:,}" in out
    for name in ("Non-conditioned", "SiF", "CoF", "SiC", "CoC"):
        assert name in out


def test_synth(tmp_path, capsys):
    """Ensure the synth subcommand writes a dataset with its manifest."""
    args = ["synth", "--tracks", "2", "--test-tracks", "1", "--duration", "4", "--seed", "3", "--out", str(tmp_path)]
    assert main(args) == ReturnCode.SUCCESS
    assert (tmp_path / MANIFEST_NAME).is_file()
    assert (tmp_path / "track_001" / f"{MIXTURE_STEM}.wav").is_file()
    assert "Wrote 2 track(s)" in capsys.readouterr().out


def test_synth_rejects_short_tracks(tmp_path):
    """Ensure invalid input is reported with the runtime error code."""
    args = ["synth", "--tracks", "2", "--duration", "1", "--out", str(tmp_path)]
    assert main(args) == ReturnCode.RUNTIME_ERROR


def test_train_writes_config_and_checkpoint(trained_run):
    """Ensure a training run leaves its resolved config and its best checkpoint."""
    assert (trained_run / "config.yaml").is_file()
    assert (trained_run / CHECKPOINT_NAME).is_file()


def test_train_unknown_dedicated_task(synth_manifest, tmp_path):
    """Ensure a dedicated run for a task outside the configured ones is rejected."""
    args = ["train", "--preset", "tiny", "--dedicated", "piano", "--data-root", str(synth_manifest.root)]
    assert main([*args, "--out", str(tmp_path)]) == ReturnCode.RUNTIME_ERROR


@pytest.mark.parametrize("generator_flags", [["--film", "complex"], ["--embedding", "cnn"]])
def test_train_dedicated_rejects_generator_flags(synth_manifest, tmp_path, generator_flags):
    """Ensure condition generator options given with `--dedicated` are an error instead of being ignored."""
    args = ["train", "--preset", "tiny", "--dedicated", "bass", *generator_flags]
    assert main([*args, "--data-root", str(synth_manifest.root), "--out", str(tmp_path)]) == ReturnCode.RUNTIME_ERROR
    assert not list(tmp_path.iterdir())


def test_separate(trained_run, synth_manifest, tmp_path):
    """Ensure a mixture file is split into the isolated source and its accompaniment."""
    mixture = synth_manifest.stem_path(synth_manifest.test_ids[0], MIXTURE_STEM)
    args = ["separate", str(mixture), "--checkpoint", str(trained_run / CHECKPOINT_NAME), "--task", "drums"]
    assert main([*args, "--out", str(tmp_path)]) == ReturnCode.SUCCESS
    assert (tmp_path / f"{MIXTURE_STEM}_drums.wav").is_file()
    assert (tmp_path / f"{MIXTURE_STEM}_drums_accompaniment.wav").is_file()


def test_separate_unknown_task(trained_run, synth_manifest, tmp_path):
    """Ensure asking for a task the model does not know is an error."""
    mixture = synth_manifest.stem_path(synth_manifest.test_ids[0], MIXTURE_STEM)
    args = ["separate", str(mixture), "--checkpoint", str(trained_run / CHECKPOINT_NAME), "--task", "piano"]
    assert main([*args, "--out", str(tmp_path)]) == ReturnCode.RUNTIME_ERROR


@pytest.mark.usefixtures("wide_stdout")
def test_evaluate_baseline(synth_manifest, tmp_path, capsys):
    """Ensure a baseline is evaluated on every test track and task."""
    args = ["evaluate", "--baseline", "oracle", "--preset", "tiny", "--data-root", str(synth_manifest.root)]
    assert main([*args, "--filter-len", "8", "--out", str(tmp_path)]) == ReturnCode.SUCCESS
    results = read_results_csv(tmp_path / RESULTS_NAME)
    assert len(results) == SYNTH_TEST_TRACKS * len(DEFAULT_TASKS)
    assert "oracle on 1 track(s)" in capsys.readouterr().out


def test_evaluate_checkpoint(trained_run, synth_manifest, tmp_path):
    """Ensure a trained checkpoint is evaluated on the tasks it was trained for."""
    args = ["evaluate", str(trained_run / CHECKPOINT_NAME), "--data-root", str(synth_manifest.root)]
    assert main([*args, "--filter-len", "8", "--out", str(tmp_path)]) == ReturnCode.SUCCESS
    assert {result.task for result in read_results_csv(tmp_path / RESULTS_NAME)} == set(DEFAULT_TASKS)


@pytest.mark.usefixtures("wide_stdout")
def test_compare_a_result_set_with_itself(tmp_path, capsys):
    """Ensure identical result sets correlate perfectly and the report files are written."""
    rng = np.random.default_rng(0)
    results = [EvalResult(f"t{index}", task, *rng.normal(5.0, 2.0, 3)) for index in range(3) for task in ("a", "b")]
    path = write_results_csv(results, tmp_path / RESULTS_NAME)
    assert main(["compare", str(path), str(path), "--out", str(tmp_path / "report")]) == ReturnCode.SUCCESS
    out = capsys.readouterr().out
    assert "Global r = 1.0000" in out
    assert "n = 18" in out
    assert (tmp_path / "report" / "correlations.csv").is_file()


def test_compare_missing_file(tmp_path):
    """Ensure a missing results file is reported with the runtime error code."""
    missing = str(tmp_path / "missing.csv")
    assert main(["compare", missing, missing]) == ReturnCode.RUNTIME_ERROR


@pytest.mark.slow
def test_end_to_end(tmp_path, capsys):
    """Ensure a conditioned and a dedicated model can be trained, evaluated, and compared from scratch."""
    data_root = tmp_path / "data"
    synth = ["synth", "--tracks", "10", "--test-tracks", "2", "--duration", "6", "--out", str(data_root)]
    assert main(synth) == ReturnCode.SUCCESS

    common = ["--preset", "tiny", "--epochs", "3", "--data-root", str(data_root)]
    assert main(["train", *common, "--variant", "CoC", "--out", str(tmp_path / "coc")]) == ReturnCode.SUCCESS
    assert main(["train", *common, "--dedicated", "bass", "--out", str(tmp_path / "bass")]) == ReturnCode.SUCCESS

    for run in ("coc", "bass"):
        checkpoint = str(tmp_path / run / CHECKPOINT_NAME)
        args = ["evaluate", checkpoint, "--data-root", str(data_root), "--out", str(tmp_path / run)]
        assert main([*args, "--filter-len", "32", "--workers", "2"]) == ReturnCode.SUCCESS

    dedicated = read_results_csv(tmp_path / "bass" / RESULTS_NAME)
    assert {result.task for result in dedicated} == {"bass"}
    capsys.readouterr()
    args = ["compare", str(tmp_path / "coc" / RESULTS_NAME), str(tmp_path / "bass" / RESULTS_NAME)]
    assert main(args) == ReturnCode.SUCCESS
    assert "Global r = " in capsys.readouterr().out
