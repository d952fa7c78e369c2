"""Console script for cunet."""

import argparse
from collections.abc import Sequence
import dataclasses
from enum import IntEnum
from inspect import cleandoc
from pathlib import Path
import sys
from typing import NoReturn

from rich.table import Table

from cunet import __version__
from cunet.audio import load_wav, write_wav
from cunet.checkpoint import load_checkpoint
from cunet.config import (
    VARIANTS,
    Embedding,
    ExperimentConfig,
    FilmMode,
    GeneratorConfig,
    default_data_root,
    load_config,
    preset,
    save_config,
)
from cunet.console import stdout_console
from cunet.constants import (
    HELP_MSG_CONFIG,
    HELP_MSG_DATA_ROOT,
    HELP_MSG_OUT,
    HELP_MSG_SEED,
    SCRIPT_NAME,
)
from cunet.dataset import DatasetManifest, StemDataset, synth_dataset
from cunet.evaluation import (
    MixtureEstimator,
    ModelEstimator,
    OracleEstimator,
    compare_models,
    correlations_frame,
    evaluate_split,
    read_results_csv,
    rich_table,
    separate_signal,
    summary_table,
    write_comparison,
    write_results_csv,
)
from cunet.exceptions import ConfigError, CUNetError, pprint_error
from cunet.logger import LOG, MARKUP, set_logger_level
from cunet.model import parameter_table
from cunet.training import train

CHECKPOINT_NAME = "checkpoint.cunet"
RESULTS_NAME = "results.csv"
EMBEDDINGS = {"fc": Embedding.FULLY_CONNECTED, "cnn": Embedding.CNN}
BASELINES = {"mixture": MixtureEstimator, "oracle": OracleEstimator}


class ReturnCode(IntEnum):
    """Integer enumeration to track return codes."""

    SUCCESS = 0
    USAGE_ERROR = 1
    RUNTIME_ERROR = 2


class CUNetArgumentParser(argparse.ArgumentParser):
    """Argument parser that exits with the usage error code instead of argparse's default of 2."""

    def error(self, message: str) -> NoReturn:
        """Print the usage and the error message, then exit with `ReturnCode.USAGE_ERROR`."""
        self.print_usage(sys.stderr)
        self.exit(ReturnCode.USAGE_ERROR, f"{self.prog}: error: {message}\n")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Build the experiment config: the preset, then the config file, then the environment, then the flags."""
    config = preset(args.preset)
    if getattr(args, "config", None):
        config = load_config(args.config, config)
    env_root = default_data_root()
    if env_root is not None:
        config = dataclasses.replace(config, data_root=env_root)

    changes = {}
    if getattr(args, "data_root", None):
        changes["data_root"] = args.data_root
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    config = dataclasses.replace(config, **changes)

    train_changes = {}
    if getattr(args, "seed", None) is not None:
        train_changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_changes["max_epochs"] = args.epochs
    if getattr(args, "patience", None) is not None:
        train_changes["patience"] = args.patience
    if getattr(args, "progressive", None) is not None:
        train_changes["progressive"] = args.progressive
    config = dataclasses.replace(config, train=dataclasses.replace(config.train, **train_changes))

    eval_changes = {}
    if getattr(args, "filter_len", None) is not None:
        eval_changes["filter_len"] = args.filter_len
    if getattr(args, "workers", None) is not None:
        eval_changes["workers"] = args.workers
    config = dataclasses.replace(config, eval=dataclasses.replace(config.eval, **eval_changes))

    config = _apply_architecture_flags(config, args)
    config.validate()
    return config


def _apply_architecture_flags(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Apply `--variant`, `--film`, `--embedding`, and `--dedicated`."""
    dedicated = getattr(args, "dedicated", None)
    variant = getattr(args, "variant", None)
    film = getattr(args, "film", None)
    embedding = getattr(args, "embedding", None)
    if dedicated is not None:
        if film or embedding:
            msg = "A dedicated U-Net has no condition generator: `--film` and `--embedding` do not apply"
            raise ConfigError(msg)
        model = dataclasses.replace(config.model, conditioned=False)
        return dataclasses.replace(config, model=model, generator=None, dedicated_task=dedicated)

    if not (variant or film or embedding):
        return config

    generator = config.generator or GeneratorConfig(n_tasks=len(config.tasks))
    if variant:
        film_mode, variant_embedding = VARIANTS[variant]
        generator = dataclasses.replace(generator, film_mode=film_mode, embedding=variant_embedding)
    if film:
        generator = dataclasses.replace(generator, film_mode=FilmMode(film))
    if embedding:
        generator = dataclasses.replace(generator, embedding=EMBEDDINGS[embedding])
    model = dataclasses.replace(config.model, conditioned=True, film_mode=generator.film_mode)
    return dataclasses.replace(config, model=model, generator=generator, dedicated_task=None)


def cmd_synth(args: argparse.Namespace) -> ReturnCode:
    """Write a synthetic dataset."""
    out_dir = args.out or args.data_root or default_data_root()
    if out_dir is None:
        msg = "No output directory: give `--out` or set the dataset root"
        raise ConfigError(msg)
    manifest = synth_dataset(
        args.tracks,
        args.duration,
        args.seed if args.seed is not None else 0,
        out_dir,
        n_test=args.test_tracks,
        sample_rate=args.sample_rate,
    )
    stdout_console.print(f"Wrote {len(manifest.tracks)} track(s) to {manifest.root}")
    return ReturnCode.SUCCESS


def cmd_train(args: argparse.Namespace) -> ReturnCode:
    """Train a conditioned or a dedicated model."""
    config = resolve_config(args)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, config.output_dir / "config.yaml")
    checkpoint_path = config.output_dir / CHECKPOINT_NAME
    ckpt = train(config, checkpoint_path=checkpoint_path)
    stdout_console.print(f"Best checkpoint (epoch {ckpt.epoch}, validation loss {ckpt.val_loss}): {checkpoint_path}")
    return ReturnCode.SUCCESS


def cmd_separate(args: argparse.Namespace) -> ReturnCode:
    """Separate one task of a mixture file with a trained model."""
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.experiment_config()
    if args.task not in config.tasks:
        msg = f"Unknown task `{args.task}`. Choose one of: {', '.join(config.tasks)}"
        raise ConfigError(msg)
    estimator = ModelEstimator.from_checkpoint(ckpt)
    LOG.info("Separating [task.%s]%s[/] from %s", args.task, args.task, args.mixture, extra=MARKUP)
    isolated, backing = separate_signal(estimator, load_wav(args.mixture), args.task, config.spectrogram)

    out_dir = args.out or args.mixture.parent
    isolated_path = out_dir / f"{args.mixture.stem}_{args.task}.wav"
    backing_path = out_dir / f"{args.mixture.stem}_{args.task}_accompaniment.wav"
    write_wav(isolated, isolated_path)
    write_wav(backing, backing_path)
    stdout_console.print(f"Wrote {isolated_path} and {backing_path}")
    return ReturnCode.SUCCESS


def cmd_evaluate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> ReturnCode:
    """Evaluate a checkpoint (or a baseline) on the test partition."""
    if (args.checkpoint is None) == (args.baseline is None):
        parser.error("give exactly one of a checkpoint or `--baseline`")
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        config = ckpt.experiment_config()
        estimator = ModelEstimator.from_checkpoint(ckpt, name=args.checkpoint.stem)
        tasks = ckpt.tasks
    else:
        config = preset(args.preset)
        if args.config:
            config = load_config(args.config, config)
        estimator = BASELINES[args.baseline]()
        tasks = config.tasks

    data_root = args.data_root or default_data_root() or config.data_root
    if data_root is None:
        msg = "No dataset root: give `--data-root` or set the environment variable"
        raise ConfigError(msg)
    manifest = DatasetManifest.load(data_root)
    dataset = StemDataset(manifest, config.spectrogram, config.tasks)
    filter_len = args.filter_len or config.eval.filter_len
    workers = args.workers or config.eval.workers
    results = evaluate_split(dataset, manifest.test_ids, tasks, estimator, filter_len, workers)

    out_dir = args.out or config.output_dir
    path = write_results_csv(results, out_dir / RESULTS_NAME)
    title = f"{estimator.name} on {len(manifest.test_ids)} track(s)"
    stdout_console.print(rich_table(summary_table(results), title=title, index_name="task"))
    stdout_console.print(f"Wrote {len(results)} result(s) to {path}")
    return ReturnCode.SUCCESS


def cmd_compare(args: argparse.Namespace) -> ReturnCode:
    """Correlate two result files."""
    results_a = read_results_csv(args.results_a)
    results_b = read_results_csv(args.results_b)
    report = compare_models(results_a, results_b)
    overall = report.global_report
    stdout_console.print(f"Global r = {overall.r:.4f} (p = {overall.p_value:.3g}, n = {overall.n_points})")
    if report.n_dropped:
        stdout_console.print(f"Dropped {report.n_dropped} unpaired point(s)")
    correlations = correlations_frame(report).set_index("grouping")
    stdout_console.print(rich_table(correlations, title="Correlations", index_name="grouping"))
    stdout_console.print(rich_table(summary_table(results_a), title=str(args.results_a), index_name="task"))
    stdout_console.print(rich_table(summary_table(results_b), title=str(args.results_b), index_name="task"))
    if args.out:
        for path in write_comparison(report, results_a, results_b, args.out):
            LOG.info("Wrote %s", path)
    return ReturnCode.SUCCESS


def cmd_params(args: argparse.Namespace) -> ReturnCode:
    """Print the parameter counts of the dedicated U-Nets and of each conditioned variant."""
    config = preset(args.preset)
    if args.config:
        config = load_config(args.config, config)
    rows = parameter_table(config.model, len(config.tasks))
    table = Table(title="Trainable parameters", header_style="table.header")
    for column in ("Model", "Total", "U-Net core", "Condition generator"):
        table.add_column(column, justify="right" if column != "Model" else "left")
    for row in rows:
        total = f"{row.total:,}"
        if row.per_task is not None:
            total = f"{total} ({len(config.tasks)} tasks x {row.per_task:,})"
        table.add_row(row.name, total, f"{row.core:,}", f"{row.generator:,}")
    stdout_console.print(table)
    return ReturnCode.SUCCESS


def _add_config_options(parser: argparse.ArgumentParser, *, config_flag: bool = True) -> None:
    if config_flag:
        parser.add_argument("--config", type=Path, help=HELP_MSG_CONFIG)
    parser.add_argument(
        "--preset",
        choices=["default", "tiny"],
        default="default",
        help="Built-in configuration to start from. `tiny` trains on a CPU in minutes.",
    )


def get_args(args: Sequence[str] | None = None) -> tuple[argparse.Namespace, argparse.ArgumentParser]:
    """Get the arguments from the command line and return them, with the parser that read them."""
    parser = CUNetArgumentParser(
        prog=SCRIPT_NAME,
        description="Separate music sources with a single conditioned U-Net",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "-V",
        "--version",
        action="version",
        version=f"{SCRIPT_NAME} {__version__}",
    )
    log_group = parser.add_mutually_exclusive_group()
    log_group.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Increase output verbosity (the maximum is -vvv)",
    )
    log_group.add_argument(
        "-q",
        "--quiet",
        action="count",
        default=0,
        help="Decrease output verbosity (the maximum is -qq)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    synth = subparsers.add_parser("synth", help="Write a seeded synthetic four stem dataset")
    synth.add_argument("--tracks", type=int, default=50, help="Number of tracks")
    synth.add_argument("--test-tracks", type=int, default=10, help="Number of tracks in the test partition")
    synth.add_argument("--duration", type=float, default=10.0, help="Duration of each track, in seconds (at least 4)")
    synth.add_argument("--sample-rate", type=int, default=8192, help="Sample rate of the written files")
    synth.add_argument("--seed", type=int, default=0, help=HELP_MSG_SEED)
    synth.add_argument("--data-root", type=Path, help=HELP_MSG_DATA_ROOT)
    synth.add_argument("--out", type=Path, help="Dataset directory to write. Defaults to the dataset root.")

    train_parser = subparsers.add_parser("train", help="Train a conditioned model, or a dedicated one")
    _add_config_options(train_parser)
    train_parser.add_argument("--seed", type=int, help=HELP_MSG_SEED)
    train_parser.add_argument("--data-root", type=Path, help=HELP_MSG_DATA_ROOT)
    train_parser.add_argument("--out", type=Path, help=HELP_MSG_OUT)
    arch_group = train_parser.add_mutually_exclusive_group()
    arch_group.add_argument("--variant", choices=list(VARIANTS), help="Conditioned variant, e.g., `SiF` or `CoC`")
    arch_group.add_argument(
        "--dedicated",
        metavar="TASK",
        help="Train a dedicated, non-conditioned U-Net for this task only",
    )
    train_parser.add_argument("--film", choices=[mode.value for mode in FilmMode], help="FiLM variant")
    train_parser.add_argument("--embedding", choices=list(EMBEDDINGS), help="Condition generator embedding")
    train_parser.add_argument(
        "--progressive",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Weight z and the target by a random value every few instances",
    )
    train_parser.add_argument("--epochs", type=int, help="Maximum number of epochs")
    train_parser.add_argument("--patience", type=int, help="Epochs without improvement before stopping")

    separate = subparsers.add_parser("separate", help="Separate one source from a mixture file")
    separate.add_argument("mixture", type=Path, help="Mixture WAV file")
    separate.add_argument("--checkpoint", type=Path, required=True, help="Trained model checkpoint")
    separate.add_argument("--task", required=True, help="Source to isolate, e.g., `drums`")
    separate.add_argument("--out", type=Path, help="Output directory. Defaults to the directory of the mixture.")

    evaluate = subparsers.add_parser("evaluate", help="Compute SDR, SIR, and SAR on the test partition")
    evaluate.add_argument("checkpoint", type=Path, nargs="?", help="Trained model checkpoint")
    evaluate.add_argument("--baseline", choices=list(BASELINES), help="Evaluate a reference estimator instead")
    _add_config_options(evaluate)
    evaluate.add_argument("--data-root", type=Path, help=HELP_MSG_DATA_ROOT)
    evaluate.add_argument("--filter-len", type=int, help="Length of the distortion filters allowed by BSS-eval")
    evaluate.add_argument("--workers", type=int, help="Number of tracks evaluated concurrently")
    evaluate.add_argument("--out", type=Path, help=HELP_MSG_OUT)

    compare = subparsers.add_parser("compare", help="Correlate the results of two models")
    compare.add_argument("results_a", type=Path, help="First results CSV file")
    compare.add_argument("results_b", type=Path, help="Second results CSV file")
    compare.add_argument("--out", type=Path, help=HELP_MSG_OUT)

    params = subparsers.add_parser("params", help="Count the parameters of every model family")
    params.add_argument("config", type=Path, nargs="?", help=HELP_MSG_CONFIG)
    _add_config_options(params, config_flag=False)

    return parser.parse_args(args=args), parser


def main(args: Sequence[str] | None = None) -> int:
    """Provide the main entrypoint."""
    parsed_args, parser = get_args(args=args)
    set_logger_level(parsed_args.verbose - parsed_args.quiet)

    # Show how this entry point was called, for analyzing user-provided logs
    main_args = args or sys.argv[1:]
    LOG.debug("Called with args: %s", main_args)

    commands = {
        "synth": cmd_synth,
        "train": cmd_train,
        "separate": cmd_separate,
        "evaluate": lambda parsed: cmd_evaluate(parsed, parser),
        "compare": cmd_compare,
        "params": cmd_params,
    }
    try:
        returncode = commands[parsed_args.command](parsed_args)
    except CUNetError as err:
        pprint_error(err)
        returncode = ReturnCode.RUNTIME_ERROR
    except OSError as err:
        LOG.error("%s: %s", type(err).__name__, err)
        returncode = ReturnCode.RUNTIME_ERROR

    msg = f"""
        Command: {parsed_args.command}
        Return code: {int(returncode)}"""
    LOG.debug(cleandoc(msg))
    return int(returncode)


def script_main() -> None:
    """Script entry point."""
    # The only point of this function is to ensure the proper exit code is set when called from the script entry point
    sys.exit(main())


if __name__ == "__main__":
    script_main()
