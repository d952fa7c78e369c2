"""Provide custom exceptions for the package.

Every error raised on purpose by `cunet` derives from `CUNetError`, so that the command line entry point can tell an
expected failure (bad input, incompatible checkpoint, degenerate metric) from a bug and exit with the right code.
"""

import sys

from rich import print as rich_print
from rich.console import RenderResult, group
from rich.panel import Panel


class CUNetError(Exception):
    """Base class for all expected failures in the package."""


class NotFound(CUNetError, FileNotFoundError):  # noqa: N818 ; name used throughout the docs and reports
    """A required file or directory does not exist."""


class FormatError(CUNetError):
    """A file exists but its content does not have the expected format."""


class InputTooShort(CUNetError):  # noqa: N818
    """A signal is shorter than one analysis window."""


class ConfigError(CUNetError):
    """A configuration value is invalid or inconsistent with another one."""


class DegenerateInput(CUNetError):  # noqa: N818
    """An input carries no information for the requested operation (e.g., all zeros)."""


class ShapeError(CUNetError):
    """Array shapes or lengths do not agree."""


class StateError(CUNetError):
    """An object is used before it is ready (e.g., uninitialized weights)."""


class DomainError(CUNetError):
    """A value lies outside the domain of the operation (e.g., negative magnitudes)."""


class InputError(CUNetError):
    """User supplied input is invalid (e.g., duplicated track identifiers)."""


class DataError(CUNetError):
    """The dataset on disk is incomplete or inconsistent."""


class TrainingError(CUNetError):
    """Training cannot continue (e.g., the loss became NaN)."""


class IncompatibleCheckpoint(CUNetError):  # noqa: N818
    """A checkpoint does not match the configuration it is loaded with."""


class UndefinedMetric(CUNetError):  # noqa: N818
    """A separation metric is undefined for the given signals (e.g., a silent target)."""


class UndefinedCorrelation(CUNetError):  # noqa: N818
    """A correlation is undefined for the given samples (too few points or zero variance)."""


@group()
def rich_cunet_error(err: CUNetError) -> RenderResult:
    """Create a group of rich renderables for prettier output of package errors.

    Reference: https://rich.readthedocs.io/en/latest/group.html
    """
    yield f"[bold yellow]ERROR[/]: [code]{type(err).__name__}[/]"
    yield str(err)
    if err.__cause__ is not None:
        cause = err.__cause__
        yield Panel(f"{type(cause).__name__}: {cause}", title="[bold yellow]CAUSE", expand=False, border_style="yellow")


def pprint_error(err: CUNetError) -> None:
    """Pretty print a package error using rich."""
    err_panel = Panel(
        rich_cunet_error(err),
        title="cunet Error",
        expand=False,
        border_style="traceback.border",
    )
    rich_print("", err_panel, file=sys.stderr)
