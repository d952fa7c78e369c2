"""Define the typed experiment configuration and its YAML file format.

An experiment is described by one `ExperimentConfig`, composed of a section per concern. The same structure is used
for the config file, where each section is a YAML mapping with the same name:

```yaml
spectrogram: {sample_rate: 8192, window_size: 1024, hop: 768, patch_width: 128}
model: {n_blocks: 6, base_filters: 16, film_mode: simple}
generator: {embedding: fully_connected}
train: {batch_size: 8, progressive: true}
eval: {filter_len: 512}
tasks: [vocals, drums, bass, rest]
data_root: data/synth
output_dir: runs/sif
```

Precedence, from lowest to highest: preset defaults, config file, environment, command line flags.
"""

import dataclasses
from enum import Enum
import hashlib
from inspect import cleandoc
import json
import os
from pathlib import Path
from typing import Any

from ruamel.yaml import YAML, YAMLError

from cunet.constants import (
    BN_EPSILON,
    BN_MOMENTUM,
    DECODER_DROPOUT,
    DECODER_DROPOUT_BLOCKS,
    DEFAULT_BASE_FILTERS,
    DEFAULT_FILTER_LEN,
    DEFAULT_HOP,
    DEFAULT_N_BLOCKS,
    DEFAULT_PATCH_WIDTH,
    DEFAULT_SAMPLE_RATE,
    DEFAULT_TASKS,
    DEFAULT_WINDOW_SIZE,
    ENCODER_LEAKINESS,
    ENVVAR_NAME_DATA_ROOT,
    PROGRESSIVE_PERIOD,
)
from cunet.exceptions import ConfigError, NotFound
from cunet.logger import LOG


class FilmMode(str, Enum):
    """FiLM variants: one (γ, β) pair per encoder depth, or one pair per channel of each depth."""

    SIMPLE = "simple"
    COMPLEX = "complex"


class Embedding(str, Enum):
    """Condition generator embeddings."""

    FULLY_CONNECTED = "fully_connected"
    CNN = "cnn"


class LossReduction(str, Enum):
    """Reduction of the entrywise L1 loss. `SUM` is the ‖·‖_{1,1} norm itself."""

    SUM = "sum"
    MEAN = "mean"


# Variant short names, as used in result tables: Si/Co = simple/complex FiLM, F/C = fully connected/CNN embedding
VARIANTS: dict[str, tuple[FilmMode, Embedding]] = {
    "SiF": (FilmMode.SIMPLE, Embedding.FULLY_CONNECTED),
    "CoF": (FilmMode.COMPLEX, Embedding.FULLY_CONNECTED),
    "SiC": (FilmMode.SIMPLE, Embedding.CNN),
    "CoC": (FilmMode.COMPLEX, Embedding.CNN),
}

# Default hidden sizes of each embedding: the first dense/conv layer followed by the two blocks
DEFAULT_HIDDEN_SIZES: dict[tuple[Embedding, FilmMode], tuple[int, ...]] = {
    (Embedding.FULLY_CONNECTED, FilmMode.SIMPLE): (16, 64, 256),
    (Embedding.FULLY_CONNECTED, FilmMode.COMPLEX): (16, 256, 1024),
    (Embedding.CNN, FilmMode.SIMPLE): (16, 32, 64),
    (Embedding.CNN, FilmMode.COMPLEX): (32, 64, 256),
}


@dataclasses.dataclass(frozen=True)
class SpectrogramConfig:
    """Audio front end settings shared by training, separation, and evaluation."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_size: int = DEFAULT_WINDOW_SIZE
    hop: int = DEFAULT_HOP
    patch_width: int = DEFAULT_PATCH_WIDTH

    @property
    def freq_rows(self) -> int:
        """Get the number of frequency rows of a patch, after the Nyquist bin is dropped."""
        return self.window_size // 2

    def validate(self) -> None:
        """Ensure the values are usable, raising `ConfigError` when they are not."""
        if self.sample_rate <= 0:
            msg = f"sample_rate must be positive, got {self.sample_rate}"
            raise ConfigError(msg)
        if self.window_size <= 0 or self.window_size % 2:
            msg = f"window_size must be a positive even number, got {self.window_size}"
            raise ConfigError(msg)
        if not 0 < self.hop <= self.window_size:
            msg = f"hop must be in (0, window_size], got {self.hop}"
            raise ConfigError(msg)
        if self.patch_width <= 0:
            msg = f"patch_width must be positive, got {self.patch_width}"
            raise ConfigError(msg)


@dataclasses.dataclass(frozen=True)
class GeneratorConfig:
    """Architecture of the condition generator that maps z to the FiLM parameters."""

    embedding: Embedding = Embedding.FULLY_CONNECTED
    film_mode: FilmMode = FilmMode.SIMPLE
    n_tasks: int = len(DEFAULT_TASKS)
    # Empty means "use the default sizes for this embedding and FiLM mode"
    hidden_sizes: tuple[int, ...] = ()
    dropout: float = 0.5
    head_activation: str = "linear"

    @classmethod
    def from_variant(cls, variant: str, n_tasks: int = len(DEFAULT_TASKS)) -> "GeneratorConfig":
        """Create the configuration of a named variant (`SiF`, `CoF`, `SiC`, or `CoC`)."""
        try:
            film_mode, embedding = VARIANTS[variant]
        except KeyError as err:
            msg = f"Unknown variant `{variant}`. Choose one of: {', '.join(VARIANTS)}"
            raise ConfigError(msg) from err
        return cls(embedding=embedding, film_mode=film_mode, n_tasks=n_tasks)

    @property
    def variant(self) -> str:
        """Get the short variant name of this configuration."""
        return next(name for name, pair in VARIANTS.items() if pair == (self.film_mode, self.embedding))

    @property
    def resolved_hidden_sizes(self) -> tuple[int, ...]:
        """Get the hidden sizes in use, falling back to the defaults for this embedding and FiLM mode."""
        return self.hidden_sizes or DEFAULT_HIDDEN_SIZES[self.embedding, self.film_mode]

    def validate(self) -> None:
        """Ensure the values are usable, raising `ConfigError` when they are not."""
        if self.n_tasks <= 0:
            msg = f"n_tasks must be positive, got {self.n_tasks}"
            raise ConfigError(msg)
        expected_hidden_sizes = 3
        if len(self.resolved_hidden_sizes) != expected_hidden_sizes or min(self.resolved_hidden_sizes) <= 0:
            msg = f"hidden_sizes must hold three positive sizes, got {self.resolved_hidden_sizes}"
            raise ConfigError(msg)
        if not 0.0 <= self.dropout < 1.0:
            msg = f"dropout must be in [0, 1), got {self.dropout}"
            raise ConfigError(msg)
        if self.head_activation != "linear":
            msg = f"The γ/β heads always use linear activations, got `{self.head_activation}`"
            raise ConfigError(msg)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture of the U-Net core."""

    n_blocks: int = DEFAULT_N_BLOCKS
    base_filters: int = DEFAULT_BASE_FILTERS
    kernel: tuple[int, int] = (5, 5)
    stride: int = 2
    leakiness: float = ENCODER_LEAKINESS
    dropout: float = DECODER_DROPOUT
    dropout_blocks: int = DECODER_DROPOUT_BLOCKS
    conditioned: bool = True
    film_mode: FilmMode = FilmMode.SIMPLE
    input_shape: tuple[int, int] = (DEFAULT_WINDOW_SIZE // 2, DEFAULT_PATCH_WIDTH)
    bn_epsilon: float = BN_EPSILON
    bn_momentum: float = BN_MOMENTUM

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        """Get the filter count of each encoder block; it doubles per block."""
        return tuple(self.base_filters * 2**depth for depth in range(self.n_blocks))

    def validate(self) -> None:
        """Ensure the values are usable, raising `ConfigError` when they are not."""
        if self.n_blocks <= 0 or self.base_filters <= 0:
            msg = f"n_blocks and base_filters must be positive, got {self.n_blocks} and {self.base_filters}"
            raise ConfigError(msg)
        if any(size % 2 == 0 for size in self.kernel):
            msg = f"kernel sizes must be odd so that each block exactly halves its input, got {self.kernel}"
            raise ConfigError(msg)
        if self.stride != 2:  # noqa: PLR2004 ; every block halves (encoder) or doubles (decoder) its input
            msg = f"Only stride 2 is supported, got {self.stride}"
            raise ConfigError(msg)
        factor = self.stride**self.n_blocks
        if any(dim % factor for dim in self.input_shape):
            msg = f"Input dims {self.input_shape} are not divisible by {factor} (= 2 ** n_blocks)"
            raise ConfigError(msg)
        if not 0 <= self.dropout_blocks <= self.n_blocks:
            msg = f"dropout_blocks must be in [0, n_blocks], got {self.dropout_blocks}"
            raise ConfigError(msg)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimization, sampling, and early stopping settings."""

    learning_rate: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    instances_per_epoch: int = 256
    val_instances: int = 32
    n_val: int = 5
    progressive: bool = True
    progressive_period: int = PROGRESSIVE_PERIOD
    loss_reduction: LossReduction = LossReduction.SUM
    loader_workers: int = 1
    seed: int = 0

    def validate(self) -> None:
        """Ensure the values are usable, raising `ConfigError` when they are not."""
        if self.learning_rate <= 0:
            msg = f"learning_rate must be positive, got {self.learning_rate}"
            raise ConfigError(msg)
        if self.patience < 1:
            msg = f"patience must be at least 1, got {self.patience}"
            raise ConfigError(msg)
        # Batch statistics of the generator need more than one value per feature in training mode
        if self.batch_size < 2:  # noqa: PLR2004
            msg = f"batch_size must be at least 2, got {self.batch_size}"
            raise ConfigError(msg)
        if min(self.max_epochs, self.instances_per_epoch, self.progressive_period, self.loader_workers) < 1:
            msg = "max_epochs, instances_per_epoch, progressive_period, and loader_workers must be positive"
            raise ConfigError(msg)
        if self.n_val < 0 or self.val_instances < 0:
            msg = "n_val and val_instances can not be negative"
            raise ConfigError(msg)


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    """BSS-eval settings."""

    filter_len: int = DEFAULT_FILTER_LEN
    workers: int = 1

    def validate(self) -> None:
        """Ensure the values are usable, raising `ConfigError` when they are not."""
        if self.filter_len < 1 or self.workers < 1:
            msg = f"filter_len and workers must be positive, got {self.filter_len} and {self.workers}"
            raise ConfigError(msg)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one training and evaluation run."""

    spectrogram: SpectrogramConfig = dataclasses.field(default_factory=SpectrogramConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    generator: GeneratorConfig | None = dataclasses.field(default_factory=GeneratorConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    tasks: tuple[str, ...] = DEFAULT_TASKS
    data_root: Path | None = None
    output_dir: Path = Path("runs")
    # Set for a dedicated (non-conditioned) U-Net trained on a single task
    dedicated_task: str | None = None

    @property
    def trained_tasks(self) -> tuple[str, ...]:
        """Get the tasks the model of this experiment separates."""
        if self.dedicated_task is None:
            return self.tasks
        return (self.dedicated_task,)

    def validate(self) -> None:
        """Ensure the sections are valid and consistent with each other, raising `ConfigError` when they are not."""
        self.spectrogram.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if len(set(self.tasks)) != len(self.tasks) or not self.tasks:
            msg = f"tasks must be a non-empty list of unique names, got {list(self.tasks)}"
            raise ConfigError(msg)
        expected_shape = (self.spectrogram.freq_rows, self.spectrogram.patch_width)
        if tuple(self.model.input_shape) != expected_shape:
            msg = f"""
                Model input shape {tuple(self.model.input_shape)} does not match the spectrogram patches
                {expected_shape} (window_size // 2, patch_width)"""
            raise ConfigError(cleandoc(msg))
        if self.dedicated_task is not None:
            if self.model.conditioned:
                msg = "A dedicated task was given but the model is conditioned"
                raise ConfigError(msg)
            if self.dedicated_task not in self.tasks:
                msg = f"Dedicated task `{self.dedicated_task}` is not one of {list(self.tasks)}"
                raise ConfigError(msg)
        if self.model.conditioned:
            if self.generator is None:
                msg = "A conditioned model requires a generator section"
                raise ConfigError(msg)
            self.generator.validate()
            if self.generator.n_tasks != len(self.tasks):
                msg = f"generator.n_tasks ({self.generator.n_tasks}) must equal the number of tasks ({len(self.tasks)})"
                raise ConfigError(msg)
            if self.generator.film_mode != self.model.film_mode:
                modes = f"model `{self.model.film_mode.value}`, generator `{self.generator.film_mode.value}`"
                msg = f"FiLM modes differ: {modes}"
                raise ConfigError(msg)

    def architecture_dict(self) -> dict[str, Any]:
        """Get the fields that determine the shapes of the trained weights."""
        return {
            "spectrogram": to_plain(self.spectrogram),
            "model": to_plain(self.model),
            "generator": to_plain(self.generator) if self.model.conditioned else None,
            "tasks": list(self.tasks),
            "dedicated_task": self.dedicated_task,
        }

    def architecture_digest(self) -> str:
        """Get the SHA-256 digest identifying the architecture. It is the checkpoint's `config_digest`."""
        canonical = json.dumps(self.architecture_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def to_plain(obj: Any) -> Any:
    """Convert a config object into plain YAML/JSON friendly values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {field.name: to_plain(getattr(obj, field.name)) for field in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, tuple | list):
        return [to_plain(item) for item in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Coerce a plain value to the type of the field default it replaces."""
    try:
        if isinstance(default, Enum):
            return type(default)(value)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                msg = f"`{where}` must be true or false, got {value!r}"
                raise ConfigError(msg)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                msg = f"`{where}` must be an integer, got {value!r}"
                raise ConfigError(msg)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str) or not hasattr(value, "__iter__"):
                msg = f"`{where}` must be a list, got {value!r}"
                raise ConfigError(msg)
            items = list(value)
            if default:
                return tuple(_coerce(item, default[0], where) for item in items)
            return tuple(int(item) for item in items)
    except (TypeError, ValueError) as err:
        msg = f"`{where}` has an invalid value: {value!r}"
        raise ConfigError(msg) from err
    return value


def replace_section(section: Any, overrides: dict[str, Any], name: str) -> Any:
    """Return a copy of a config section with plain `overrides` applied and type checked."""
    if not isinstance(overrides, dict):
        msg = f"Section `{name}` must be a mapping"
        raise ConfigError(msg)
    known = {field.name for field in dataclasses.fields(section)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        msg = f"Unknown key(s) in section `{name}`: {', '.join(unknown)}"
        raise ConfigError(msg)
    changes = {key: _coerce(value, getattr(section, key), f"{name}.{key}") for key, value in overrides.items()}
    return dataclasses.replace(section, **changes)


def preset(name: str = "default") -> ExperimentConfig:
    """Get a built-in starting configuration.

    `default` is the full-scale setup. `tiny` is a desk-scale setup that trains on a CPU in minutes:
    3 blocks, 4 base filters, a 64 sample window with a hop of 48, and 16 frame patches (32x16 inputs).
    """
    if name == "default":
        return ExperimentConfig()
    if name == "tiny":
        spectrogram = SpectrogramConfig(window_size=64, hop=48, patch_width=16)
        return ExperimentConfig(
            spectrogram=spectrogram,
            model=ModelConfig(n_blocks=3, base_filters=4, input_shape=(spectrogram.freq_rows, spectrogram.patch_width)),
            train=TrainConfig(max_epochs=30, n_val=2, instances_per_epoch=256, val_instances=32),
            eval=EvalConfig(filter_len=64),
        )
    msg = f"Unknown preset `{name}`. Choose one of: default, tiny"
    raise ConfigError(msg)


def apply_overrides(config: ExperimentConfig, data: dict[str, Any]) -> ExperimentConfig:
    """Apply a plain nested mapping, as read from a config file, on top of `config`."""
    sections = {"spectrogram", "model", "generator", "train", "eval"}
    flat = {"tasks", "data_root", "output_dir", "dedicated_task"}
    unknown = sorted(set(data) - sections - flat)
    if unknown:
        msg = f"Unknown top-level key(s) in config: {', '.join(unknown)}"
        raise ConfigError(msg)

    changes: dict[str, Any] = {}
    for name in sections & set(data):
        current = getattr(config, name)
        if name == "generator" and data[name] is None:
            changes[name] = None
            continue
        if current is None:
            current = GeneratorConfig()
        changes[name] = replace_section(current, data[name] or {}, name)
    if "tasks" in data:
        changes["tasks"] = _coerce(data["tasks"], ("vocals",), "tasks")
    for key in ("data_root", "output_dir"):
        if data.get(key) is not None:
            changes[key] = Path(data[key])
    if "dedicated_task" in data:
        changes["dedicated_task"] = data["dedicated_task"]
    return dataclasses.replace(config, **changes)


def load_config(path: Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read a YAML experiment config file on top of `base` (the default preset when not given)."""
    if not path.is_file():
        msg = f"Config file not found: {path}"
        raise NotFound(msg)
    yaml = YAML(typ="safe")
    try:
        data = yaml.load(path.read_text(encoding="utf-8")) or {}
    except YAMLError as err:
        msg = f"Config file `{path}` is not valid YAML"
        raise ConfigError(msg) from err
    if not isinstance(data, dict):
        msg = f"Config file `{path}` must hold a mapping at the top level"
        raise ConfigError(msg)
    LOG.debug("Loaded config file: %s", path)
    return apply_overrides(base or preset(), data)


def save_config(config: ExperimentConfig, path: Path) -> None:
    """Write `config` as a YAML experiment config file."""
    yaml = YAML(typ="safe")
    yaml.default_flow_style = False
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        yaml.dump(to_plain(config), f)


def config_from_plain(data: dict[str, Any]) -> ExperimentConfig:
    """Rebuild a config from the plain form produced by `to_plain` (as stored in checkpoints)."""
    return apply_overrides(ExperimentConfig(), data)


def default_data_root() -> Path | None:
    """Get the dataset root from the environment, when set."""
    env_value = os.getenv(ENVVAR_NAME_DATA_ROOT)
    return Path(env_value) if env_value else None
