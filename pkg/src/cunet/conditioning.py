"""Provide the control mechanism of the conditioned U-Net.

A condition vector `z` selects the task (the instrument to isolate). The condition generator embeds `z` and emits,
through two linear heads, the FiLM parameters γ and β for every encoder depth. FiLM layers then apply `γ·x + β` to
the batch normalized encoder features: one scalar pair per depth in `simple` mode, or one pair per channel in
`complex` mode.
"""

from collections.abc import Sequence
import dataclasses

import numpy as np
import torch
from torch import nn

from cunet.config import Embedding, FilmMode, GeneratorConfig
from cunet.constants import BN_EPSILON, BN_MOMENTUM, DEFAULT_BASE_FILTERS, DEFAULT_N_BLOCKS
from cunet.exceptions import ConfigError, DomainError, ShapeError, StateError

DEFAULT_CHANNELS_PER_DEPTH = tuple(DEFAULT_BASE_FILTERS * 2**depth for depth in range(DEFAULT_N_BLOCKS))


@dataclasses.dataclass(frozen=True)
class ConditionVector:
    """Task selector `z`. Pure vectors are one-hot; progressive training scales them by a weight in [0, 1]."""

    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        """Ensure there is at least one task and that every weight lies in [0, 1]."""
        weights = tuple(float(weight) for weight in self.weights)
        if not weights:
            msg = "A condition vector needs at least one task"
            raise ShapeError(msg)
        if any(not 0.0 <= weight <= 1.0 for weight in weights):
            msg = f"Condition weights must be in [0, 1], got {weights}"
            raise DomainError(msg)
        object.__setattr__(self, "weights", weights)

    @property
    def n_tasks(self) -> int:
        """Get the number of tasks."""
        return len(self.weights)

    @property
    def is_pure(self) -> bool:
        """Predicate for a one-hot vector: exactly one entry is 1 and the rest are 0."""
        return sorted(self.weights) == [0.0] * (self.n_tasks - 1) + [1.0]

    def scaled(self, weight: float) -> "ConditionVector":
        """Return the vector multiplied by `weight`, which must be in [0, 1]."""
        return ConditionVector(tuple(weight * value for value in self.weights))

    def as_array(self) -> np.ndarray:
        """Get the weights as a float64 array."""
        return np.asarray(self.weights, dtype=np.float64)

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Get the weights as a 1D tensor."""
        return torch.tensor(self.weights, dtype=dtype)


def one_hot(task_index: int, n_tasks: int) -> ConditionVector:
    """Create the pure condition vector selecting `task_index` out of `n_tasks`."""
    if not 0 <= task_index < n_tasks:
        msg = f"Task index {task_index} is out of range for {n_tasks} tasks"
        raise IndexError(msg)
    weights = [0.0] * n_tasks
    weights[task_index] = 1.0
    return ConditionVector(tuple(weights))


@dataclasses.dataclass(frozen=True)
class FiLMParamSet:
    """FiLM parameters for every encoder depth.

    Tensors carry a leading batch dimension: shape `(N,)` per depth in simple mode and `(N, channels)` in complex mode.
    """

    gammas: tuple[torch.Tensor, ...]
    betas: tuple[torch.Tensor, ...]
    mode: FilmMode
    channels_per_depth: tuple[int, ...]

    def __post_init__(self) -> None:
        """Ensure there is one (γ, β) pair per depth with the mode's shape."""
        if not len(self.gammas) == len(self.betas) == len(self.channels_per_depth):
            msg = "FiLM parameters need one γ and one β per encoder depth"
            raise ShapeError(msg)
        for gamma, beta, channels in zip(self.gammas, self.betas, self.channels_per_depth, strict=True):
            if self.mode is FilmMode.COMPLEX:
                mismatch = gamma.ndim == 0 or gamma.shape[-1] != channels
            else:
                mismatch = gamma.ndim > 1
            if mismatch or gamma.shape != beta.shape:
                msg = f"Unexpected FiLM parameter shapes {tuple(gamma.shape)} / {tuple(beta.shape)}"
                raise ShapeError(msg)

    @property
    def depth(self) -> int:
        """Get the number of encoder depths."""
        return len(self.channels_per_depth)

    @property
    def cardinality(self) -> int:
        """Get the number of conditioning values per instance (γ's and β's)."""
        if self.mode is FilmMode.SIMPLE:
            return 2 * self.depth
        return 2 * sum(self.channels_per_depth)

    @classmethod
    def identity(
        cls,
        mode: FilmMode,
        channels_per_depth: Sequence[int] = DEFAULT_CHANNELS_PER_DEPTH,
        batch_size: int = 1,
        dtype: torch.dtype = torch.float32,
    ) -> "FiLMParamSet":
        """Create parameters with γ=1 and β=0, which leave every feature map unchanged."""
        shapes = [(batch_size,) if mode is FilmMode.SIMPLE else (batch_size, c) for c in channels_per_depth]
        return cls(
            gammas=tuple(torch.ones(shape, dtype=dtype) for shape in shapes),
            betas=tuple(torch.zeros(shape, dtype=dtype) for shape in shapes),
            mode=mode,
            channels_per_depth=tuple(channels_per_depth),
        )


def film_apply(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, mode: FilmMode) -> torch.Tensor:
    """Apply the FiLM affine transform `γ·x + β`.

    `x` is either a single feature map `[channels, ...]` or a batch `[N, channels, ...]`.

    * simple: γ and β are scalars (one map) or `(N,)` vectors (a batch) applied uniformly to all channels
    * complex: γ and β are `(channels,)` vectors (one map) or `(N, channels)` matrices (a batch), one per channel
    """
    gamma = torch.as_tensor(gamma, dtype=x.dtype, device=x.device)
    beta = torch.as_tensor(beta, dtype=x.dtype, device=x.device)
    if gamma.shape != beta.shape:
        msg = f"γ {tuple(gamma.shape)} and β {tuple(beta.shape)} must have the same shape"
        raise ShapeError(msg)
    if mode is FilmMode.SIMPLE:
        if gamma.ndim == 0:
            return gamma * x + beta
        if gamma.ndim != 1 or gamma.shape[0] != x.shape[0]:
            msg = f"Simple FiLM expects scalars or one value per batch item, got {tuple(gamma.shape)}"
            raise ShapeError(msg)
    else:
        channel_axis = gamma.ndim - 1
        if gamma.ndim not in {1, 2} or x.ndim <= channel_axis or gamma.shape != x.shape[: channel_axis + 1]:
            msg = f"Complex FiLM parameters {tuple(gamma.shape)} do not match the feature channels {tuple(x.shape)}"
            raise ShapeError(msg)
    broadcast = gamma.shape + (1,) * (x.ndim - gamma.ndim)
    return gamma.reshape(broadcast) * x + beta.reshape(broadcast)


class ConditionGenerator(nn.Module):
    """Map condition vectors to FiLM parameters with an embedding followed by two linear heads.

    The fully connected embedding is a dense layer followed by two blocks of (dense, dropout, batch norm). The CNN
    embedding treats `z` as a one channel sequence: a 1D convolution followed by two blocks of (convolution,
    dropout, batch norm), with `same`, `same`, `valid` padding and a kernel as wide as `z`. All hidden activations
    are ReLU, applied after the batch norm.
    """

    def __init__(self, config: GeneratorConfig, channels_per_depth: Sequence[int] = DEFAULT_CHANNELS_PER_DEPTH) -> None:
        """Build the layers. Weights are not usable until `initialize` is called or a state dict is loaded."""
        super().__init__()
        config.validate()
        self.config = config
        self.channels_per_depth = tuple(channels_per_depth)
        first, second, third = config.resolved_hidden_sizes
        n_tasks = config.n_tasks

        def block(layer: nn.Module, size: int, batch_norm: type[nn.Module]) -> list[nn.Module]:
            return [
                layer,
                nn.Dropout(config.dropout),
                batch_norm(size, eps=BN_EPSILON, momentum=BN_MOMENTUM),
                nn.ReLU(),
            ]

        if config.embedding is Embedding.FULLY_CONNECTED:
            self.embedding = nn.Sequential(
                nn.Linear(n_tasks, first),
                nn.ReLU(),
                *block(nn.Linear(first, second), second, nn.BatchNorm1d),
                *block(nn.Linear(second, third), third, nn.BatchNorm1d),
            )
            n_features = third
        elif config.embedding is Embedding.CNN:
            self.embedding = nn.Sequential(
                nn.Unflatten(1, (1, n_tasks)),
                nn.Conv1d(1, first, kernel_size=n_tasks, padding="same"),
                nn.ReLU(),
                *block(nn.Conv1d(first, second, kernel_size=n_tasks, padding="same"), second, nn.BatchNorm1d),
                *block(nn.Conv1d(second, third, kernel_size=n_tasks, padding="valid"), third, nn.BatchNorm1d),
                nn.Flatten(),
            )
            # The `valid` convolution with a kernel as wide as z leaves a single position per filter
            n_features = third
        else:
            msg = f"Unknown embedding: {config.embedding}"
            raise ConfigError(msg)

        simple = config.film_mode is FilmMode.SIMPLE
        n_outputs = len(self.channels_per_depth) if simple else sum(self.channels_per_depth)
        self.gamma_head = nn.Linear(n_features, n_outputs)
        self.beta_head = nn.Linear(n_features, n_outputs)
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def initialize(self) -> None:
        """Initialize the weights from the current torch random state.

        Dense and convolution weights are Glorot uniform and biases are zero, except the γ head bias which starts at
        one so that the FiLM layers start as the identity transform.
        """
        for module in self.modules():
            if isinstance(module, nn.Linear | nn.Conv1d):
                nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm1d):
                module.reset_parameters()
        with torch.no_grad():
            self.gamma_head.bias.fill_(1.0)
            self.initialized.fill_(True)  # noqa: FBT003

    def forward(self, z: torch.Tensor) -> FiLMParamSet:
        """Compute the FiLM parameters for a batch of condition vectors shaped `(N, n_tasks)`."""
        if not bool(self.initialized):
            msg = "The condition generator weights are not initialized"
            raise StateError(msg)
        if z.ndim != 2 or z.shape[1] != self.config.n_tasks:  # noqa: PLR2004 ; a batch of vectors
            msg = f"Expected condition vectors shaped (N, {self.config.n_tasks}), got {tuple(z.shape)}"
            raise ShapeError(msg)
        features = self.embedding(z)
        gammas = self.gamma_head(features)
        betas = self.beta_head(features)
        if self.config.film_mode is FilmMode.SIMPLE:
            per_depth = [(gammas[:, depth], betas[:, depth]) for depth in range(len(self.channels_per_depth))]
        else:
            per_depth = list(
                zip(
                    torch.split(gammas, self.channels_per_depth, dim=1),
                    torch.split(betas, self.channels_per_depth, dim=1),
                    strict=True,
                ),
            )
        return FiLMParamSet(
            gammas=tuple(gamma for gamma, _ in per_depth),
            betas=tuple(beta for _, beta in per_depth),
            mode=self.config.film_mode,
            channels_per_depth=self.channels_per_depth,
        )


def generator_forward(z: ConditionVector, config: GeneratorConfig, generator: ConditionGenerator) -> FiLMParamSet:
    """Compute the FiLM parameters of a single condition vector in inference mode.

    Dropout is off and batch norm uses its running statistics, so identical inputs give identical outputs.
    The training mode of `generator` is restored afterwards.
    """
    if generator.config != config:
        msg = "The generator was built from a different configuration"
        raise ConfigError(msg)
    if z.n_tasks != config.n_tasks:
        msg = f"Condition vector has {z.n_tasks} entries, expected {config.n_tasks}"
        raise ShapeError(msg)
    was_training = generator.training
    generator.eval()
    try:
        dtype = next(generator.parameters()).dtype
        with torch.no_grad():
            return generator(z.as_tensor(dtype).unsqueeze(0))
    finally:
        generator.train(was_training)


def generator_param_count(
    config: GeneratorConfig,
    channels_per_depth: Sequence[int] = DEFAULT_CHANNELS_PER_DEPTH,
) -> int:
    """Count the trainable parameters of a generator: weights, biases, and batch norm affine terms."""
    generator = ConditionGenerator(config, channels_per_depth)
    return sum(param.numel() for param in generator.parameters() if param.requires_grad)
