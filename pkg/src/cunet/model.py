"""Define the U-Net masking network and its conditioned variant.

The core is a spectrogram U-Net: encoder blocks of (5x5 stride 2 convolution, batch norm, leaky ReLU) halve the
input and double the channels; decoder blocks of (5x5 stride 2 deconvolution, batch norm, ReLU, dropout in the first
three) mirror them, each fed with the previous decoder output concatenated to the encoder output of the same depth.
A 1x1 convolution with a sigmoid turns the last decoder output into a soft mask that multiplies the input.

The conditioned network inserts a FiLM layer in every encoder block, after the batch norm and before the leaky ReLU,
with parameters computed by a `ConditionGenerator` from the condition vector. The skip connections therefore carry
the conditioned features as well.
"""

from collections import OrderedDict
from collections.abc import Sequence
import dataclasses
from enum import Enum

import numpy as np
import torch
from torch import nn

from cunet.conditioning import ConditionGenerator, ConditionVector, FiLMParamSet, film_apply, generator_param_count
from cunet.config import VARIANTS, FilmMode, GeneratorConfig, LossReduction, ModelConfig
from cunet.exceptions import ConfigError, DomainError, ShapeError
from cunet.logger import LOG


class Mode(str, Enum):
    """Network mode: dropout and batch statistics are only active in `train` mode."""

    TRAIN = "train"
    EVAL = "eval"


@dataclasses.dataclass(frozen=True)
class MaskOutput:
    """Soft mask in (0, 1) and the masked input magnitude, both shaped `(N, frequency, frames)`."""

    mask: torch.Tensor
    masked_magnitude: torch.Tensor


class EncoderBlock(nn.Module):
    """Convolution, batch norm, optional FiLM, and leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, config: ModelConfig) -> None:  # noqa: D107
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            kernel_size=config.kernel,
            stride=config.stride,
            padding=(config.kernel[0] // 2, config.kernel[1] // 2),
        )
        self.batch_norm = nn.BatchNorm2d(out_channels, eps=config.bn_epsilon, momentum=config.bn_momentum)
        self.activation = nn.LeakyReLU(config.leakiness)

    def forward(
        self,
        x: torch.Tensor,
        film: tuple[torch.Tensor, torch.Tensor, FilmMode] | None = None,
    ) -> torch.Tensor:
        """Encode `x`, modulating the normalized features with `film` when given."""
        x = self.batch_norm(self.conv(x))
        if film is not None:
            gamma, beta, mode = film
            x = film_apply(x, gamma, beta, mode)
        return self.activation(x)


class DecoderBlock(nn.Module):
    """Deconvolution that exactly doubles the spatial dims, batch norm, ReLU, and optional dropout."""

    def __init__(self, in_channels: int, out_channels: int, config: ModelConfig, *, dropout: bool) -> None:
        """Build the layers; `dropout` selects whether the block ends with a dropout layer."""
        super().__init__()
        self.deconv = nn.ConvTranspose2d(
            in_channels,
            out_channels,
            kernel_size=config.kernel,
            stride=config.stride,
            padding=(config.kernel[0] // 2, config.kernel[1] // 2),
            output_padding=config.stride - 1,
        )
        self.batch_norm = nn.BatchNorm2d(out_channels, eps=config.bn_epsilon, momentum=config.bn_momentum)
        self.activation = nn.ReLU()
        self.dropout = nn.Dropout(config.dropout) if dropout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # noqa: D102
        return self.dropout(self.activation(self.batch_norm(self.deconv(x))))


class UNet(nn.Module):
    """Non-conditioned U-Net. On its own it is the dedicated, single task baseline."""

    def __init__(self, config: ModelConfig) -> None:  # noqa: D107
        super().__init__()
        config.validate()
        self.config = config
        channels = config.encoder_channels
        n_blocks = config.n_blocks

        self.encoder = nn.ModuleList(
            EncoderBlock(1 if depth == 0 else channels[depth - 1], channels[depth], config) for depth in range(n_blocks)
        )
        decoder = []
        for index in range(n_blocks):
            in_channels = channels[-1] if index == 0 else 2 * channels[n_blocks - 1 - index]
            out_channels = channels[n_blocks - 2 - index] if index < n_blocks - 1 else channels[0]
            decoder.append(DecoderBlock(in_channels, out_channels, config, dropout=index < config.dropout_blocks))
        self.decoder = nn.ModuleList(decoder)
        self.mask_head = nn.Conv2d(channels[0], 1, kernel_size=1)

    def forward(self, x: torch.Tensor, film: FiLMParamSet | None = None) -> torch.Tensor:
        """Compute the soft mask of a batch shaped `(N, 1, frequency, frames)`."""
        skips = []
        for depth, block in enumerate(self.encoder):
            block_film = None if film is None else (film.gammas[depth], film.betas[depth], film.mode)
            x = block(x, block_film)
            skips.append(x)
        x = skips.pop()
        for index, block in enumerate(self.decoder):
            if index > 0:
                x = torch.cat([x, skips.pop()], dim=1)
            x = block(x)
        return torch.sigmoid(self.mask_head(x))


class ConditionedUNet(nn.Module):
    """U-Net core whose encoder is modulated by FiLM parameters computed from the condition vector."""

    def __init__(self, config: ModelConfig, generator_config: GeneratorConfig) -> None:  # noqa: D107
        super().__init__()
        if generator_config.film_mode != config.film_mode:
            msg = f"FiLM modes differ: model `{config.film_mode.value}`, generator `{generator_config.film_mode.value}`"
            raise ConfigError(msg)
        self.config = config
        self.core = UNet(config)
        self.generator = ConditionGenerator(generator_config, config.encoder_channels)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Compute the soft mask of a batch `x` for the condition vectors `z` shaped `(N, n_tasks)`."""
        return self.core(x, self.generator(z))


Model = UNet | ConditionedUNet


def _initialize_core(module: nn.Module) -> None:
    """Initialize convolution weights with Glorot uniform, biases with zeros, and batch norm with the identity."""
    for layer in module.modules():
        if isinstance(layer, nn.Conv2d | nn.ConvTranspose2d):
            nn.init.xavier_uniform_(layer.weight)
            nn.init.zeros_(layer.bias)
        elif isinstance(layer, nn.BatchNorm2d):
            layer.reset_parameters()


def build_model(
    config: ModelConfig,
    gen_config: GeneratorConfig | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Model:
    """Build and initialize a model. The same seed always gives bit-identical weights.

    A conditioned config requires `gen_config`; a dedicated one ignores it.
    """
    config.validate()
    if config.conditioned and gen_config is None:
        msg = "A conditioned model requires a generator configuration"
        raise ConfigError(msg)
    # Keep the global torch random state untouched so that building a model never shifts other random draws
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if config.conditioned:
            model: Model = ConditionedUNet(config, gen_config)
            _initialize_core(model.core)
            model.generator.initialize()
        else:
            model = UNet(config)
            _initialize_core(model)
    model = model.to(dtype)
    LOG.debug("Built %s model with %d parameters", type(model).__name__, count_parameters(model))
    return model


def _as_batch(X: torch.Tensor | np.ndarray, model: Model) -> torch.Tensor:
    """Shape magnitudes as `(N, 1, frequency, frames)` in the model dtype, rejecting negative entries."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(X, dtype=dtype)
    if x.ndim == 2:  # noqa: PLR2004 ; a single patch
        x = x.unsqueeze(0)
    if x.ndim == 3:  # noqa: PLR2004 ; a batch of patches
        x = x.unsqueeze(1)
    expected = tuple(model.config.input_shape)
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != expected:  # noqa: PLR2004
        msg = f"Expected patches shaped {expected}, got {tuple(x.shape)}"
        raise ShapeError(msg)
    if bool((x < 0).any()):
        msg = "Magnitude inputs must be non-negative"
        raise DomainError(msg)
    return x


def _as_conditions(z: ConditionVector | torch.Tensor | None, model: Model, batch_size: int) -> torch.Tensor | None:
    """Shape condition vectors as `(N, n_tasks)`, repeating a single vector over the batch."""
    if not isinstance(model, ConditionedUNet):
        if z is not None:
            msg = "A dedicated model does not take a condition vector"
            raise ConfigError(msg)
        return None
    if z is None:
        msg = "A conditioned model requires a condition vector"
        raise ShapeError(msg)
    dtype = next(model.parameters()).dtype
    cond = z.as_tensor(dtype) if isinstance(z, ConditionVector) else torch.as_tensor(z, dtype=dtype)
    if cond.ndim == 1:
        cond = cond.unsqueeze(0).expand(batch_size, -1)
    n_tasks = model.generator.config.n_tasks
    if cond.shape != (batch_size, n_tasks):
        msg = f"Expected condition vectors of length {n_tasks} for {batch_size} patch(es), got {tuple(cond.shape)}"
        raise ShapeError(msg)
    return cond


def forward(
    model: Model,
    X: torch.Tensor | np.ndarray,
    z: ConditionVector | torch.Tensor | None = None,
    mode: Mode = Mode.EVAL,
) -> MaskOutput:
    """Run the network on one patch `(frequency, frames)` or a batch `(N, frequency, frames)` of magnitudes."""
    model.train(mode is Mode.TRAIN)
    x = _as_batch(X, model)
    cond = _as_conditions(z, model, x.shape[0])
    mask = model(x) if cond is None else model(x, cond)
    mask = mask.squeeze(1)
    return MaskOutput(mask=mask, masked_magnitude=mask * x.squeeze(1))


def masked_l1(
    mask: torch.Tensor,
    X: torch.Tensor,
    Y: torch.Tensor,
    reduction: LossReduction = LossReduction.SUM,
) -> torch.Tensor:
    """Compute the entrywise L1 norm of `mask ⊙ X − Y`, or its mean with `LossReduction.MEAN`."""
    if X.shape != Y.shape or mask.shape != X.shape:
        msg = f"Shapes differ: mask {tuple(mask.shape)}, X {tuple(X.shape)}, Y {tuple(Y.shape)}"
        raise ShapeError(msg)
    deviation = torch.abs(mask * X - Y)
    return deviation.sum() if reduction is LossReduction.SUM else deviation.mean()


def loss(
    model: Model,
    X: torch.Tensor | np.ndarray,
    Y: torch.Tensor | np.ndarray,
    z: ConditionVector | torch.Tensor | None = None,
    mode: Mode = Mode.TRAIN,
    reduction: LossReduction = LossReduction.SUM,
) -> torch.Tensor:
    """Compute the masking loss ‖f(X, θ) ⊙ X − Y‖₁,₁ for a patch or a batch.

    `Y` is expected to be pre-scaled by the progressive weight when progressive training is on.
    """
    output = forward(model, X, z, mode)
    target = torch.as_tensor(Y, dtype=output.mask.dtype)
    if target.ndim == 2:  # noqa: PLR2004 ; a single patch
        target = target.unsqueeze(0)
    return masked_l1(output.mask, _as_batch(X, model).squeeze(1), target, reduction)


def backward(
    model: Model,
    X: torch.Tensor | np.ndarray,
    Y: torch.Tensor | np.ndarray,
    z: ConditionVector | torch.Tensor | None = None,
    mode: Mode = Mode.TRAIN,
    reduction: LossReduction = LossReduction.SUM,
) -> OrderedDict[str, torch.Tensor]:
    """Compute the gradient of the loss with respect to every trainable parameter, generator included.

    Parameters that do not influence the loss get a zero gradient. `.grad` attributes are left untouched.
    """
    named = [(name, param) for name, param in model.named_parameters() if param.requires_grad]
    value = loss(model, X, Y, z, mode, reduction)
    grads = torch.autograd.grad(value, [param for _, param in named], allow_unused=True)
    return OrderedDict(
        (name, torch.zeros_like(param) if grad is None else grad)
        for (name, param), grad in zip(named, grads, strict=True)
    )


def count_parameters(model: nn.Module) -> int:
    """Count trainable scalars: convolution weights and biases, batch norm scales and shifts, and the generator."""
    return sum(param.numel() for param in model.parameters() if param.requires_grad)


def core_parameter_count(model: Model) -> int:
    """Count the trainable scalars of the U-Net core, without the condition generator."""
    core = model.core if isinstance(model, ConditionedUNet) else model
    return count_parameters(core)


def separate_patches(
    model: Model,
    patches: np.ndarray,
    z: ConditionVector | None = None,
    batch_size: int = 16,
) -> np.ndarray:
    """Estimate the target magnitudes of patches shaped `(N, frequency, frames)` in inference mode."""
    outputs = []
    with torch.no_grad():
        for start in range(0, patches.shape[0], batch_size):
            output = forward(model, patches[start : start + batch_size], z, Mode.EVAL)
            outputs.append(output.masked_magnitude.double().numpy())
    return np.concatenate(outputs, axis=0) if outputs else np.empty((0, *patches.shape[1:]))


@dataclasses.dataclass(frozen=True)
class ParameterRow:
    """One column of the parameter table: a model family and its trainable parameter count."""

    name: str
    total: int
    core: int
    generator: int
    per_task: int | None = None


def parameter_table(config: ModelConfig, n_tasks: int, variants: Sequence[str] = tuple(VARIANTS)) -> list[ParameterRow]:
    """Count parameters for the dedicated U-Nets (one per task) and for each conditioned variant.

    The conditioned core is the same network for every variant; only the generator differs.
    """
    dedicated_config = dataclasses.replace(config, conditioned=False)
    core = count_parameters(UNet(dedicated_config))
    rows = [ParameterRow(name="Non-conditioned", total=core * n_tasks, core=core, generator=0, per_task=core)]
    for variant in variants:
        gen_config = GeneratorConfig.from_variant(variant, n_tasks)
        generator = generator_param_count(gen_config, config.encoder_channels)
        rows.append(ParameterRow(name=variant, total=core + generator, core=core, generator=generator))
    return rows
