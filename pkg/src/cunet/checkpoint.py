"""Read and write checkpoints in a single file container.

Layout:

    magic (10 bytes) | manifest length (8 bytes, little-endian) | manifest (UTF-8 JSON) | payload

The manifest holds the run metadata and one entry per tensor with its name, shape, element type, byte offset, and
byte count in the payload. The payload is the contiguous little-endian tensor data. Weights are 32-bit floats; batch
norm counters are 64-bit integers and the generator's `initialized` flag is a byte.

Saving a loaded checkpoint gives the same bytes.
"""

from collections import OrderedDict
import dataclasses
from inspect import cleandoc
import json
from pathlib import Path
import struct
from typing import Any

import numpy as np
import torch

from cunet.config import ExperimentConfig, config_from_plain, to_plain
from cunet.constants import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from cunet.exceptions import CUNetError, FormatError, IncompatibleCheckpoint, NotFound
from cunet.logger import LOG
from cunet.model import Model, build_model

HEADER = struct.Struct("<Q")
DTYPES: dict[torch.dtype, str] = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.bool: "|b1",
}
MODEL_PREFIX = "model/"
EXP_AVG_PREFIX = "adam/exp_avg/"
EXP_AVG_SQ_PREFIX = "adam/exp_avg_sq/"


@dataclasses.dataclass(frozen=True)
class OptimizerState:
    """ADAM moment estimates per parameter name and the shared step count."""

    step: int
    exp_avg: OrderedDict[str, torch.Tensor]
    exp_avg_sq: OrderedDict[str, torch.Tensor]

    @classmethod
    def empty(cls) -> "OptimizerState":
        """Get the state of an optimizer that has not stepped yet."""
        return cls(step=0, exp_avg=OrderedDict(), exp_avg_sq=OrderedDict())

    @classmethod
    def capture(cls, model: Model, optimizer: torch.optim.Adam) -> "OptimizerState":
        """Copy the moment estimates of `optimizer`, keyed by the names of the parameters of `model`."""
        exp_avg, exp_avg_sq = OrderedDict(), OrderedDict()
        step = 0
        for name, param in model.named_parameters():
            state = optimizer.state.get(param)
            if not state:
                continue
            exp_avg[name] = state["exp_avg"].detach().clone()
            exp_avg_sq[name] = state["exp_avg_sq"].detach().clone()
            step = max(step, int(state["step"]))
        return cls(step=step, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)

    def restore(self, model: Model, optimizer: torch.optim.Adam) -> None:
        """Load the moment estimates into `optimizer`, which must have been built over `model.parameters()`."""
        for name, param in model.named_parameters():
            if name not in self.exp_avg:
                continue
            optimizer.state[param] = {
                "step": torch.tensor(float(self.step)),
                "exp_avg": self.exp_avg[name].clone().to(param.dtype),
                "exp_avg_sq": self.exp_avg_sq[name].clone().to(param.dtype),
            }


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    """A trained model with its optimizer state and the configuration it was trained with."""

    model_weights: OrderedDict[str, torch.Tensor]
    optimizer_state: OptimizerState
    epoch: int
    val_loss: float | None
    config_digest: str
    config: dict[str, Any]
    tasks: tuple[str, ...]

    @classmethod
    def capture(
        cls,
        model: Model,
        optimizer: torch.optim.Adam | None,
        config: ExperimentConfig,
        epoch: int,
        val_loss: float | None,
    ) -> "Checkpoint":
        """Snapshot a model (and its optimizer) during or after training."""
        weights = OrderedDict((name, tensor.detach().clone()) for name, tensor in model.state_dict().items())
        state = OptimizerState.empty() if optimizer is None else OptimizerState.capture(model, optimizer)
        return cls(
            model_weights=weights,
            optimizer_state=state,
            epoch=epoch,
            val_loss=val_loss,
            config_digest=config.architecture_digest(),
            config=_plain_config(config),
            tasks=config.trained_tasks,
        )

    def experiment_config(self) -> ExperimentConfig:
        """Rebuild the experiment configuration stored in the checkpoint."""
        return config_from_plain(self.config)

    def build_model(self) -> Model:
        """Build the checkpointed model with its trained weights, in inference mode."""
        config = self.experiment_config()
        model = build_model(config.model, config.generator, seed=config.train.seed)
        try:
            model.load_state_dict(self.model_weights, strict=True)
        except RuntimeError as err:
            msg = "The checkpoint weights do not fit the model built from its own configuration"
            raise IncompatibleCheckpoint(msg) from err
        model.eval()
        return model


def _plain_config(config: ExperimentConfig) -> dict[str, Any]:
    # Local paths are left out; they do not describe the model
    plain = to_plain(config)
    plain.pop("data_root", None)
    plain.pop("output_dir", None)
    return plain


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    entries = [(f"{MODEL_PREFIX}{name}", tensor) for name, tensor in ckpt.model_weights.items()]
    entries += [(f"{EXP_AVG_PREFIX}{name}", tensor) for name, tensor in ckpt.optimizer_state.exp_avg.items()]
    entries += [(f"{EXP_AVG_SQ_PREFIX}{name}", tensor) for name, tensor in ckpt.optimizer_state.exp_avg_sq.items()]
    return entries


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    """Write a checkpoint container to `path`."""
    tensors = []
    chunks = []
    offset = 0
    for name, tensor in _tensor_entries(ckpt):
        if tensor.dtype not in DTYPES:
            msg = f"Tensor `{name}` has an unsupported element type: {tensor.dtype}"
            raise FormatError(msg)
        data = tensor.detach().cpu().contiguous().numpy().astype(DTYPES[tensor.dtype], copy=False).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": DTYPES[tensor.dtype],
                "offset": offset,
                "nbytes": len(data),
            },
        )
        chunks.append(data)
        offset += len(data)

    manifest = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "step": ckpt.optimizer_state.step,
        "config_digest": ckpt.config_digest,
        "config": ckpt.config,
        "tasks": list(ckpt.tasks),
        "tensors": tensors,
    }
    encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(HEADER.pack(len(encoded)))
        f.write(encoded)
        for chunk in chunks:
            f.write(chunk)
    LOG.debug("Saved checkpoint of epoch %d to %s (%d bytes of tensors)", ckpt.epoch, path, offset)
    return path


def _read_manifest(data: bytes, path: Path) -> tuple[dict[str, Any], memoryview]:
    if not data.startswith(CHECKPOINT_MAGIC):
        msg = f"`{path}` is not a checkpoint file"
        raise FormatError(msg)
    start = len(CHECKPOINT_MAGIC)
    if len(data) < start + HEADER.size:
        msg = f"Checkpoint `{path}` is truncated"
        raise FormatError(msg)
    (manifest_len,) = HEADER.unpack_from(data, start)
    start += HEADER.size
    if len(data) < start + manifest_len:
        msg = f"Checkpoint `{path}` is truncated"
        raise FormatError(msg)
    try:
        manifest = json.loads(data[start : start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        msg = f"Checkpoint `{path}` has a malformed manifest"
        raise FormatError(msg) from err
    return manifest, memoryview(data)[start + manifest_len :]


def load_checkpoint(path: Path, expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint container.

    The stored configuration must reproduce the stored `config_digest`, and so must the run configuration when its
    digest is passed as `expected_digest`. Tensor shapes are checked against a model built from the stored
    configuration.
    """
    path = Path(path)
    if not path.is_file():
        msg = f"Checkpoint not found: {path}"
        raise NotFound(msg)
    manifest, payload = _read_manifest(path.read_bytes(), path)
    if manifest.get("version") != CHECKPOINT_FORMAT_VERSION:
        msg = f"Unsupported checkpoint version {manifest.get('version')} in `{path}`"
        raise FormatError(msg)

    tensors: dict[str, torch.Tensor] = {}
    try:
        for entry in manifest["tensors"]:
            end = entry["offset"] + entry["nbytes"]
            if end > len(payload):
                msg = f"Checkpoint `{path}` is truncated: tensor `{entry['name']}` ends past the payload"
                raise FormatError(msg)
            array = np.frombuffer(payload[entry["offset"] : end], dtype=np.dtype(entry["dtype"]))
            tensors[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).copy())
        digest = manifest["config_digest"]
        plain_config = manifest["config"]
    except (KeyError, TypeError, ValueError) as err:
        msg = f"Checkpoint `{path}` has a malformed manifest"
        raise FormatError(msg) from err

    try:
        config = config_from_plain(plain_config)
    except CUNetError as err:
        msg = f"Checkpoint `{path}` holds an invalid configuration"
        raise IncompatibleCheckpoint(msg) from err
    if config.architecture_digest() != digest:
        msg = f"Checkpoint `{path}` configuration does not match its digest"
        raise IncompatibleCheckpoint(msg)
    if expected_digest is not None and expected_digest != digest:
        msg = f"""
            Checkpoint `{path}` was trained with a different architecture
            expected digest: {expected_digest}
            checkpoint digest: {digest}"""
        raise IncompatibleCheckpoint(cleandoc(msg))

    def with_prefix(prefix: str) -> OrderedDict[str, torch.Tensor]:
        return OrderedDict((name.removeprefix(prefix), t) for name, t in tensors.items() if name.startswith(prefix))

    ckpt = Checkpoint(
        model_weights=with_prefix(MODEL_PREFIX),
        optimizer_state=OptimizerState(
            step=int(manifest.get("step", 0)),
            exp_avg=with_prefix(EXP_AVG_PREFIX),
            exp_avg_sq=with_prefix(EXP_AVG_SQ_PREFIX),
        ),
        epoch=int(manifest["epoch"]),
        val_loss=manifest["val_loss"],
        config_digest=digest,
        config=plain_config,
        tasks=tuple(manifest["tasks"]),
    )
    _check_shapes(ckpt, config, path)
    return ckpt


def _check_shapes(ckpt: Checkpoint, config: ExperimentConfig, path: Path) -> None:
    """Ensure the stored weights have the names and shapes of the model the configuration describes."""
    reference = build_model(config.model, config.generator, seed=config.train.seed).state_dict()
    expected = {name: tuple(tensor.shape) for name, tensor in reference.items()}
    actual = {name: tuple(tensor.shape) for name, tensor in ckpt.model_weights.items()}
    if expected != actual:
        differing = sorted(name for name in expected.keys() | actual.keys() if expected.get(name) != actual.get(name))
        msg = f"Checkpoint `{path}` weights do not fit its architecture: {', '.join(differing[:5])}"
        raise IncompatibleCheckpoint(msg)
