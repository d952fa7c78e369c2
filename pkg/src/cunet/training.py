"""Train conditioned and dedicated U-Nets.

Instances are sampled from the training tracks, one task at a time in strict round-robin order for a conditioned
model. An epoch is a fixed number of sampled instances. After each epoch the loss on a fixed set of validation
instances decides whether the model improved; the best model is kept and training stops once it has not improved
for `patience` epochs.
"""

from collections.abc import Iterator, Sequence
import dataclasses
import math
from pathlib import Path

import numpy as np
import torch

from cunet.checkpoint import Checkpoint, save_checkpoint
from cunet.config import ExperimentConfig
from cunet.dataset import (
    DatasetManifest,
    DatasetSplit,
    StemDataset,
    TrainingInstance,
    progressive_weight,
    sample_instance,
    split_dataset,
)
from cunet.exceptions import ConfigError, TrainingError
from cunet.logger import LOG, MARKUP, progress_bar
from cunet.model import ConditionedUNet, Mode, build_model, loss

# The validation instances are drawn with their own seed so that they do not depend on the training draws
VALIDATION_SEED_OFFSET = 7919


class TaskScheduler:
    """Yield task indices in strict round-robin order."""

    def __init__(self, task_indices: Sequence[int]) -> None:  # noqa: D107
        if not task_indices:
            msg = "At least one task is needed"
            raise ConfigError(msg)
        self.task_indices = tuple(task_indices)
        self._position = 0

    def __iter__(self) -> Iterator[int]:  # noqa: D105
        return self

    def __next__(self) -> int:
        """Get the next task index, wrapping around after the last one."""
        task_index = self.task_indices[self._position % len(self.task_indices)]
        self._position += 1
        return task_index


class EarlyStopping:
    """Track the best validation loss and the number of epochs since it last improved."""

    def __init__(self, patience: int) -> None:  # noqa: D107
        if patience < 1:
            msg = f"patience must be at least 1, got {patience}"
            raise ConfigError(msg)
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: int | None = None
        self.epochs_without_improvement = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record the validation loss of an epoch and return whether it is a new best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.epochs_without_improvement = 0
            return True
        self.epochs_without_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        """Predicate for whether `patience` epochs went by without improvement."""
        return self.epochs_without_improvement >= self.patience


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    """Losses of one epoch. `val_loss` is `None` when there is no validation set."""

    epoch: int
    train_loss: float
    val_loss: float | None
    improved: bool


@dataclasses.dataclass(frozen=True)
class Batch:
    """Stacked instances, ready for the network."""

    X: torch.Tensor
    Y: torch.Tensor
    z: torch.Tensor
    task_indices: tuple[int, ...]


def collate(instances: Sequence[TrainingInstance], dtype: torch.dtype = torch.float32) -> Batch:
    """Stack instances into tensors shaped `(N, frequency, frames)` and `(N, n_tasks)`."""
    return Batch(
        X=torch.as_tensor(np.stack([instance.X.values for instance in instances]), dtype=dtype),
        Y=torch.as_tensor(np.stack([instance.Y.values for instance in instances]), dtype=dtype),
        z=torch.as_tensor(np.stack([instance.z.as_array() for instance in instances]), dtype=dtype),
        task_indices=tuple(instance.task_index for instance in instances),
    )


class Trainer:
    """Own the model, the optimizer, and the sampling state of one training run."""

    def __init__(self, config: ExperimentConfig, dataset: StemDataset, split: DatasetSplit) -> None:  # noqa: D107
        config.validate()
        self.config = config
        self.dataset = dataset
        self.split = split
        train = config.train

        # Dropout masks come from the global torch generator
        torch.manual_seed(train.seed)
        self.model = build_model(config.model, config.generator, seed=train.seed)
        self.conditioned = isinstance(self.model, ConditionedUNet)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=train.learning_rate,
            betas=train.betas,
            eps=train.eps,
        )
        self.rng = np.random.default_rng(train.seed)
        self.task_indices = tuple(config.tasks.index(task) for task in config.trained_tasks)
        self.scheduler = TaskScheduler(self.task_indices)
        self.progressive = train.progressive and self.conditioned
        self.instance_counter = 0
        self.step = 0
        self.history: list[EpochRecord] = []
        self._val_batches: list[Batch] | None = None

    def next_batch(self) -> Batch:
        """Sample the next training batch, applying progressive weighting when it is on."""
        instances = []
        for _ in range(self.config.train.batch_size):
            instance = sample_instance(self.dataset, self.split.train_tracks, next(self.scheduler), self.rng)
            self.instance_counter += 1
            if self.progressive:
                z, Y = progressive_weight(
                    instance.z,
                    instance.Y,
                    self.instance_counter,
                    self.rng,
                    self.config.train.progressive_period,
                )
                instance = dataclasses.replace(instance, z=z, Y=Y)
            instances.append(instance)
        return collate(instances)

    def _batch_loss(self, batch: Batch, mode: Mode) -> torch.Tensor:
        z = batch.z if self.conditioned else None
        return loss(self.model, batch.X, batch.Y, z, mode, self.config.train.loss_reduction)

    def train_step(self) -> float:
        """Run one optimization step on a freshly sampled batch and return its loss."""
        batch = self.next_batch()
        self.optimizer.zero_grad()
        value = self._batch_loss(batch, Mode.TRAIN)
        if not torch.isfinite(value):
            tasks = ", ".join(self.config.tasks[index] for index in batch.task_indices)
            msg = f"Training loss is {value.item()} at step {self.step + 1} (batch tasks: {tasks})"
            raise TrainingError(msg)
        value.backward()
        self.optimizer.step()
        self.step += 1
        LOG.trace("Step %d: loss %.6g", self.step, value.item())
        return value.item()

    def validation_batches(self) -> list[Batch]:
        """Get the fixed validation batches, sampling them on first use."""
        if self._val_batches is None:
            self._val_batches = []
            train = self.config.train
            if self.split.val_tracks and train.val_instances:
                rng = np.random.default_rng(train.seed + VALIDATION_SEED_OFFSET)
                scheduler = TaskScheduler(self.task_indices)
                instances = [
                    sample_instance(self.dataset, self.split.val_tracks, next(scheduler), rng)
                    for _ in range(train.val_instances)
                ]
                self._val_batches = [
                    collate(instances[start : start + train.batch_size])
                    for start in range(0, len(instances), train.batch_size)
                ]
        return self._val_batches

    def validation_loss(self) -> float | None:
        """Get the mean loss per validation instance in inference mode, or `None` without validation tracks."""
        batches = self.validation_batches()
        if not batches:
            return None
        total = 0.0
        count = 0
        with torch.no_grad():
            for batch in batches:
                total += self._batch_loss(batch, Mode.EVAL).item() * batch.X.shape[0]
                count += batch.X.shape[0]
        return total / count

    def fit(self, checkpoint_path: Path | None = None) -> Checkpoint:
        """Train until early stopping or `max_epochs`, and return the checkpoint of the best epoch.

        Without validation tracks early stopping is off and the last epoch is returned.
        The best checkpoint is also written to `checkpoint_path` each time it improves.
        """
        train = self.config.train
        steps_per_epoch = math.ceil(train.instances_per_epoch / train.batch_size)
        stopper = EarlyStopping(train.patience)
        best: Checkpoint | None = None
        if not self.validation_batches():
            LOG.warning("Training without validation instances: early stopping is disabled")

        with progress_bar() as progress:
            task = progress.add_task("Training", total=train.max_epochs * steps_per_epoch, status="")
            for epoch in range(1, train.max_epochs + 1):
                losses = []
                for _ in range(steps_per_epoch):
                    losses.append(self.train_step())
                    progress.update(task, advance=1, status=f"epoch {epoch} loss {losses[-1]:.4g}")
                train_loss = float(np.mean(losses))
                val_loss = self.validation_loss()
                if val_loss is not None and not math.isfinite(val_loss):
                    msg = f"Validation loss is {val_loss} after epoch {epoch}"
                    raise TrainingError(msg)
                improved = val_loss is None or stopper.update(val_loss, epoch)
                self.history.append(EpochRecord(epoch, train_loss, val_loss, improved))
                LOG.info("Epoch %d: training loss %.5g, validation loss %s", epoch, train_loss, val_loss)
                if improved:
                    best = Checkpoint.capture(self.model, self.optimizer, self.config, epoch, val_loss)
                    if checkpoint_path is not None:
                        save_checkpoint(best, checkpoint_path)
                if val_loss is not None and stopper.should_stop:
                    LOG.info("No improvement for %d epoch(s): stopping after epoch %d", stopper.patience, epoch)
                    break

        LOG.info(
            "Best epoch: [code]%d[/] (validation loss %s)",
            best.epoch,
            best.val_loss,
            extra=MARKUP,
        )
        return best


def train(
    config: ExperimentConfig,
    dataset_root: Path | None = None,
    checkpoint_path: Path | None = None,
) -> Checkpoint:
    """Train the model described by `config` on the dataset at `dataset_root` (or `config.data_root`).

    A conditioned model learns every task of `config.tasks` jointly; a dedicated model learns `config.dedicated_task`.
    """
    root = dataset_root or config.data_root
    if root is None:
        msg = "No dataset root given"
        raise ConfigError(msg)
    manifest = DatasetManifest.load(root)
    split = split_dataset(manifest.train_ids, config.train.n_val, config.train.seed, manifest.test_ids)
    dataset = StemDataset(manifest, config.spectrogram, config.tasks)
    dataset.preload([*split.train_tracks, *split.val_tracks], config.train.loader_workers)
    LOG.info(
        "Training on %d track(s), validating on %d, for task(s): %s",
        len(split.train_tracks),
        len(split.val_tracks),
        ", ".join(config.trained_tasks),
    )
    return Trainer(config, dataset, split).fit(checkpoint_path)
