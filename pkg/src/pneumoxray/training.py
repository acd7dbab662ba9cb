"""Training loop with plateau LR scheduling, early stopping and checkpoints.

The two controllers are pure state machines over a monitored value (always
the validation loss here) so they are testable with synthetic streams:

- :class:`PlateauScheduler` halves every learning rate after `patience`
  consecutive non-improving epochs, clamped at `min_lr`,
- :class:`EarlyStopper` raises its `stopped` flag once `patience` consecutive
  non-improving epochs follow the best epoch.

Both treat "improved" as monitor < best - 1e-6; the absolute threshold keeps
float noise from resetting the counters. The checkpoint written to
``checkpoints/best.pt`` always corresponds to the minimum validation loss.

Run directory layout:
    <run_dir>/history.csv      one row per epoch
    <run_dir>/checkpoints/best.pt (+ best.json descriptor)
    <run_dir>/stop.json        {reason, best_epoch, best_val_loss, epochs}
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
from torch import nn
from torch.utils.data import DataLoader

from .data import (
    AugmentPolicy,
    PreprocessConfig,
    SplitManifest,
    SplitName,
    XrayDataset,
    make_datasets,
)
from .errors import TrainingDivergedError, TrainingError
from .models import ModelHandle, save_checkpoint

logger = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults mirror the benchmark setup."""

    batch_size: int = 32
    max_epochs: int = 50
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_lr: float = 1e-7
    early_stop_patience: int = 10
    seed: int = 42
    num_workers: int = 0

    def __post_init__(self) -> None:
        if self.batch_size <= 0:
            raise TrainingError(f"batch_size must be positive: {self.batch_size}")
        if self.max_epochs <= 0:
            raise TrainingError(f"max_epochs must be positive: {self.max_epochs}")
        if self.plateau_patience <= 0 or self.early_stop_patience <= 0:
            raise TrainingError("patience values must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise TrainingError(f"plateau_factor must lie in (0, 1): {self.plateau_factor}")
        if self.min_lr <= 0:
            raise TrainingError(f"min_lr must be positive: {self.min_lr}")

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "plateau_patience": self.plateau_patience,
            "plateau_factor": self.plateau_factor,
            "min_lr": self.min_lr,
            "early_stop_patience": self.early_stop_patience,
            "seed": self.seed,
            "num_workers": self.num_workers,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "adam_betas" in data:
            data["adam_betas"] = tuple(data["adam_betas"])
        return cls(**data)


def _check_monitor(monitor: float) -> None:
    if not math.isfinite(monitor):
        raise TrainingError(f"monitored value must be finite, got {monitor}")


class PlateauScheduler:
    """Multiplicative LR decay driven by a stagnating monitor.

    step() consumes one epoch's monitor value and the current per-group rates
    and returns the rates for the next epoch. The reduction fires on the
    epoch where the stagnation counter reaches `patience`, after which the
    counter restarts from zero.
    """

    def __init__(
        self,
        patience: int = 5,
        factor: float = 0.5,
        min_lr: float = 1e-7,
        threshold: float = IMPROVEMENT_THRESHOLD,
    ) -> None:
        if patience <= 0:
            raise TrainingError(f"patience must be positive: {patience}")
        if not 0.0 < factor < 1.0:
            raise TrainingError(f"factor must lie in (0, 1): {factor}")
        if min_lr <= 0:
            raise TrainingError(f"min_lr must be positive: {min_lr}")
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.threshold = threshold
        self.best: Optional[float] = None
        self.epochs_since_improve = 0
        self.reductions = 0

    def step(self, monitor: float, lrs: Sequence[float]) -> list[float]:
        _check_monitor(monitor)
        if self.best is None or monitor < self.best - self.threshold:
            self.best = monitor
            self.epochs_since_improve = 0
            return list(lrs)
        self.epochs_since_improve += 1
        if self.epochs_since_improve >= self.patience:
            self.epochs_since_improve = 0
            self.reductions += 1
            return [max(lr * self.factor, self.min_lr) for lr in lrs]
        return list(lrs)


class EarlyStopper:
    """Stop flag raised after `patience` non-improving epochs past the best."""

    def __init__(
        self, patience: int = 10, threshold: float = IMPROVEMENT_THRESHOLD
    ) -> None:
        if patience <= 0:
            raise TrainingError(f"patience must be positive: {patience}")
        self.patience = patience
        self.threshold = threshold
        self.best: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.epochs_since_improve = 0
        self.stopped = False

    def step(self, monitor: float, epoch: int) -> bool:
        """Record one epoch; returns True when the monitor improved."""
        _check_monitor(monitor)
        if self.stopped:
            raise TrainingError("early stopper already fired; build a new one")
        if self.best is None or monitor < self.best - self.threshold:
            self.best = monitor
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            return True
        self.epochs_since_improve += 1
        if self.epochs_since_improve >= self.patience:
            self.stopped = True
        return False


class StopReason(str, Enum):
    EARLY_STOP = "early_stop"
    MAX_EPOCHS = "max_epochs"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lrs: dict[str, float]
    wall_seconds: float


@dataclass(frozen=True)
class TrainResult:
    history: list[EpochRecord]
    best_checkpoint: Path
    stop_reason: StopReason
    best_epoch: int
    best_val_loss: float


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed * 100003 + epoch)
    return gen


def _run_val_pass(
    handle: ModelHandle, loader: DataLoader, criterion: nn.Module
) -> tuple[float, float]:
    handle.eval()
    loss_sum = 0.0
    correct = 0
    total = 0
    with torch.no_grad():
        for images, labels, _ in loader:
            logits = handle(images)
            loss = criterion(logits, labels)
            loss_sum += loss.item() * labels.numel()
            correct += (logits.argmax(dim=1) == labels).sum().item()
            total += labels.numel()
    return loss_sum / total, correct / total


def _dump_diagnostics(
    run_dir: Path, epoch: int, batch_index: int, loss_value: float, lrs: dict[str, float]
) -> Path:
    path = run_dir / "diagnostics.json"
    with open(path, "w") as fh:
        json.dump(
            {
                "epoch": epoch,
                "batch_index": batch_index,
                "loss": repr(loss_value),
                "lrs": lrs,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    return path


def train(
    handle: ModelHandle,
    manifest: SplitManifest,
    cfg: TrainConfig,
    data_root: Union[str, Path],
    run_dir: Union[str, Path],
    preprocess: Optional[PreprocessConfig] = None,
    augment: Optional[AugmentPolicy] = None,
) -> TrainResult:
    """Optimize until early stop or max_epochs; persist history and best weights.

    Each epoch runs a shuffled, augmented TRAIN pass then a fixed-order,
    augmentation-free VAL pass. Both controllers and checkpointing monitor
    the validation loss. Deterministic for a fixed cfg.seed on one backend.
    """
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    datasets = make_datasets(manifest, data_root, preprocess, augment, seed=cfg.seed)
    train_ds = datasets[SplitName.TRAIN]
    val_ds = datasets[SplitName.VAL]
    if len(train_ds) == 0:
        raise TrainingError("TRAIN split is empty")
    if len(val_ds) == 0:
        raise TrainingError("VAL split is empty; the monitored loss is undefined")

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(
        handle.optimizer_groups(), betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    scheduler = PlateauScheduler(
        patience=cfg.plateau_patience, factor=cfg.plateau_factor, min_lr=cfg.min_lr
    )
    stopper = EarlyStopper(patience=cfg.early_stop_patience)
    criterion = nn.CrossEntropyLoss()

    val_loader = DataLoader(
        val_ds, batch_size=cfg.batch_size, shuffle=False, num_workers=cfg.num_workers
    )
    best_ckpt = run_dir / "checkpoints" / "best.pt"
    history: list[EpochRecord] = []
    stop_reason = StopReason.MAX_EPOCHS

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.monotonic()
        train_ds.set_epoch(epoch)
        loader = DataLoader(
            train_ds,
            batch_size=cfg.batch_size,
            shuffle=True,
            generator=_epoch_generator(cfg.seed, epoch),
            num_workers=cfg.num_workers,
        )
        lrs = {g["name"]: g["lr"] for g in optimizer.param_groups}

        handle.train()
        loss_sum = 0.0
        correct = 0
        total = 0
        for batch_index, (images, labels, _) in enumerate(loader):
            optimizer.zero_grad()
            logits = handle(images)
            loss = criterion(logits, labels)
            if not torch.isfinite(loss):
                path = _dump_diagnostics(run_dir, epoch, batch_index, loss.item(), lrs)
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch "
                    f"{batch_index}; diagnostics in {path}"
                )
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * labels.numel()
            correct += (logits.argmax(dim=1) == labels).sum().item()
            total += labels.numel()
        train_loss = loss_sum / total
        train_acc = correct / total

        val_loss, val_acc = _run_val_pass(handle, val_loader, criterion)
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                train_acc=train_acc,
                val_loss=val_loss,
                val_acc=val_acc,
                lrs=lrs,
                wall_seconds=time.monotonic() - start,
            )
        )
        logger.info(
            "epoch %d: train_loss %.4f acc %.4f | val_loss %.4f acc %.4f",
            epoch, train_loss, train_acc, val_loss, val_acc,
        )

        if stopper.step(val_loss, epoch):
            save_checkpoint(handle, best_ckpt)
        new_lrs = scheduler.step(val_loss, [g["lr"] for g in optimizer.param_groups])
        for group, lr in zip(optimizer.param_groups, new_lrs):
            group["lr"] = lr
        if stopper.stopped:
            stop_reason = StopReason.EARLY_STOP
            break

    assert stopper.best_epoch is not None and stopper.best is not None
    result = TrainResult(
        history=history,
        best_checkpoint=best_ckpt,
        stop_reason=stop_reason,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
    )
    write_history(history, run_dir / "history.csv")
    with open(run_dir / "stop.json", "w") as fh:
        json.dump(
            {
                "reason": stop_reason.value,
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "epochs": len(history),
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    return result


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    if not history:
        raise TrainingError("refusing to write an empty history")
    lr_names = list(history[0].lrs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
            + [f"lr_{name}" for name in lr_names]
            + ["wall_seconds"]
        )
        for rec in history:
            writer.writerow(
                [rec.epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc]
                + [rec.lrs[name] for name in lr_names]
                + [rec.wall_seconds]
            )


def predict(
    handle: ModelHandle,
    dataset: XrayDataset,
    batch_size: int = 32,
    num_workers: int = 0,
) -> tuple[list[str], list[int], list[float]]:
    """Positive-class probabilities for one split, in dataset order.

    Returns (ids, true label indices, softmax probability of PNEUMONIA).
    """
    if len(dataset) == 0:
        raise TrainingError(f"split {dataset.split.value} is empty")
    if dataset.augmented:
        raise TrainingError("predict requires an augmentation-free dataset")
    loader = DataLoader(
        dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers
    )
    handle.eval()
    ids: list[str] = []
    y_true: list[int] = []
    y_prob: list[float] = []
    with torch.no_grad():
        for images, labels, rec_ids in loader:
            probs = torch.softmax(handle(images), dim=1)[:, 1]
            ids.extend(rec_ids)
            y_true.extend(int(v) for v in labels)
            y_prob.extend(float(v) for v in probs)
    return ids, y_true, y_prob
