"""Optimisation, evaluation, cross-validation, and checkpoint files.

Training follows a fixed recipe: Adam with bias correction, a milestone
learning-rate schedule, the soft overlap loss, and patient-level folds.  A
non-finite loss aborts the run with the name of the first block that
produced a non-finite value, so exploding runs fail loudly and early.

Checkpoints are a small self-describing binary format (see
:func:`save_checkpoint`): magic and version, length-prefixed key=value
metadata including a full configuration echo, then one named section of raw
little-endian float32 per parameter.  Loading is strict; any truncation,
unknown magic, or shape drift fails with :class:`CheckpointError`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Manifest, kfold_split, load_pair
from .errors import (CheckpointError, ConfigError, NumericalError, UsageError,
                     ValidationError)
from .metrics import all_metrics, confusion, dice_loss
from .model import ModelConfig, SegModel
from .tensor import Tensor, active_record, no_record

__all__ = [
    "TrainConfig", "lr_at", "Adam",
    "EpochStats", "FitResult", "fit", "evaluate", "load_dataset",
    "FoldResult", "CVReport", "cross_validate",
    "save_checkpoint", "load_checkpoint", "restore_model", "load_model",
    "Checkpoint", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"MSFCKPT1"
CHECKPOINT_VERSION = 1
METRIC_NAMES = ("dice", "iou", "sensitivity_paper", "recall", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 100
    lr_milestones: tuple = (25, 180)
    lr_decay_factor: float = 0.1
    folds: int = 4
    seed: int = 0
    threads: int = 0  # 0 leaves BLAS threading untouched; applied by the CLI

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got "
                              f"{self.lr_decay_factor}")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)) or \
                any(m < 0 for m in self.lr_milestones):
            raise ConfigError("lr_milestones must be strictly increasing and "
                              f"non-negative, got {self.lr_milestones}")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.threads < 0:
            raise ConfigError("threads must be non-negative")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Stepped schedule: the base rate decays by the configured factor at
    each milestone epoch (inclusive)."""
    passed = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.learning_rate * config.lr_decay_factor ** passed


class Adam:
    """Adam with bias correction over a fixed, ordered parameter list."""

    def __init__(self, named_params: Sequence[tuple], *, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = [(name, p) for name, p in named_params]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self, lr: float) -> None:
        missing = [name for name, p in self.named if p.grad is None]
        if missing:
            raise UsageError(f"optimizer step without gradients for {missing[:3]}")
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps))
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for name, _ in self.named:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out


# -- datasets ------------------------------------------------------------------------


def load_dataset(manifest: Manifest, indices: Optional[Sequence[int]] = None,
                 size: Optional[int] = None) -> list:
    """Materialise (image, mask) arrays for the given manifest rows."""
    rows = range(len(manifest.records)) if indices is None else indices
    return [load_pair(manifest.records[i], size=size) for i in rows]


def _batches(count: int, batch_size: int, order: Optional[np.ndarray] = None):
    index = np.arange(count) if order is None else order
    for start in range(0, count, batch_size):
        yield index[start:start + batch_size]


# -- evaluation ----------------------------------------------------------------------


def evaluate(model: SegModel, dataset: Sequence, batch_size: int = 32,
             threshold: float = 0.5) -> dict:
    """Per-sample metrics averaged over the dataset (forward only)."""
    if not dataset:
        raise ValidationError("evaluate needs at least one sample")
    was_training = model.training
    model.eval()
    sums = {name: 0.0 for name in METRIC_NAMES}
    try:
        with no_record():
            for batch in _batches(len(dataset), batch_size):
                x = Tensor(np.stack([dataset[i][0] for i in batch])
                           .astype(model.dtype, copy=False))
                pred = model.forward(x).data
                for row, i in enumerate(batch):
                    counts = confusion(pred[row], dataset[i][1], threshold)
                    for name, value in all_metrics(counts).items():
                        sums[name] += value
    finally:
        model.train(was_training)
    return {name: sums[name] / len(dataset) for name in METRIC_NAMES}


# -- fitting -------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val: dict = field(default_factory=dict)


@dataclass
class FitResult:
    history: list
    best_epoch: int = -1
    best_val_dice: float = float("nan")

    @property
    def final_train_loss(self) -> float:
        return self.history[-1].train_loss if self.history else float("nan")


def fit(model: SegModel, train_set: Sequence, val_set: Sequence,
        config: TrainConfig, *, checkpoint_path=None,
        log: Optional[Callable[[str], None]] = None,
        step_callback: Optional[Callable] = None) -> FitResult:
    """Optimise ``model`` on ``train_set`` for ``config.epochs`` epochs.

    Shuffling, and therefore the whole run, is a pure function of
    ``config.seed`` and the initial parameters.  When ``checkpoint_path`` is
    given, the epoch with the best validation dice is saved there.  A
    non-finite loss raises :class:`NumericalError` naming the first block
    that went non-finite.
    """
    config.validate()
    if not train_set:
        raise ValidationError("fit needs a non-empty training set")
    optimizer = Adam(list(model.named_parameters()))
    rng = np.random.default_rng(config.seed)
    result = FitResult(history=[])
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        model.train()
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for batch in _batches(len(train_set), config.batch_size, order):
            x = Tensor(np.stack([train_set[i][0] for i in batch])
                       .astype(model.dtype, copy=False))
            y = Tensor(np.stack([train_set[i][1] for i in batch])
                       .astype(model.dtype, copy=False))
            active_record().reset()
            loss = dice_loss(model.forward(x), y)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                block = model.first_nonfinite_layer(x) or "loss"
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {step}; first "
                    f"non-finite block: {block}")
            loss.backward()
            optimizer.step(lr)
            optimizer.zero_grad()
            loss_sum += loss_value * len(batch)
            step += 1
            if step_callback is not None:
                step_callback(step, loss_value)
        stats = EpochStats(epoch=epoch, lr=lr,
                           train_loss=loss_sum / len(train_set))
        if val_set:
            stats.val = evaluate(model, val_set, config.batch_size)
            dice = stats.val["dice"]
            if not result.history or dice > result.best_val_dice:
                result.best_epoch = epoch
                result.best_val_dice = dice
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, optimizer=optimizer,
                                    epoch=epoch, rng=rng)
        result.history.append(stats)
        if log is not None:
            val_text = " ".join(f"val_{k}={v:.4f}" for k, v in stats.val.items())
            log(f"epoch={epoch} lr={lr:.2e} train_loss={stats.train_loss:.4f} "
                f"{val_text}".rstrip())
    return result


# -- cross-validation ----------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    train_count: int
    val_count: int
    val_patients: list
    best_epoch: int
    metrics: dict


@dataclass
class CVReport:
    folds: list
    aggregate: dict  # metric -> (mean, std)

    def render(self) -> str:
        lines = []
        for f in self.folds:
            metric_text = " ".join(f"{k}={v:.4f}" for k, v in f.metrics.items())
            lines.append(f"fold={f.fold} train_count={f.train_count} "
                         f"val_count={f.val_count} "
                         f"val_patients={','.join(f.val_patients)} {metric_text}")
        for name, (mean, std) in self.aggregate.items():
            lines.append(f"aggregate.{name}={mean:.4f}+/-{std:.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "folds": [
                {
                    "fold": f.fold,
                    "train_count": f.train_count,
                    "val_count": f.val_count,
                    "val_patients": list(f.val_patients),
                    "best_epoch": f.best_epoch,
                    "metrics": dict(f.metrics),
                }
                for f in self.folds
            ],
            "aggregate": {name: {"mean": mean, "std": std}
                          for name, (mean, std) in self.aggregate.items()},
        }


def cross_validate(manifest: Manifest, model_config: ModelConfig,
                   train_config: TrainConfig, *, out_dir=None,
                   dtype=np.float32,
                   log: Optional[Callable[[str], None]] = None) -> CVReport:
    """Patient-level k-fold protocol: fold ``i`` trains a fresh model seeded
    ``train_config.seed + i`` on the fold's training patients and reports
    final-model metrics on its validation patients."""
    model_config.validate()
    train_config.validate()
    folds = kfold_split(manifest, train_config.folds, train_config.seed)
    results = []
    for i, (train_idx, val_idx) in enumerate(folds):
        model = SegModel(model_config, seed=train_config.seed + i, dtype=dtype)
        train_set = load_dataset(manifest, train_idx, size=model_config.input_size)
        val_set = load_dataset(manifest, val_idx, size=model_config.input_size)
        checkpoint = Path(out_dir) / f"fold{i}.ckpt" if out_dir is not None else None
        try:
            outcome = fit(model, train_set, val_set, train_config,
                          checkpoint_path=checkpoint,
                          log=(lambda msg, i=i: log(f"fold={i} {msg}")) if log else None)
        except Exception as exc:
            exc.args = (f"fold {i}: {exc}",) + exc.args[1:]
            raise
        val_patients = sorted({manifest.records[j].patient_id for j in val_idx})
        results.append(FoldResult(
            fold=i, train_count=len(train_idx), val_count=len(val_idx),
            val_patients=val_patients, best_epoch=outcome.best_epoch,
            metrics=evaluate(model, val_set, train_config.batch_size)))
    aggregate = {}
    for name in METRIC_NAMES:
        values = np.array([f.metrics[name] for f in results])
        aggregate[name] = (float(values.mean()), float(values.std()))
    return CVReport(folds=results, aggregate=aggregate)


# -- checkpoints ---------------------------------------------------------------------


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict

    @property
    def config(self) -> ModelConfig:
        prefix = "config."
        values = {k[len(prefix):]: v for k, v in self.meta.items()
                  if k.startswith(prefix)}
        return ModelConfig.from_dict(values)

    def params(self) -> dict:
        prefix = "param/"
        return {k[len(prefix):]: v for k, v in self.arrays.items()
                if k.startswith(prefix)}


def save_checkpoint(path, model: SegModel, *, optimizer: Optional[Adam] = None,
                    epoch: int = 0, rng: Optional[np.random.Generator] = None,
                    extra_meta: Optional[dict] = None) -> None:
    """Write the model (and optionally optimizer) state; float32 models only."""
    if model.dtype != np.float32:
        raise UsageError("checkpoints store float32; build the model with "
                         f"dtype=float32, not {model.dtype}")
    meta = {"format_version": str(CHECKPOINT_VERSION), "epoch": str(int(epoch))}
    for key, value in model.config.to_dict().items():
        meta[f"config.{key}"] = value
    if optimizer is not None:
        meta["adam_t"] = str(optimizer.t)
        meta["adam_beta1"] = repr(optimizer.beta1)
        meta["adam_beta2"] = repr(optimizer.beta2)
        meta["adam_eps"] = repr(optimizer.eps)
    if rng is not None:
        meta["rng_state"] = json.dumps(rng.bit_generator.state, sort_keys=True)
    if extra_meta:
        meta.update({str(k): str(v) for k, v in extra_meta.items()})

    sections = [(f"param/{name}", p.data) for name, p in model.named_parameters()]
    if optimizer is not None:
        sections += sorted(optimizer.state_arrays().items())

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        for key in sorted(meta):
            for text in (key, meta[key]):
                blob = text.encode("utf-8")
                fh.write(struct.pack("<I", len(blob)))
                fh.write(blob)
        fh.write(struct.pack("<I", len(sections)))
        for name, array in sections:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint strictly; any structural damage raises
    :class:`CheckpointError`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError(f"{path}: truncated at byte {offset} "
                                  f"(wanted {n} more)")
        part = view[offset:offset + n]
        offset += n
        return part

    def take_u32() -> int:
        return struct.unpack("<I", take(4))[0]

    def take_text() -> str:
        length = take_u32()
        if length > len(view):
            raise CheckpointError(f"{path}: implausible string length {length}")
        try:
            return bytes(take(length)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: undecodable string") from exc

    if len(view) < len(CHECKPOINT_MAGIC) or \
            bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    meta = {}
    for _ in range(take_u32()):
        key = take_text()
        meta[key] = take_text()
    if meta.get("format_version") != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{meta.get('format_version')!r}")
    arrays = {}
    for _ in range(take_u32()):
        name = take_text()
        rank = take_u32()
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        arrays[name] = data.astype(np.float32)
    if offset != len(view):
        raise CheckpointError(f"{path}: {len(view) - offset} trailing bytes")
    return Checkpoint(meta=meta, arrays=arrays)


def restore_model(model: SegModel, checkpoint: Checkpoint) -> None:
    """Copy parameters into ``model`` after an exact configuration echo check."""
    echo = {f"config.{k}": v for k, v in model.config.to_dict().items()}
    for key, value in echo.items():
        stored = checkpoint.meta.get(key)
        if stored != value:
            raise ConfigError(f"checkpoint configuration mismatch on {key}: "
                              f"stored {stored!r}, model {value!r}")
    params = checkpoint.params()
    model_names = [name for name, _ in model.named_parameters()]
    missing = sorted(set(model_names) - set(params))
    surplus = sorted(set(params) - set(model_names))
    if missing or surplus:
        raise CheckpointError(f"parameter sets differ; missing {missing[:3]}, "
                              f"surplus {surplus[:3]}")
    for name, p in model.named_parameters():
        stored = params[name]
        if stored.shape != p.data.shape:
            raise CheckpointError(f"{name}: stored shape {stored.shape} differs "
                                  f"from model shape {p.data.shape}")
        p.data = np.ascontiguousarray(stored, dtype=p.data.dtype)


def load_model(path) -> tuple:
    """Build the model a checkpoint describes and restore its parameters."""
    checkpoint = load_checkpoint(path)
    model = SegModel(checkpoint.config, seed=0)
    restore_model(model, checkpoint)
    model.eval()
    return model, checkpoint
