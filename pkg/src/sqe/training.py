"""Masked multi-task training, validation, and evaluation.

Rows may carry any subset of the six labels. Each task's MSE is averaged
over only the rows where that task's label is present, then the per-task
terms are combined as a weighted sum — so a corpus supervising MOS and a
corpus supervising room acoustics can be mixed freely in one batch.

Targets are trained in scaled space (see task target scaling) and mapped
back to natural units at prediction time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySupervisionError, TrainingDivergedError
from .models import DownstreamModel, PredictionSet, forward_graph, predict
from .tasks import DEFAULT_TARGET_SCALING, TASKS, TaskLabels


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule, and loss settings.

    task_weights of None means weight 1.0 for every configured task; an
    explicit dict weights listed tasks and leaves the rest at 1.0.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    task_weights: dict | None = None
    target_scaling: dict = field(default_factory=lambda: dict(DEFAULT_TARGET_SCALING))

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be >= 1")
        if self.task_weights is not None:
            unknown = set(self.task_weights) - set(TASKS)
            if unknown:
                raise ValueError(f"unknown tasks in weights: {sorted(unknown)}")
            if any(w < 0 for w in self.task_weights.values()):
                raise ValueError("task weights must be >= 0")
            # unlisted tasks default to 1.0, so only a dict zeroing every
            # task leaves nothing to optimize
            if not any(self.weight(t) > 0 for t in TASKS):
                raise ValueError("at least one task weight must be positive")

    def weight(self, task: str) -> float:
        if self.task_weights is None:
            return 1.0
        return float(self.task_weights.get(task, 1.0))

    def scale_target(self, task: str, value: float) -> float:
        shift, scale = self.target_scaling.get(task, (0.0, 1.0))
        return (float(value) - shift) / scale


@dataclass(frozen=True)
class LabeledExample:
    """Features ready for the model plus whatever labels the row carries."""

    features: object
    labels: TaskLabels
    name: str = ""


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    best_so_far: float


def multitask_loss(preds, labels, cfg: TrainConfig) -> float:
    """Reference loss: sum over tasks of weight * masked MSE.

    preds are model-space PredictionSets aligned with labels (natural
    units); labels are scaled before comparison. Order-independent: per-task
    squared errors are combined with exact summation.

    Raises:
        EmptySupervisionError: no task has any present label.
    """
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions vs {len(labels)} label sets")
    if not preds:
        raise ValueError("empty batch")
    tasks = preds[0].tasks
    for ps in preds:
        if ps.tasks != tasks:
            raise ValueError("prediction sets disagree on their task set")

    total = 0.0
    supervised = False
    for task in tasks:
        errors = [
            (ps[task] - cfg.scale_target(task, lab.get(task))) ** 2
            for ps, lab in zip(preds, labels)
            if lab.get(task) is not None
        ]
        if errors:
            supervised = True
            total += cfg.weight(task) * (math.fsum(errors) / len(errors))
    if not supervised:
        raise EmptySupervisionError("every task label is absent in every sample")
    return total


def _batch_loss_graph(model: DownstreamModel, rows, cfg: TrainConfig, training, rng) -> Tensor:
    """Differentiable analogue of multitask_loss over a batch of examples."""
    outs_by_task: dict = {t: [] for t in model.config.tasks}
    targets_by_task: dict = {t: [] for t in model.config.tasks}
    for row in rows:
        _, outs = forward_graph(model, row.features, training=training, rng=rng)
        for task in model.config.tasks:
            value = row.labels.get(task)
            if value is None:
                continue
            outs_by_task[task].append(outs[task])
            targets_by_task[task].append(cfg.scale_target(task, value))

    loss = None
    for task in model.config.tasks:
        outs = outs_by_task[task]
        if not outs:
            continue
        pred = outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
        target = Tensor(np.array(targets_by_task[task], dtype=np.float64).reshape(-1, 1))
        diff = ad.sub(pred, target)
        term = ad.mul(ad.mean(ad.mul(diff, diff)), cfg.weight(task))
        loss = term if loss is None else ad.add(loss, term)
    if loss is None:
        raise EmptySupervisionError("batch carries no labels for any configured task")
    return loss


def dataset_loss(model: DownstreamModel, rows, cfg: TrainConfig) -> float:
    """Whole-set multitask loss with dropout disabled."""
    preds = []
    for row in rows:
        _, outs = forward_graph(model, row.features)
        preds.append(PredictionSet(by_task={t: o.item() for t, o in outs.items()}))
    return multitask_loss(preds, [row.labels for row in rows], cfg)


def _snapshot(params) -> list:
    return [p.values.copy() for p in params]


def _snap_float32(params) -> None:
    # storage convention: parameter values stay exactly float32-representable
    for p in params:
        p.values = p.values.astype(np.float32).astype(np.float64)


def train(model: DownstreamModel, train_rows, val_rows, cfg: TrainConfig):
    """Adam training with per-epoch validation and early stopping.

    Shuffling and dropout are seeded from cfg.seed, so a rerun with the same
    inputs reproduces the history bit for bit. After each epoch the weighted
    validation loss is compared against the best seen; `patience` epochs
    without strict improvement stop training, and the best-validation
    parameters are restored before returning.

    Returns (model, history). The model's own target_scaling is updated to
    cfg.target_scaling so checkpoints carry the units they were trained in.

    Raises:
        TrainingDivergedError: a batch loss went NaN/Inf.
    """
    train_rows = list(train_rows)
    val_rows = list(val_rows)
    if not train_rows:
        raise ValueError("empty train set")
    if not val_rows:
        raise ValueError("empty validation set")
    for row in train_rows:
        if not row.labels.present():
            raise ValueError(f"training row {row.name or '<unnamed>'} has no labels")

    model.target_scaling = dict(cfg.target_scaling)
    params = model.param_list()
    adam = ad.init_adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])

    best_val = math.inf
    best_params = _snapshot(params)
    stale_epochs = 0
    history: list[HistoryRow] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_rows))
        seen = 0
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, len(train_rows), cfg.batch_size)):
            batch = [train_rows[i] for i in order[start : start + cfg.batch_size]]
            for p in params:
                p.zero_grad()
            loss = _batch_loss_graph(model, batch, cfg, training=True, rng=dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, batch_index, value)
            ad.backward(loss)
            ad.adam_step(adam, params)
            _snap_float32(params)
            loss_sum += value * len(batch)
            seen += len(batch)

        train_loss = loss_sum / seen
        val_loss = dataset_loss(model, val_rows, cfg)
        if val_loss < best_val:
            best_val = val_loss
            best_params = _snapshot(params)
            stale_epochs = 0
        else:
            stale_epochs += 1
        history.append(HistoryRow(epoch, train_loss, val_loss, best_val))
        if stale_epochs >= cfg.patience:
            break

    for p, best in zip(params, best_params):
        p.values = best
    return model, history


def evaluate(model: DownstreamModel, rows) -> dict:
    """Aligned (prediction, label) pairs per task, both in natural units.

    Pairs appear only where the row actually carries that task's label; row
    order is preserved. Dropout is off.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("evaluate needs at least one row")
    pairs: dict = {task: [] for task in model.config.tasks}
    for row in rows:
        ps = predict(model, row.features)
        for task in model.config.tasks:
            value = row.labels.get(task)
            if value is not None:
                pairs[task].append((ps[task], float(value)))
    return pairs


def save_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "best_so_far"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss),
                             repr(row.best_so_far)])
