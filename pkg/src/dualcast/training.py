"""Teacher pretraining and teacher-student distillation.

The integration objective is a fixed-weight blend of two mean squared
errors on the student's output: the soft loss against the frozen teacher's
predictions and the hard loss against the ground truth,

    total = alpha * mse(student, teacher) + beta * mse(student, truth)

with alpha + beta = 1. The teacher is pretrained on the hard loss alone,
frozen, and never updated afterwards; its parameters stay bit-identical
through any number of distillation epochs. Model selection during
distillation watches the validation hard loss, since accuracy against the
truth is the quantity being reported.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import ForecastWindow, SpeedDataset, SplitIndices, make_windows
from .errors import ConfigError
from .metrics import MetricTriple, evaluate_model
from .model import DualTransformerModel
from .tensor import NumericsError, Tape, Tensor, add, mse, no_grad, scale
from .tgcn import FrozenTeacher, RoadNetwork, TGCNModel, freeze

DEFAULT_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass
class DistillationConfig:
    alpha: float = 0.2
    beta: float = 0.8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 15
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ConfigError(f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class TrainReport:
    """Per-run record: losses per epoch, the selected epoch, and test metrics.

    ``wall_seconds`` and ``epoch_seconds`` are the only non-deterministic
    fields; determinism checks compare reports with timing stripped.
    """

    tag: str
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    early_stopped: bool
    wall_seconds: float
    epoch_seconds: list[float]
    test_metrics: MetricTriple | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = {
            "tag": self.tag,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "early_stopped": self.early_stopped,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "test_metrics": self.test_metrics.as_dict() if self.test_metrics else None,
        }
        if include_timing:
            doc["timing"] = {"wall_seconds": self.wall_seconds}
        return doc

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_epoch_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for i, (tl, vl, sec) in enumerate(
                zip(self.train_losses, self.val_losses, self.epoch_seconds), start=1
            ):
                writer.writerow([i, repr(tl), repr(vl), repr(sec)])


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for parameter {name}, aborting step")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def total_loss(y_student: Tensor, y_teacher: Tensor, y_true: Tensor, alpha: float, beta: float) -> Tensor:
    """alpha * mse(student, teacher) + beta * mse(student, truth).

    Gradients reach only the student's side; the teacher prediction and the
    ground truth enter as constants.
    """
    if abs(alpha + beta - 1.0) > 1e-12:
        raise ConfigError(f"alpha + beta must equal 1, got {alpha} + {beta}")
    soft = mse(y_student, y_teacher)
    hard = mse(y_student, y_true)
    return add(scale(soft, alpha), scale(hard, beta))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the last short batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _validation_hard_loss(forward: Callable[[np.ndarray], np.ndarray], windows) -> float:
    total = 0.0
    for window in windows:
        pred = forward(window.inputs)
        diff = pred - window.target.T
        total += float(np.mean(diff * diff))
    return total / len(windows)


class _EarlyStopper:
    """Strict-improvement early stopping on the validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one validation value; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def _train_loop(
    tag: str,
    taped_batch_loss: Callable[[Sequence], tuple[Tape, Tensor]],
    val_forward: Callable[[np.ndarray], np.ndarray],
    snapshot: Callable[[], dict[str, np.ndarray]],
    restore: Callable[[dict[str, np.ndarray]], None],
    optimizer: Adam,
    train_windows: Sequence,
    val_windows: Sequence[ForecastWindow],
    config: DistillationConfig,
    val_loss_fn: Callable[[Sequence[ForecastWindow]], float] | None = None,
) -> TrainReport:
    if not train_windows:
        raise ConfigError("no training windows available")
    if not val_windows:
        raise ConfigError("no validation windows available")
    rng = np.random.default_rng(config.seed)
    stopper = _EarlyStopper(config.patience)
    best_state = snapshot()
    train_losses: list[float] = []
    val_losses: list[float] = []
    epoch_seconds: list[float] = []
    started = time.perf_counter()
    early = False
    for epoch in range(1, config.max_epochs + 1):
        tick = time.perf_counter()
        loss_sum = 0.0
        for batch_idx in _batches(len(train_windows), config.batch_size, rng):
            batch = [train_windows[i] for i in batch_idx]
            tape, loss = taped_batch_loss(batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(
                    f"{tag}: non-finite training loss at epoch {epoch}, aborting"
                )
            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()
            loss_sum += value * len(batch)
        train_losses.append(loss_sum / len(train_windows))
        if val_loss_fn is not None:
            val_loss = val_loss_fn(val_windows)
        else:
            val_loss = _validation_hard_loss(val_forward, val_windows)
        val_losses.append(val_loss)
        epoch_seconds.append(time.perf_counter() - tick)
        improved = val_loss < stopper.best
        should_stop = stopper.update(val_loss, epoch)
        if improved:
            best_state = snapshot()
        if should_stop:
            early = True
            break
    restore(best_state)
    return TrainReport(
        tag=tag,
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=stopper.best_epoch,
        early_stopped=early,
        wall_seconds=time.perf_counter() - started,
        epoch_seconds=epoch_seconds,
    )


def pretrain_teacher(
    teacher: TGCNModel,
    network: RoadNetwork,
    dataset: SpeedDataset,
    split: SplitIndices,
    config: DistillationConfig,
    lookback: int = 12,
    horizon: int = 12,
) -> tuple[FrozenTeacher, TrainReport]:
    """Fit the teacher to the ground truth (hard loss only), freeze the best epoch."""
    train_windows = make_windows(dataset, split.train, lookback, horizon)
    val_windows = make_windows(dataset, split.val, lookback, horizon)
    optimizer = Adam(teacher.parameters(), config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def batch_loss(batch):
        # one taped graph per batch: the GRU is row-local, so windows stack
        tape = Tape()
        with tape:
            pred = teacher.forward_batch(network, [w.inputs for w in batch])
            truth = Tensor(np.concatenate([w.target.T for w in batch], axis=0))
            loss = mse(pred, truth)
        return tape, loss

    def val_forward(inputs):
        with no_grad():
            return teacher.forward(network, inputs).data

    def val_loss_batched(windows) -> float:
        n = network.n_nodes
        total = 0.0
        for start in range(0, len(windows), 256):
            chunk = windows[start : start + 256]
            with no_grad():
                pred = teacher.forward_batch(network, [w.inputs for w in chunk]).data
            truth = np.concatenate([w.target.T for w in chunk], axis=0)
            diff = pred - truth
            total += float((diff * diff).mean()) * len(chunk)
        return total / len(windows)

    report = _train_loop(
        "teacher",
        batch_loss,
        val_forward,
        teacher.state_dict,
        teacher.load_state,
        optimizer,
        train_windows,
        val_windows,
        config,
        val_loss_fn=val_loss_batched,
    )
    teacher.trained = True
    frozen = freeze(teacher, network)
    report.test_metrics = evaluate_model(
        frozen.predict, dataset, split.test, lookback, horizon
    )
    return frozen, report


def distill_train(
    student: DualTransformerModel,
    teacher: FrozenTeacher | None,
    dataset: SpeedDataset,
    split: SplitIndices,
    config: DistillationConfig,
) -> TrainReport:
    """Train the student against the blended objective; the teacher never moves.

    With alpha = 0 the teacher is not consulted at all (it may be None), so
    such a run is the no-teacher baseline by construction, not by accident.
    """
    lookback, horizon = student.lookback, student.horizon
    if teacher is None and config.alpha != 0.0:
        raise ConfigError("a frozen teacher is required whenever alpha > 0")
    if teacher is not None:
        if teacher.n_nodes != student.n_nodes:
            raise ConfigError(
                f"teacher covers {teacher.n_nodes} nodes, student covers {student.n_nodes}"
            )
        if teacher.horizon != horizon:
            raise ConfigError(
                f"teacher horizon {teacher.horizon} differs from student horizon {horizon}"
            )
    train_windows = make_windows(dataset, split.train, lookback, horizon)
    val_windows = make_windows(dataset, split.val, lookback, horizon)
    optimizer = Adam(student.parameters(), config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)

    use_teacher = config.alpha > 0.0
    teacher_preds: list[np.ndarray] = []
    if use_teacher:
        # the teacher is frozen, so its prediction per window never changes
        for start in range(0, len(train_windows), 256):
            chunk = train_windows[start : start + 256]
            teacher_preds.extend(teacher.predict_batch([w.inputs for w in chunk]))

    def batch_loss(batch_idx_windows):
        tape = Tape()
        with tape:
            acc = None
            for i, window in batch_idx_windows:
                pred = student.forward(window.inputs)
                truth = Tensor(window.target.T)
                if use_teacher:
                    term = total_loss(pred, Tensor(teacher_preds[i]), truth, config.alpha, config.beta)
                else:
                    term = mse(pred, truth)
                acc = term if acc is None else add(acc, term)
            loss = scale(acc, 1.0 / len(batch_idx_windows))
        return tape, loss

    def val_forward(inputs):
        with no_grad():
            return student.forward(inputs).data

    indexed = list(enumerate(train_windows))

    report = _train_loop(
        "student" if use_teacher else "student-baseline",
        batch_loss,
        val_forward,
        student.state_dict,
        student.load_state,
        optimizer,
        indexed,
        val_windows,
        config,
    )
    report.test_metrics = evaluate_model(val_forward, dataset, split.test, lookback, horizon)
    return report


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    beta: float
    test_mse: float
    normalized_mse: float


def alpha_sweep(
    student_factory: Callable[[], DualTransformerModel],
    teacher: FrozenTeacher,
    dataset: SpeedDataset,
    split: SplitIndices,
    config: DistillationConfig,
    pairs: Sequence[tuple[float, float]] | None = None,
) -> list[SweepRow]:
    """Distill one identically-initialised student per (alpha, beta) pair.

    The returned normalized MSE column divides every test MSE by the largest
    one in the sweep, so the worst pair reads exactly 1.0.
    """
    if pairs is None:
        pairs = [(a, 1.0 - a) for a in DEFAULT_ALPHA_GRID]
    for a, b in pairs:
        if abs(a + b - 1.0) > 1e-12:
            raise ConfigError(f"sweep pair ({a}, {b}) does not satisfy alpha + beta = 1")
    mses: list[float] = []
    for a, b in pairs:
        student = student_factory()
        run_cfg = replace(config, alpha=a, beta=b)
        report = distill_train(student, teacher, dataset, split, run_cfg)
        mses.append(report.test_metrics.mse)
    top = max(mses)
    return [
        SweepRow(alpha=a, beta=b, test_mse=m, normalized_mse=m / top)
        for (a, b), m in zip(pairs, mses)
    ]
