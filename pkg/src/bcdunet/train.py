"""Loss, optimizers, and the training loop with patience-based early stopping."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SampleSet
from .model import Model
from .tensor import Tensor, UsageError, clip, hadamard, log, no_grad


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names the epoch and batch."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4  # improvements at or below this do not reset patience
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise UsageError("patience, batch_size and max_epochs must all be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise UsageError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    wall_time_s: float = 0.0

    def to_text(self) -> str:
        """Line-delimited records: epoch train_loss train_acc val_loss val_acc."""
        return "".join(
            f"{r.epoch} {r.train_loss!r} {r.train_acc!r} {r.val_loss!r} {r.val_acc!r}\n"
            for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())


BCE_CLAMP = 1e-7


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean pixel-wise binary cross-entropy with predictions clamped to
    [1e-7, 1-1e-7]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.data.shape:
        raise UsageError(f"target shape {t.shape} does not match prediction {pred.data.shape}")
    if not np.isin(t, (0, 1)).all():
        raise UsageError("bce target must be binary (0/1)")
    t = t.astype(pred.data.dtype)
    p = clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(hadamard(t, log(p)) + hadamard(1.0 - t, log(1.0 - p))).mean()


def pixel_accuracy(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    return float(((pred >= threshold) == (target >= 0.5)).mean())


class SGD:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {name} has no gradient; run backward first")
            p.data = p.data - self.lr * p.grad

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


class Adam:
    """Bias-corrected first/second moment update."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise UsageError(f"parameter {name} has no gradient; run backward first")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def make_optimizer(params: list[tuple[str, Tensor]], config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate)
    return Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)


class EarlyStopper:
    """Stop when the monitored loss has not improved by more than
    ``min_delta`` for ``patience`` consecutive observations."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.stale = 0

    def observe(self, value: float) -> None:
        if value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_arrays()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    model.load_state_arrays(snap)


def evaluate(model: Model, dataset: SampleSet, batch_size: int) -> tuple[float, float]:
    """Mean loss and pixel accuracy over a set, in infer mode, no graph."""
    total_loss = 0.0
    correct = 0
    n_pixels = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            xb = dataset.images[start:start + batch_size]
            yb = dataset.masks[start:start + batch_size]
            pred = model.forward(Tensor(xb), mode="infer")
            loss = bce_loss(pred, yb)
            total_loss += float(loss.data) * xb.shape[0]
            correct += int(((pred.data >= 0.5) == (yb >= 0.5)).sum())
            n_pixels += yb.size
    return total_loss / len(dataset), correct / n_pixels


def predict(model: Model, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Probability maps for a stack of images, infer mode, no graph."""
    outs = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(model.forward(Tensor(images[start:start + batch_size]), "infer").data)
    return np.concatenate(outs)


def fit(model: Model, train_set: SampleSet, val_set: SampleSet, config: TrainConfig,
        epoch_end=None) -> TrainLog:
    """Train with shuffled mini-batches until early stopping or max_epochs.

    Validation loss is evaluated at each epoch end; the parameters from the
    best-validation epoch are restored into the model before returning.
    ``epoch_end(epoch, model, record)`` may return True to stop early.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise UsageError("training and validation sets must be non-empty")
    if train_set.ids and val_set.ids:
        shared = set(train_set.ids) & set(val_set.ids)
        if shared:
            raise UsageError(f"validation overlaps training set: {sorted(shared)[:3]}")

    shuffle_rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model.named_params(), config)
    stopper = EarlyStopper(config.patience, config.min_delta)
    log_ = TrainLog()
    best_snap = None
    t0 = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        loss_sum = 0.0
        correct = 0
        n_pixels = 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = train_set.images[idx]
            yb = train_set.masks[idx]
            pred = model.forward(Tensor(xb), mode="train")
            loss = bce_loss(pred, yb)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            loss_sum += lval * len(idx)
            correct += int(((pred.data >= 0.5) == (yb >= 0.5)).sum())
            n_pixels += yb.size
            opt.zero_grad()
            loss.backward()
            opt.step()

        val_loss, val_acc = evaluate(model, val_set, config.batch_size)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / len(train_set),
                             train_acc=correct / n_pixels, val_loss=val_loss, val_acc=val_acc)
        log_.records.append(record)
        log_.stopped_epoch = epoch

        if val_loss < log_.best_val_loss:
            log_.best_val_loss = val_loss
            log_.best_epoch = epoch
            best_snap = _snapshot(model)

        stop_requested = epoch_end is not None and bool(epoch_end(epoch, model, record))
        stopper.observe(val_loss)
        if stop_requested or stopper.should_stop:
            break

    if best_snap is not None:
        _restore(model, best_snap)
    log_.wall_time_s = time.perf_counter() - t0
    return log_
