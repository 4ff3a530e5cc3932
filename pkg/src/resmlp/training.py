"""Losses, optimisers, learning-rate schedules and the supervised /
hard-distillation training loop."""
from __future__ import annotations

import csv
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError, NonFiniteError
from .tensor import GradientTape, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- losses

def _check_labels(labels: np.ndarray, k: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise DataError(f"label {bad} out of range [0, {k})")


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0, mask=None) -> Tensor:
    """Mean over rows of -sum(q * log_softmax(logits)), q the smoothed one-hot.

    ``logits`` is [..., K]; ``mask`` (same leading shape as labels) excludes
    rows such as padding from both the sum and the mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError(f"label smoothing must lie in [0, 1), got {smoothing}")
    valid = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    _check_labels(labels[valid], k)
    dt = logits.dtype
    q = np.full(logits.shape, smoothing / k, dtype=dt)
    np.put_along_axis(q, np.where(valid, labels, 0)[..., None], 1.0 - smoothing + smoothing / k, axis=-1)
    q *= valid[..., None]
    n = max(int(valid.sum()), 1)
    lp = T.log_softmax(logits, axis=-1)
    return T.mul(T.reduce(T.mul(lp, T.tensor(q, dtype=dt)), kind="sum"), -1.0 / n)


def hard_distill_loss(student_logits: Tensor, labels, teacher_logits, smoothing: float = 0.0,
                      teacher_weight: float = 0.5) -> Tensor:
    """(1-w)·CE(student, labels) + w·CE(student, argmax teacher), w = 1/2 by default."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {student_logits.shape}")
    pseudo = T.argmax(t, axis=-1)
    ce_true = cross_entropy(student_logits, labels, smoothing)
    ce_teacher = cross_entropy(student_logits, pseudo, smoothing)
    return T.add(T.mul(ce_true, 1.0 - teacher_weight), T.mul(ce_teacher, teacher_weight))


def smoothed_entropy_floor(k: int, smoothing: float) -> float:
    """Lowest achievable cross-entropy against smoothed one-hot targets."""
    s = smoothing
    if s == 0:
        return 0.0
    return -(1 - s + s / k) * math.log(1 - s + s / k) - s * (k - 1) / k * math.log(s / k)


# ---------------------------------------------------------------- optimisers

@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 4e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 128
    schedule: str = "cosine"
    warmup_epochs: float = 5.0
    warmup_steps: int | None = None
    label_smoothing: float = 0.1
    seed: int = 0
    mode: str = "supervised"
    teacher: str | None = None
    distill_weight: float = 0.5
    augment: bool = True
    crop_padding: int = 4
    eval_batch_size: int = 256
    prefetch: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        if self.schedule not in ("cosine", "step", "constant"):
            raise ConfigurationError(f"schedule must be cosine, step or constant, got {self.schedule!r}")
        if self.mode not in ("supervised", "hard_distill"):
            raise ConfigurationError(f"mode must be supervised or hard_distill, got {self.mode!r}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ConfigurationError("distill_weight must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        finite = g[np.isfinite(g)]
        peak = float(np.abs(finite).max()) if finite.size else float("nan")
        raise NonFiniteError(f"non-finite gradient in {name} (max finite |g| = {peak:.3e})")


def _decays(p: Tensor, exclude_vectors: bool) -> bool:
    return p.ndim >= 2 or not exclude_vectors


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                 exclude_vectors: bool = True):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.exclude_vectors = exclude_vectors
        self.state: dict[str, np.ndarray] = {}

    def step(self, named_params: Iterable[tuple[str, Tensor]], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in named_params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            _check_finite(name, g)
            if self.weight_decay and _decays(p, self.exclude_vectors):
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.state.get(name)
                buf = g if buf is None else self.momentum * buf + g
                self.state[name] = buf
                g = buf
            _set(p, p.data - lr * g)


class AdamW:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0, exclude_vectors: bool = True):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.exclude_vectors = exclude_vectors
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params: Iterable[tuple[str, Tensor]], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is not None:
                if p.grad.shape != p.shape:
                    raise DimensionError(f"{name}: gradient {p.grad.shape} vs parameter {p.shape}")
                _check_finite(name, p.grad)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in named_params:
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            w = p.data
            if self.weight_decay and _decays(p, self.exclude_vectors):
                w = w * (1.0 - lr * self.weight_decay)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            _set(p, w - lr * upd)


def _set(p: Tensor, value: np.ndarray) -> None:
    arr = np.asarray(value, dtype=p.dtype)
    arr.flags.writeable = False
    p.data = arr


def optimizer_step(named_params, optimizer, lr: float | None = None) -> None:
    optimizer.step(named_params, lr)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return SGD(cfg.lr, cfg.momentum, cfg.weight_decay)


def lr_at(step: int, total: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    warm = cfg.warmup_steps if cfg.warmup_steps is not None else int(round(cfg.warmup_epochs * steps_per_epoch))
    if warm > 0 and step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "step":
        # waterfall: /10 at one third and two thirds of training
        third = max(total // 3, 1)
        return cfg.lr * 0.1 ** min(step // third, 2)
    span = max(total - warm, 1)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


# ---------------------------------------------------------------- data

@dataclass
class ArrayDataset:
    images: np.ndarray   # [n, C, H, W], already normalised
    labels: np.ndarray   # [n]
    num_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.images[idx], self.labels[idx], self.num_classes)


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    """Random horizontal flip and random crop after zero padding."""
    b, c, h, w = x.shape
    flip = rng.random(b) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    if pad <= 0:
        return np.ascontiguousarray(x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=b)
    ox = rng.integers(0, 2 * pad + 1, size=b)
    out = np.empty_like(x)
    for i in range(b):
        out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out


def iterate_batches(data: ArrayDataset, batch_size: int, rng: np.random.Generator | None = None,
                    augment: bool = False, pad: int = 4) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = data.images[idx]
        if augment and rng is not None:
            x = augment_batch(x, rng, pad)
        yield x, data.labels[idx]


def prefetch(it: Iterable, capacity: int = 2) -> Iterator:
    """Run ``it`` on a helper thread behind a bounded queue; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in it:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as e:  # surfaced on the consumer side
            q.put(e)
        q.put(done)

    th = threading.Thread(target=work, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(timeout=0.01)


# ---------------------------------------------------------------- loops

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_accuracy: float = 0.0
    best_epoch: int = -1
    final_checkpoint: str | None = None
    best_checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy if self.epochs else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "acc", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.loss:.6f}", f"{e.accuracy:.6f}", f"{e.seconds:.3f}"])


def predict(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(images[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def evaluate(model, data: ArrayDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    if len(data) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(data), batch_size):
        logits = model(data.images[start:start + batch_size]).data
        correct += int((T.argmax(logits, axis=-1) == data.labels[start:start + batch_size]).sum())
    return correct / len(data)


def _check_geometry(model, data: ArrayDataset) -> None:
    cfg = model.config
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if data.images.shape[1:] != want:
        raise ConfigurationError(f"dataset images {data.images.shape[1:]} do not match model geometry {want}")
    if data.num_classes > cfg.num_classes or (len(data) and data.labels.max() >= cfg.num_classes):
        raise ConfigurationError(
            f"dataset has labels beyond the model's {cfg.num_classes} classes")


def train_step(model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, optimizer, lr: float,
               teacher=None) -> float:
    params = model.named_parameters()
    with GradientTape() as tape:
        logits = model(x)
        if teacher is not None:
            loss = hard_distill_loss(logits, y, teacher(x).data, cfg.label_smoothing, cfg.distill_weight)
        else:
            loss = cross_entropy(logits, y, cfg.label_smoothing)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"loss became {value}")
    tape.backward(loss, [p for _, p in params])
    optimizer.step(params, lr)
    return value


def fit(model, train: ArrayDataset, cfg: TrainConfig, test: ArrayDataset | None = None,
        out_dir=None, teacher=None, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    """Train ``model`` in place. Shuffling and augmentation depend only on ``cfg.seed``.

    When ``out_dir`` is given the best-accuracy and final checkpoints, a text log
    and ``report.csv`` are written there.
    """
    from .checkpoint import save_checkpoint
    from .fusion import fuse_affine
    from .vision import VisionModel

    _check_geometry(model, train)
    if test is not None:
        _check_geometry(model, test)
    if cfg.mode == "hard_distill":
        if teacher is None:
            raise ConfigurationError("hard_distill mode needs a teacher model")
        if isinstance(teacher, VisionModel):
            teacher = fuse_affine(teacher)
        if teacher.config.num_classes != model.config.num_classes:
            raise DimensionError("teacher and student class counts differ")
    else:
        teacher = None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg)
    steps_per_epoch = max(math.ceil(len(train) / cfg.batch_size), 1)
    total = steps_per_epoch * cfg.epochs
    report = TrainReport()
    eval_set = test if test is not None else train
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        batches = iterate_batches(train, cfg.batch_size, rng, cfg.augment, cfg.crop_padding)
        if cfg.prefetch:
            batches = prefetch(batches, capacity=2)
        total_loss, seen = 0.0, 0
        for x, y in batches:
            lr = lr_at(step, total, cfg, steps_per_epoch)
            total_loss += train_step(model, x, y, cfg, optimizer, lr, teacher) * len(y)
            seen += len(y)
            step += 1
        acc = evaluate(model, eval_set, cfg.eval_batch_size)
        rec = EpochRecord(epoch, total_loss / max(seen, 1), acc, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f acc %.4f (%.1fs)", epoch, rec.loss, rec.accuracy, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if acc > report.best_accuracy or report.best_epoch < 0:
            report.best_accuracy, report.best_epoch = acc, epoch
            if out is not None:
                report.best_checkpoint = str(out / "best.rmlp")
                save_checkpoint(model, report.best_checkpoint)
    if out is not None:
        report.final_checkpoint = str(out / "final.rmlp")
        save_checkpoint(model, report.final_checkpoint)
        report.write_csv(out / "report.csv")
        with open(out / "train.log", "w", encoding="utf-8") as fh:
            for e in report.epochs:
                fh.write(f"epoch {e.epoch} loss {e.loss:.6f} acc {e.accuracy:.6f}\n")
            fh.write(f"best epoch {report.best_epoch} acc {report.best_accuracy:.6f}\n")
    return report
