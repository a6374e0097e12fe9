"""Cross-entropy training with Adam, step LR decay and online affine augmentation."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .dataio import InMemoryDataset, bilinear_sample
from .layers import make_rng
from .model import Model, load_checkpoint, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.8
    lr_decay_every_epochs: int = 10
    decay_mode: str = "step"  # "step": multiplicative LR decay; "weight_decay": decoupled decay
    batch_size: int = 16
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    augment: bool = True
    rotation_deg: float = 15.0
    shift_frac: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be >= 1")
        if self.decay_mode not in ("step", "weight_decay"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")
        self.scale_range = tuple(self.scale_range)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for ``epoch`` (0-based)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.decay_mode == "weight_decay":
        return config.learning_rate
    return config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_decay_every_epochs)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    picked = T.log_softmax(logits, axis=-1)[np.arange(n), labels]
    return T.neg(T.mean(picked))


class Adam:
    """Adam with bias correction; moment buffers keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay:
                p.data -= (lr * weight_decay) * p.data
            p.data -= (lr * update).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.params:
            self.m[n] = arrays[f"optim.m.{n}"].copy()
            self.v[n] = arrays[f"optim.v.{n}"].copy()
        self.t = t


def adam_step(params: dict[str, Tensor], state: Adam | None, lr: float, beta1=0.9, beta2=0.999,
              eps=1e-8) -> Adam:
    state = state if state is not None else Adam(params, beta1, beta2, eps)
    state.step(lr)
    return state


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


# ---------------------------------------------------------------- augmentation

def affine(image: np.ndarray, angle_deg: float = 0.0, scale: float = 1.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Rotate (counter-clockwise) and scale about the centre, then shift by ``(dy, dx)`` pixels."""
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy - shift[0], xx - cx - shift[1]
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    # inverse map: output pixel -> source coordinate
    sy = (cos * dy + sin * dx) / scale + cy
    sx = (-sin * dy + cos * dx) / scale + cx
    return bilinear_sample(image, sy, sx)


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig | None = None) -> np.ndarray:
    """Random rotation, scale and shift within the configured ranges; zero fill outside."""
    config = config or TrainConfig()
    _, h, w = image.shape
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    scale = rng.uniform(*config.scale_range)
    dy = rng.uniform(-config.shift_frac, config.shift_frac) * h
    dx = rng.uniform(-config.shift_frac, config.shift_frac) * w
    return affine(image, angle, scale, (dy, dx)).astype(image.dtype)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc), repr(r.val_loss),
                        repr(r.val_acc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                                float(r["train_acc"]), float(r["val_loss"]), float(r["val_acc"]))
                    for r in rows])


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """Eval-mode mean loss, accuracy and predicted labels."""
    if len(x) == 0:
        return float("nan"), float("nan"), np.zeros(0, dtype=np.int64)
    was_training = model.training
    model.eval()
    total, preds = 0.0, []
    try:
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                xb = Tensor(x[i:i + batch_size].astype(model.dtype, copy=False))
                logits = model(xb)
                total += float(cross_entropy(logits, y[i:i + batch_size]).data) * xb.shape[0]
                preds.append(np.argmax(logits.data, axis=1))
    finally:
        model.train(was_training)
    preds = np.concatenate(preds)
    return total / len(x), float(np.mean(preds == y)), preds


def train(model: Model, dataset: InMemoryDataset, config: TrainConfig, checkpoint_path=None,
          resume_from=None, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainHistory:
    """Run ``config.epochs`` epochs; returns the per-epoch history.

    With ``checkpoint_path`` the best-validation model is saved there and the
    latest state (including optimizer moments) to ``<checkpoint_path>.last``,
    which ``resume_from`` accepts to continue bit-exactly.
    """
    x, y = dataset.x_train, dataset.y_train
    if len(x) == 0:
        raise TrainingError("training split is empty")
    size = model.config.input_size
    if x.shape[1:] != (model.config.input_channels, size, size):
        raise TrainingError(f"dataset images {x.shape[1:]} do not match model input "
                            f"({model.config.input_channels}, {size}, {size})")
    params = model.named_parameters()
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    history = TrainHistory()
    start, best = 0, None
    if resume_from is not None:
        start, best, history = _resume(model, opt, resume_from)

    wd = config.lr_decay_factor if config.decay_mode == "weight_decay" else 0.0
    for epoch in range(start, config.epochs):
        lr = lr_at(epoch, config)
        order = make_rng(config.seed, epoch).permutation(len(x))
        model.train()
        loss_sum, correct = 0.0, 0
        for b0 in range(0, len(x), config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            xb = x[idx]
            if config.augment:
                xb = np.stack([augment(xb[j], make_rng(config.seed, epoch, int(i)), config)
                               for j, i in enumerate(idx)])
            logits = model(Tensor(xb.astype(model.dtype, copy=False)))
            loss = cross_entropy(logits, y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {b0}; "
                                    "try a lower learning rate or --clip-grad-norm")
            model.zero_grad()
            T.backward(loss)
            if config.clip_grad_norm:
                clip_grad_norm(params.values(), config.clip_grad_norm)
            opt.step(lr, weight_decay=wd)
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
        val_loss, val_acc, _ = evaluate(model, dataset.x_val, dataset.y_val)
        rec = EpochRecord(epoch, lr, loss_sum / len(x), correct / len(x), val_loss, val_acc)
        history.append(rec)
        log.info("epoch %d lr=%.3g loss=%.4f acc=%.3f val_loss=%.4f val_acc=%.3f", epoch, lr,
                 rec.train_loss, rec.train_acc, val_loss, val_acc)
        score = _score(rec)
        improved = best is None or score > best
        if improved:
            best = score
        if checkpoint_path is not None:
            meta = {"epoch": epoch + 1, "adam_t": opt.t, "best": list(best),
                    "history": history.to_csv(), "train_config": _config_dict(config)}
            if improved:
                save_checkpoint(model, checkpoint_path, meta=meta)
            save_checkpoint(model, str(checkpoint_path) + ".last", extra=opt.state_arrays(), meta=meta)
        if on_epoch is not None:
            on_epoch(rec)
    return history


def _score(rec: EpochRecord) -> tuple:
    if math.isnan(rec.val_acc):
        return (rec.train_acc, -rec.train_loss)
    return (rec.val_acc, -rec.val_loss)


def _config_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["scale_range"] = list(d["scale_range"])
    return d


def _resume(model: Model, opt: Adam, path):
    saved, extras, meta = load_checkpoint(path, return_extras=True)
    if saved.config != model.config:
        raise TrainingError(f"{path}: checkpoint config differs from the model being trained")
    for (name, p), q in zip(model.named_parameters().items(), saved.named_parameters().values()):
        p.data[...] = q.data
    for name, buf in model.named_buffers().items():
        buf[...] = saved.named_buffers()[name]
    opt.load_arrays(extras, int(meta["adam_t"]))
    history = TrainHistory.from_csv(meta["history"])
    return int(meta["epoch"]), tuple(meta["best"]), history


def train_config_from_dict(data: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in data.items() if k in names})


def save_history(history: TrainHistory, path) -> None:
    Path(path).write_text(history.to_csv())
