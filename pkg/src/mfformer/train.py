"""Optimizer, learning-rate schedule, training loop, evaluation and metrics."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import substream, weighted_sampler
from .model import MFFormer, ModelConfig, _strict_from_dict
from .nn import Module, Parameter
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class ScheduleConfig:
    base_lr: float = 5e-4
    warmup_epochs: int = 200
    total_epochs: int = 500
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be in [0, total_epochs)")

    @classmethod
    def desk(cls) -> "ScheduleConfig":
        return cls(warmup_epochs=20, total_epochs=60)


def lr_at_epoch(epoch: int, s: ScheduleConfig) -> float:
    """Linear warm-up to ``base_lr`` then half-cosine decay to ``floor_lr``."""
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.base_lr * (epoch + 1) / s.warmup_epochs
    frac = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.floor_lr + (s.base_lr - s.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 5
    weight_decay: float = 1e-8
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(schedule=ScheduleConfig.desk(), **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        sched = _strict_from_dict(ScheduleConfig, doc.pop("schedule", {}))
        cfg = _strict_from_dict(cls, doc)
        cfg.schedule = sched
        return cfg


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, named_params, lr: float = 5e-4, betas=(0.99, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-8):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            p.data -= lr * self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
               betas=(0.99, 0.999), eps: float = 1e-8, weight_decay: float = 1e-8) -> None:
    """Functional AdamW update on raw arrays; ``state`` holds m, v, step."""
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["step"] = 0
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {i}")
        p -= lr * weight_decay * p
        state["m"][i] = b1 * state["m"][i] + (1 - b1) * g
        state["v"][i] = b2 * state["v"][i] + (1 - b2) * g * g
        mhat = state["m"][i] / (1 - b1**t)
        vhat = state["v"][i] / (1 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        return cls(
            tp=int(np.sum((y_true == 1) & (y_pred == 1))),
            fp=int(np.sum((y_true == 0) & (y_pred == 1))),
            tn=int(np.sum((y_true == 0) & (y_pred == 0))),
            fn=int(np.sum((y_true == 1) & (y_pred == 0))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(cm: ConfusionMatrix) -> dict[str, float]:
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise ValueError(f"metrics need both classes in the evaluated set, got {cm}")
    sen = cm.tp / (cm.tp + cm.fn)
    spec = cm.tn / (cm.tn + cm.fp)
    return {
        "BACC": (sen + spec) / 2.0,
        "F1": 2 * cm.tp / (2 * cm.tp + cm.fp + cm.fn),
        "SEN": sen,
        "SPEC": spec,
    }


# ---------------------------------------------------------------------------
# training


def batches_for_epoch(labels, batch_size: int, rng) -> list[np.ndarray]:
    """Weighted-sampler batches; a trailing batch of one is merged into the
    previous one (batchnorm needs two samples per channel)."""
    out = list(weighted_sampler(labels, batch_size, rng))
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def train_model(
    model: Module,
    forward: Callable[[np.ndarray], Tensor],
    labels: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    lr_override: float | None = None,
    log_every: int = 0,
) -> list[tuple[int, float, float]]:
    """Run the full schedule; returns the trace ``[(epoch, lr, mean_loss)]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty training set")
    opt = AdamW(model.named_parameters(), lr=config.schedule.base_lr, betas=(config.beta1, config.beta2),
                eps=config.eps, weight_decay=config.weight_decay)
    trace = []
    model.train()
    for epoch in range(config.schedule.total_epochs):
        lr = lr_at_epoch(epoch, config.schedule) if lr_override is None else lr_override
        losses, counts = [], []
        for idx in batches_for_epoch(labels, config.batch_size, rng):
            try:
                loss = nn.cross_entropy(forward(idx), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
            except FloatingPointError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
            losses.append(loss.item())
            counts.append(len(idx))
        mean_loss = float(np.average(losses, weights=counts))
        trace.append((epoch, lr, mean_loss))
        if log_every and (epoch % log_every == 0 or epoch == config.schedule.total_epochs - 1):
            logger.info("epoch %d lr %.3g loss %.4f", epoch, lr, mean_loss)
    return trace


def mfformer_forward(model: MFFormer, fmri: np.ndarray, t1w: np.ndarray) -> Callable[[np.ndarray], Tensor]:
    cfg = model.config
    dtype = np.dtype(cfg.dtype)

    def forward(idx):
        f = Tensor(fmri[idx][:, None], dtype=dtype) if cfg.uses_fmri else None
        s = Tensor(t1w[idx][:, None], dtype=dtype) if cfg.uses_t1w else None
        return model(f, s)

    return forward


def train_fold(
    model_config: ModelConfig,
    train_config: TrainConfig,
    fmri: np.ndarray,
    t1w: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    fold: int = 0,
    lr_override: float | None = None,
) -> tuple[MFFormer, list[tuple[int, float, float]]]:
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training set must contain both classes")
    model = MFFormer(model_config, rng=substream(seed, "init", fold))
    trace = train_model(model, mfformer_forward(model, fmri, t1w), labels, train_config,
                        substream(seed, "sampler", fold), lr_override=lr_override)
    return model, trace


def predict_logits(forward: Callable[[np.ndarray], Tensor], model: Module, n: int, batch_size: int = 5) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, n, batch_size):
            out.append(forward(np.arange(start, min(n, start + batch_size))).data)
    return np.concatenate(out, axis=0)


def evaluate(model: MFFormer, fmri: np.ndarray, t1w: np.ndarray, labels, batch_size: int = 5) -> ConfusionMatrix:
    """Inference-mode confusion matrix; argmax ties go to class 0."""
    logits = predict_logits(mfformer_forward(model, fmri, t1w), model, len(labels), batch_size)
    return ConfusionMatrix.from_predictions(labels, np.argmax(logits, axis=1))


def write_trace_csv(path: str, trace: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "mean_loss"])
        for epoch, lr, loss in trace:
            w.writerow([epoch, repr(float(lr)), repr(float(loss))])


def save_model(model: MFFormer, directory: str) -> None:
    nn.save_checkpoint(model, directory, extra={"model_config": model.config.to_dict()})


def load_model(directory: str) -> MFFormer:
    state, doc = nn.read_checkpoint(directory)
    model = MFFormer(ModelConfig.from_dict(doc["model_config"]))
    model.load_state_dict(state)
    return model
