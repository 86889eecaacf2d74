"""AdamW, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import ImageStore, TripletSample
from .errors import ConfigError, DataError, NumericError
from .model import IcaModel
from .objective import batch_loss, enumerate_items, items_loss, sample_pairs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    weight_decay: float = 0.01
    tau: float = 0.5
    patience: int = 3
    max_epochs: int = 50
    seed: int = 0
    reg_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01, state: OptimizerState | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = state or OptimizerState()

    def step(self, params: dict[str, T.Tensor], names: Sequence[str]) -> None:
        for n in names:
            g = params[n].grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {n}")
        st = self.state
        st.step += 1
        t = st.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for n in names:
            p = params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m.get(n)
            if m is None:
                m = st.m[n] = np.zeros_like(p.data)
                st.v[n] = np.zeros_like(p.data)
            v = st.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Tracks the lowest validation loss; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True if it is the new best."""
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: IcaModel
    log: list[dict]
    best_epoch: int
    best_val_loss: float
    optimizer: OptimizerState


def predict(model: IcaModel, samples: Sequence[TripletSample], images: ImageStore,
            chunk: int = 64) -> np.ndarray:
    """Model scores for ``samples`` in order."""
    out = []
    for k in range(0, len(samples), chunk):
        out.append(model.score(*images.batch(samples[k:k + chunk])))
    return np.concatenate(out) if out else np.zeros(0)


def evaluation_loss(model: IcaModel, samples: Sequence[TripletSample], images: ImageStore, tau: float,
                    reg_weight: float = 1.0) -> float:
    """Mean objective over every pair/singleton of ``samples`` in canonical order."""
    items = enumerate_items(samples)
    scores = predict(model, samples, images)
    index = {s.triplet_id: k for k, s in enumerate(samples)}
    return float(items_loss(T.Tensor(scores), index, items, tau, reg_weight).data)


def train(model: IcaModel, train_samples: Sequence[TripletSample], val_samples: Sequence[TripletSample],
          images: ImageStore, config: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit ``model`` in place, then load the lowest-validation-loss snapshot into it."""
    if not train_samples or not val_samples:
        raise DataError("train and validation splits must both be non-empty")
    overlap = {s.triplet_id for s in train_samples} & {s.triplet_id for s in val_samples}
    if overlap:
        raise DataError(f"train/val splits share triplets: {sorted(overlap)[:5]}")

    opt = AdamW(config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay)
    names = model.trainable_names()
    stopper = EarlyStopping(config.patience)
    best_state = model.state()
    records: list[dict] = []

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        items = sample_pairs(train_samples, config.seed, epoch)
        total, count = 0.0, 0
        for k in range(0, len(items), config.batch_size):
            batch = items[k:k + config.batch_size]
            with T.Tape() as tape:
                loss = batch_loss(batch, model, images, config.tau, config.reg_weight)
                T.backward(loss, tape)
            if not math.isfinite(float(loss.data)):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {k // config.batch_size}")
            opt.step(model.params, names)
            total += float(loss.data) * len(batch)
            count += len(batch)
        val = evaluation_loss(model, val_samples, images, config.tau, config.reg_weight)
        if stopper.update(epoch, val):
            best_state = model.state()
        rec = {"epoch": epoch, "train_loss": total / count, "val_loss": val,
               "elapsed_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
        records.append(rec)
        log.info("epoch %d train %.6f val %.6f", epoch, rec["train_loss"], val)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.should_stop:
            break

    model.load_state(best_state)
    return TrainResult(model, records, stopper.best_epoch, stopper.best_loss, opt.state)
