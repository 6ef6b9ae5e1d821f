"""Mean-variance training with a Gaussian NLL loss and Adam.

Targets are expected in standardized units (see ``TargetScaler``); the
returned predictions of :func:`predict_store` and :func:`mc_dropout_predict`
can be mapped back to original units by passing the scaler.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor, backward
from .errors import GnnuqError, LengthMismatch, NonPositiveVariance
from .molgraph import GraphStore, TargetScaler
from .mpnn import ModelInstance, forward
from .rng import SplitMix64, derive_seed
from .uq import PredictionSet

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
PREDICT_CHUNK = 256


class DivergedLoss(GnnuqError, RuntimeError):
    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


def nll_loss(mu, var, y) -> Tensor:
    """Mean Gaussian negative log-likelihood, differentiable in ``mu`` and ``var``."""
    mu, var = dc.as_tensor(mu), dc.as_tensor(var)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not (mu.shape == var.shape == y.shape) or y.size == 0:
        raise LengthMismatch(f"shapes {mu.shape}, {var.shape}, {y.shape}")
    if not np.all(var.data > 0):
        raise NonPositiveVariance("predicted variance must be positive")
    r = mu - y
    return dc.mul(dc.mean(dc.log(var) + r * r / var), 0.5) + 0.5 * LOG_2PI


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    keep_best_on_val: bool = False
    dropout: float = 0.0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    initial_val_nll: float = math.nan
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_nll(self) -> float:
        return min(self.val_nll) if self.val_nll else self.initial_val_nll

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_nll"])
            for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_nll)):
                w.writerow([e + 1, repr(tl), repr(vl)])


@dataclass(frozen=True, eq=False)
class TrainData:
    """Graphs plus standardized targets."""

    store: GraphStore
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if y.size != len(self.store):
            raise LengthMismatch(f"{y.size} targets for {len(self.store)} graphs")
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


def predict_store(model: ModelInstance, store: GraphStore, scaler: TargetScaler | None = None,
                  dropout: float = 0.0, rng: SplitMix64 | None = None,
                  chunk: int = PREDICT_CHUNK) -> tuple[np.ndarray, np.ndarray]:
    mus, vars_ = [], []
    for start in range(0, len(store), chunk):
        idx = np.arange(start, min(start + chunk, len(store)))
        mu, var = forward(model, store.batch(idx), dropout=dropout, rng=rng)
        mus.append(mu.data)
        vars_.append(var.data)
    mu = np.concatenate(mus) if mus else np.zeros(0)
    var = np.concatenate(vars_) if vars_ else np.zeros(0)
    if scaler is not None:
        mu, var = scaler.invert(mu, var)
    return mu, var


def evaluate_nll(model: ModelInstance, data: TrainData) -> float:
    mu, var = predict_store(model, data.store)
    r = mu - data.y
    return float(0.5 * np.mean(LOG_2PI + np.log(var) + r * r / var))


def train(model: ModelInstance, train_data: TrainData, val_data: TrainData,
          cfg: TrainConfig) -> tuple[ModelInstance, TrainHistory]:
    """Train a copy of ``model``; the input model is left untouched."""
    model = model.copy()
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history
    params = list(model.params.values())
    opt = Adam(params, cfg.learning_rate)
    order_rng = SplitMix64(cfg.seed)
    drop_rng = SplitMix64(derive_seed(cfg.seed, 1)) if cfg.dropout > 0 else None
    history.initial_val_nll = evaluate_nll(model, val_data)
    best_state, best = None, math.inf
    n = len(train_data)
    for epoch in range(cfg.epochs):
        order = np.array(order_rng.shuffle(list(range(n))), dtype=np.int64)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train_data.store.batch(idx)
            with Tape() as tape:
                mu, var = forward(model, batch, dropout=cfg.dropout, rng=drop_rng)
                loss = nll_loss(mu, var, train_data.y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch + 1}", history)
            grads = backward(tape, loss, wrt=params)
            opt.step(clip_global_norm([grads[p] for p in params], cfg.clip_norm))
            total += value * idx.size
        val = evaluate_nll(model, val_data)
        history.train_loss.append(total / n)
        history.val_nll.append(val)
        if not math.isfinite(val):
            raise DivergedLoss(f"non-finite validation NLL at epoch {epoch + 1}", history)
        if val < best:
            best, history.best_epoch = val, epoch
            if cfg.keep_best_on_val:
                best_state = model.state()
        logger.debug("epoch %d train %.4f val %.4f", epoch + 1, total / n, val)
    if cfg.keep_best_on_val and best_state is not None:
        model.load_state(best_state)
    return model, history


def mc_dropout_predict(model: ModelInstance, store: GraphStore, rate: float, n_passes: int,
                       seed: int, scaler: TargetScaler | None = None) -> PredictionSet:
    """Stochastic forward passes with dropout left on, one seeded stream per pass."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    if n_passes < 1:
        raise ValueError("n_passes must be positive")
    members = []
    for k in range(n_passes):
        rng = SplitMix64(derive_seed(seed, k))
        members.append(predict_store(model, store, scaler, dropout=rate, rng=rng))
    return PredictionSet.stack(members, [f"pass{k}" for k in range(n_passes)])
