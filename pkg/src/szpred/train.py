"""Per-fold supervised training: loss, Adam, epoch loop, early stopping.

Everything is seeded and deterministic: shuffle order, validation split,
and parameter initialization all derive from the config seed, so a
(fold, config, seed) triple reproduces the same trained model bit for
bit on one platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import Fold, SequenceSample, balance
from .model import ModelConfig, ModelParams, clone_params, forward_batch, init_model
from .tensor import Tensor


class TrainingError(RuntimeError):
    """Training cannot proceed or produced non-finite values."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 10
    balance_policy: str = "undersample"
    rng_seed: int = 0
    optimizer: str = "adam"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainedModel:
    params: ModelParams
    history: list[EpochStats]
    config: TrainConfig
    channels: list[int] | None   # None = all channels in timeline order
    best_epoch: int


def bce_loss(prob: float, label: int, weight: float = 1.0) -> float:
    """Plain binary cross-entropy of a probability (reference surface)."""
    p = min(max(prob, 1e-300), 1.0 - 1e-16)
    return -weight * (label * math.log(p) + (1 - label) * math.log(1.0 - p))


def bce_from_logits(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean weighted BCE computed from logits: w * (softplus(z) - y*z)."""
    labels_t = Tensor(np.asarray(labels, dtype=np.float64))
    weights_t = Tensor(np.asarray(weights, dtype=np.float64))
    per = T.mul(T.sub(T.softplus(logits), T.mul(labels_t, logits)), weights_t)
    return T.mean_all(per)


class Adam:
    """Standard Adam with bias correction over a list of tensors."""

    def __init__(self, params: list[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad_or_zero()
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def batch_features(samples: list[SequenceSample],
                   channels: list[int] | None = None) -> np.ndarray:
    """Stack samples into batch x channels x seq x features, slicing channels."""
    stacked = np.stack([s.features for s in samples])  # b x seq x channels x feat
    stacked = stacked.transpose(0, 2, 1, 3)
    if channels is not None:
        stacked = stacked[:, channels, :, :]
    return np.ascontiguousarray(stacked)


def _class_weights(labels: np.ndarray, weights: tuple[float, float]) -> np.ndarray:
    return np.where(labels > 0.5, weights[1], weights[0])


def train_epoch(params: ModelParams, samples: list[SequenceSample], opt: Adam,
                cfg: TrainConfig, weights: tuple[float, float],
                channels: list[int] | None, rng: np.random.Generator,
                epoch: int) -> float:
    """One seeded pass of minibatch gradient descent; returns mean loss."""
    if not samples:
        raise TrainingError("no training batches")
    order = rng.permutation(len(samples))
    total = 0.0
    seen = 0
    for b_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [samples[i] for i in order[start:start + cfg.batch_size]]
        feats = batch_features(batch, channels)
        labels = np.array([s.label for s in batch], dtype=np.float64)
        logits, _ = forward_batch(feats, params)
        loss = bce_from_logits(logits, labels, _class_weights(labels, weights))
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b_idx}")
        if cfg.learning_rate > 0:
            opt.zero_grad()
            loss.backward(np.ones(()))
            opt.step()
        total += float(loss.data) * len(batch)
        seen += len(batch)
    return total / seen


def evaluate_split(params: ModelParams, samples: list[SequenceSample],
                   weights: tuple[float, float],
                   channels: list[int] | None) -> tuple[float, float]:
    """(mean loss, accuracy) without touching gradients."""
    total = 0.0
    correct = 0
    with T.no_grad():
        for start in range(0, len(samples), 256):
            batch = samples[start:start + 256]
            feats = batch_features(batch, channels)
            labels = np.array([s.label for s in batch], dtype=np.float64)
            logits, _ = forward_batch(feats, params)
            loss = bce_from_logits(logits, labels, _class_weights(labels, weights))
            total += float(loss.data) * len(batch)
            correct += int(((logits.data >= 0.0) == (labels > 0.5)).sum())
    return total / len(samples), correct / len(samples)


def _stratified_split(samples: list[SequenceSample], fraction: float,
                      rng: np.random.Generator) -> tuple[list, list]:
    train, val = [], []
    for label in (0, 1):
        group = [s for s in samples if s.label == label]
        n_val = int(round(len(group) * fraction))
        n_val = min(max(n_val, 1 if len(group) > 1 else 0), len(group) - 1)
        picks = set(rng.choice(len(group), size=n_val, replace=False)) if n_val else set()
        for i, s in enumerate(group):
            (val if i in picks else train).append(s)
    return train, val


def fit(fold: Fold, model_cfg: ModelConfig, cfg: TrainConfig,
        channels: list[int] | None = None,
        log_path: str | Path | None = None) -> TrainedModel:
    """Train on the fold's training set with a seeded 10% validation split.

    Returns the best-validation snapshot.  ``channels`` restricts the
    channel axis (model_cfg.n_channels must already match its length).
    """
    if not fold.train:
        raise TrainingError("fold has an empty training set")
    balanced, weights = balance(fold.train, cfg.balance_policy, rng_seed=cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    train_set, val_set = _stratified_split(balanced, cfg.val_fraction, rng)
    if not {s.label for s in train_set} == {0, 1}:
        raise TrainingError("training split lost a class; need both labels")
    if not val_set:
        val_set = train_set

    params = init_model(model_cfg, rng_seed=cfg.rng_seed)
    opt = Adam(params.tensors(), lr=cfg.learning_rate)

    history: list[EpochStats] = []
    best = clone_params(params)
    best_loss = math.inf
    best_epoch = -1
    since_best = 0
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            train_loss = train_epoch(params, train_set, opt, cfg, weights,
                                     channels, rng, epoch)
            val_loss, val_acc = evaluate_split(params, val_set, weights, channels)
            history.append(EpochStats(epoch, train_loss, val_loss, val_acc))
            if log_fh:
                log_fh.write(f"{epoch} {train_loss:.6f} {val_loss:.6f} {val_acc:.4f}\n")
                log_fh.flush()
            if val_loss < best_loss:
                best_loss = val_loss
                best = clone_params(params)
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if cfg.early_stop_patience > 0 and since_best >= cfg.early_stop_patience:
                    break
    finally:
        if log_fh:
            log_fh.close()

    return TrainedModel(params=best, history=history, config=cfg,
                        channels=channels, best_epoch=best_epoch)


def retrain_selected(fold: Fold, selection, model_cfg: ModelConfig,
                     cfg: TrainConfig, log_path=None) -> TrainedModel:
    """Re-initialize and retrain on the selected channel subset only."""
    if not selection.selected:
        raise TrainingError("cannot retrain on a Failed channel selection")
    sliced_cfg = replace(model_cfg, n_channels=len(selection.channels))
    fresh = replace(cfg, rng_seed=cfg.rng_seed + 50000)
    return fit(fold, sliced_cfg, fresh, channels=list(selection.channels),
               log_path=log_path)
