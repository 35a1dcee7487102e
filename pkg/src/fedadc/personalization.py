"""Classifier calibration: per-client fine-tuning of the final linear layer.

With the body frozen the penultimate activations are fixed, so calibration
is multinomial logistic regression on those features; they are computed
once per client and the head is trained with the same fused kernel used
for federated training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels, nn
from .algorithms import batch_schedule
from .distillation import TeacherSnapshot, batch_targets
from .errors import ConfigError, DivergedClientError

REGULARIZERS = ("none", "prox", "kd")


@dataclass(frozen=True)
class PersonalizationConfig:
    epochs: int = 2
    lr: Optional[float] = None
    regularizer: str = "none"
    mu: float = 0.0
    lam: float = 0.35
    tau: float = 1.0
    batch_size: int = 64
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("personalization epochs must be >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError("personalization learning rate must be positive")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.mu < 0 or not 0.0 <= self.lam <= 1.0 or not self.tau > 0:
            raise ConfigError("regularizer coefficients out of range")
        if self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigError("invalid batch size or weight decay")


def head_mask(spec: nn.ModelSpec) -> np.ndarray:
    mask = np.zeros(spec.num_params, dtype=bool)
    mask[spec.head_slice] = True
    return mask


def body_features(spec: nn.ModelSpec, params, features) -> np.ndarray:
    """Input to the head: penultimate activations (raw features for logistic)."""
    h = np.asarray(features, dtype=np.float64)
    for w, b in spec.split(params)[:-1]:
        z = h @ w + b
        h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
    return np.ascontiguousarray(h)


def calibrate(theta, spec: nn.ModelSpec, shard, dataset, cfg: PersonalizationConfig,
              rng: np.random.Generator, default_lr: Optional[float] = None) -> np.ndarray:
    """Fine-tune only the head of ``theta`` on the shard's training split."""
    theta = nn.check_params(spec, theta)
    out = theta.copy()
    if cfg.epochs == 0:
        return out
    lr = cfg.lr if cfg.lr is not None else default_lr
    if lr is None:
        raise ConfigError("personalization needs a learning rate")
    idx = shard.train_indices
    if idx.size == 0:
        raise ConfigError(f"client {shard.client_id} has no training split")

    x, y = dataset.features[idx], dataset.labels[idx]
    h = body_features(spec, theta, x)
    head_dims = (h.shape[1], spec.num_classes)
    sl = spec.head_slice
    head0 = theta[sl].copy()
    head = head0.copy()

    targets, lam, tau = None, 0.0, 1.0
    if cfg.regularizer == "kd":
        teacher = TeacherSnapshot(theta, spec, cfg.tau)
        targets = batch_targets(teacher, nn.Batch(x, y), shard.rho)
        lam, tau = cfg.lam, cfg.tau

    bs = min(cfg.batch_size, idx.size)
    steps = -(-idx.size // bs) * cfg.epochs
    batches = batch_schedule(idx.size, cfg.batch_size, rng)
    for _ in range(steps):
        b = next(batches)
        tg = targets[b] if targets is not None else None
        _, g = kernels.loss_grad(head_dims, spec.activation, head, h[b], y[b], tg,
                                 lam, tau, cfg.weight_decay)
        if cfg.regularizer == "prox" and cfg.mu > 0:
            g = g + cfg.mu * (head - head0)
        head = head - lr * g
    if not np.all(np.isfinite(head)):
        raise DivergedClientError(shard.client_id, None, "calibration diverged")
    out[sl] = head
    return out


def local_accuracy(spec: nn.ModelSpec, params, shard, dataset) -> float:
    idx = shard.test_indices
    if idx.size == 0:
        raise ConfigError(f"client {shard.client_id} has an empty local test split")
    pred = nn.predict(spec, params, dataset.features[idx])
    return float(np.mean(pred == dataset.labels[idx]))


def evaluate_personalized(shards, params_per_client, spec: nn.ModelSpec, dataset):
    """Per-client top-1 accuracy on local test splits, plus the unweighted mean.

    ``params_per_client`` maps client id to parameters (a single array is
    used for every client).
    """
    ordered = sorted(shards, key=lambda s: s.client_id)
    accs = []
    for shard in ordered:
        if isinstance(params_per_client, np.ndarray):
            params = params_per_client
        else:
            params = params_per_client[shard.client_id]
        accs.append(local_accuracy(spec, params, shard, dataset))
    return accs, float(np.mean(accs))


def personalize_all(theta, spec, shards, dataset, cfg: PersonalizationConfig, seed: int,
                    default_lr: Optional[float] = None) -> dict:
    """Calibrate every client and compare with the uncalibrated global model."""
    ordered = sorted(shards, key=lambda s: s.client_id)
    personal = {}
    for shard in ordered:
        rng = np.random.default_rng([seed, 0xCA1B, shard.client_id])
        personal[shard.client_id] = calibrate(theta, spec, shard, dataset, cfg, rng, default_lr)
    per_client, mean_acc = evaluate_personalized(ordered, personal, spec, dataset)
    _, global_mean = evaluate_personalized(ordered, np.asarray(theta), spec, dataset)
    return {
        "per_client_acc": per_client,
        "mean_acc": mean_acc,
        "global_mean_local_acc": global_mean,
    }
