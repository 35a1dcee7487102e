"""Minimal differentiable models and loss kernels.

Two model families are supported: multinomial logistic regression and a
fully connected MLP. All parameters live in one flat float64 vector; the
layout is ``[W_0, b_0, W_1, b_1, ...]`` with each ``W_l`` stored row-major
with shape ``(fan_in, fan_out)``. The final ``(W, b)`` pair is the
classifier head.

Gradients are derived by hand (see ``fedadc.kernels``); nothing here depends
on an autodiff framework.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, InputError

PROB_FLOOR = 1e-12

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dims: tuple = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in ("logistic", "mlp"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == "logistic" and self.hidden_dims:
            raise ConfigError("logistic model takes no hidden layers")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ConfigError("mlp needs at least one hidden layer")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer widths must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def shapes(self) -> list:
        """Ordered ``(name, dims)`` pairs describing the flat layout."""
        out = []
        dims = self.layer_dims
        for i in range(len(dims) - 1):
            out.append((f"fc{i}.weight", (dims[i], dims[i + 1])))
            out.append((f"fc{i}.bias", (dims[i + 1],)))
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(d)) for _, d in self.shapes)

    @property
    def head_slice(self) -> slice:
        fan_in, k = self.layer_dims[-2], self.layer_dims[-1]
        return slice(self.num_params - (fan_in * k + k), self.num_params)

    def split(self, params: np.ndarray) -> list:
        """Return ``[(W_0, b_0), ...]`` as views into ``params``."""
        params = check_params(self, params)
        layers, pos = [], 0
        dims = self.layer_dims
        for i in range(len(dims) - 1):
            n_w = dims[i] * dims[i + 1]
            w = params[pos:pos + n_w].reshape(dims[i], dims[i + 1])
            pos += n_w
            b = params[pos:pos + dims[i + 1]]
            pos += dims[i + 1]
            layers.append((w, b))
        return layers

    def zeros(self) -> np.ndarray:
        return np.zeros(self.num_params)


@dataclass
class ParamVector:
    """Flat parameter vector bundled with its layer layout.

    The simulator passes bare ``np.ndarray`` objects around in hot paths;
    this wrapper is for call sites that need the layout to travel with the
    values (export, inspection).
    """

    values: np.ndarray
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = sum(int(np.prod(d)) for _, d in self.shapes)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ConfigError(
                f"parameter vector has {self.values.size} entries, layout implies {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("parameter vector contains non-finite entries")

    @classmethod
    def for_spec(cls, spec: ModelSpec, values: np.ndarray) -> "ParamVector":
        return cls(values, spec.shapes)

    def layers(self) -> dict:
        out, pos = {}, 0
        for name, dims in self.shapes:
            n = int(np.prod(dims))
            out[name] = self.values[pos:pos + n].reshape(dims)
            pos += n
        return out


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ConfigError("features must be (n, dim) with one label per row")
        if x.shape[0] < 1:
            raise ConfigError("batch must hold at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    lam: float = 0.0
    tau: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ce", "combined"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if not self.tau > 0.0:
            raise ConfigError("temperature must be positive")
        if self.weight_decay < 0.0:
            raise ConfigError("weight decay must be non-negative")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.kind == "combined" else 0.0


def check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.asarray(getattr(params, "values", params), dtype=np.float64)
    if params.ndim != 1 or params.size != spec.num_params:
        raise ConfigError(
            f"expected {spec.num_params} parameters for {spec.kind}, got {params.size}"
        )
    return params


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    parts = []
    dims = spec.layer_dims
    for i in range(len(dims) - 1):
        limit = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
        parts.append(rng.uniform(-limit, limit, size=dims[i] * dims[i + 1]))
        parts.append(np.zeros(dims[i + 1]))
    return np.concatenate(parts)


def _activate(spec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def forward(spec: ModelSpec, params, batch) -> np.ndarray:
    """Logits of shape ``(batch_size, K)``."""
    x = batch.features if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"feature dimension must be {spec.input_dim}")
    layers = spec.split(params)
    h = x
    for w, b in layers[:-1]:
        h = _activate(spec, h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, max-shifted for overflow safety."""
    if not tau > 0.0:
        raise ConfigError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss_grad(logits, label: int, tau: float = 1.0):
    """Cross-entropy of one sample and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= int(label) < k:
        raise InputError(f"label {label} outside [0, {k})")
    p = softmax_temp(logits, tau)
    loss = -np.log(max(p[label], PROB_FLOOR))
    g = p.copy()
    g[label] -= 1.0
    return float(loss), g / tau


def check_distribution(p_hat, atol: float = 1e-9) -> np.ndarray:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if np.any(p_hat < 0.0) or not np.all(np.abs(p_hat.sum(axis=-1) - 1.0) <= atol):
        raise InputError("target must be non-negative and sum to one")
    return p_hat


def kl_loss_grad(student_logits, p_hat, tau: float = 1.0):
    """KL(p_hat || softmax(student/tau)) and its gradient w.r.t. the student logits.

    The target is a constant; zero-mass target entries contribute nothing.
    """
    p_hat = check_distribution(p_hat)
    p = softmax_temp(student_logits, tau)
    mask = p_hat > 0.0
    loss = np.sum(p_hat[mask] * (np.log(p_hat[mask]) - np.log(np.maximum(p[mask], PROB_FLOOR))))
    return float(loss), (p - p_hat) / tau


def _prepare(spec, params, batch, loss, targets):
    params = check_params(spec, params)
    if batch.features.shape[1] != spec.input_dim:
        raise ConfigError(f"feature dimension must be {spec.input_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise InputError("label outside [0, K)")
    lam = loss.effective_lam
    if loss.kind == "combined":
        if targets is None:
            raise ConfigError("combined loss needs a target distribution for every sample")
        targets = np.ascontiguousarray(targets, dtype=np.float64)
        if targets.shape != (len(batch), spec.num_classes):
            raise ConfigError("targets must be (batch_size, K)")
        check_distribution(targets)
    else:
        targets = None
    return params, lam, targets


def loss_and_grad(spec: ModelSpec, params, batch: Batch, loss: LossSpec,
                  targets: Optional[np.ndarray] = None):
    """Mini-batch mean loss and its gradient as a flat vector.

    Weight decay contributes ``0.5 * wd * |params|^2`` to the loss and
    ``wd * params`` to the gradient.
    """
    params, lam, targets = _prepare(spec, params, batch, loss, targets)
    return kernels.loss_grad(
        spec.layer_dims, spec.activation, params, batch.features, batch.labels,
        targets, lam, loss.tau, loss.weight_decay,
    )


def grad(spec: ModelSpec, params, batch: Batch, loss: LossSpec,
         targets: Optional[np.ndarray] = None) -> np.ndarray:
    return loss_and_grad(spec, params, batch, loss, targets)[1]


def loss_value(spec: ModelSpec, params, batch: Batch, loss: LossSpec,
               targets: Optional[np.ndarray] = None) -> float:
    """Scalar loss by a plain forward pass (independent of the gradient kernel)."""
    params, lam, targets = _prepare(spec, params, batch, loss, targets)
    logits = forward(spec, params, batch)
    n = len(batch)
    total = 0.0
    if lam < 1.0:
        p = softmax_temp(logits)
        ce = -np.log(np.maximum(p[np.arange(n), batch.labels], PROB_FLOOR))
        total += (1.0 - lam) * ce.mean()
    if lam > 0.0:
        q = np.maximum(softmax_temp(logits, loss.tau), PROB_FLOOR)
        t = targets
        safe_t = np.where(t > 0.0, t, 1.0)
        kl = np.sum(np.where(t > 0.0, t * (np.log(safe_t) - np.log(q)), 0.0), axis=1)
        total += lam * kl.mean()
    if loss.weight_decay > 0.0:
        total += 0.5 * loss.weight_decay * float(params @ params)
    return float(total)


def predict(spec: ModelSpec, params, features: np.ndarray) -> np.ndarray:
    return np.argmax(forward(spec, params, features), axis=1)
