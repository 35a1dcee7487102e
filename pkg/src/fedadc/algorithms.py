"""Local update rules and server updates.

Sign convention: a client returns ``delta = theta_t - theta_H``, so a
positive delta points along the descent direction, and the server moves the
global model by ``-alpha * eta * m``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import kernels, nn
from .distillation import TeacherSnapshot, batch_targets
from .errors import ConfigError, DivergedClientError, InputError

LOCAL_RULES = ("fedavg", "fedadc-nesterov", "fedadc-heavyball", "fedadc-dm", "fedprox")


@dataclass(frozen=True)
class ServerState:
    round: int
    theta: np.ndarray
    momentum: np.ndarray
    alpha: float = 1.0
    beta_global: float = 0.9
    beta_local: float = 0.9
    eta: float = 0.05

    def __post_init__(self):
        if self.theta.shape != self.momentum.shape:
            raise ConfigError("model and momentum must share a shape")
        for name in ("beta_global", "beta_local"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not self.eta > 0:
            raise ConfigError("learning rate must be positive")

    @classmethod
    def initial(cls, theta, **hyper) -> "ServerState":
        theta = np.array(theta, dtype=np.float64)
        return cls(0, theta, np.zeros_like(theta), **hyper)


@dataclass(frozen=True)
class LocalConfig:
    algorithm: str = "fedavg"
    loss: nn.LossSpec = field(default_factory=nn.LossSpec)
    batch_size: int = 64
    local_iters: Optional[int] = 8
    local_epochs: Optional[int] = None
    phi: Optional[float] = None
    mu: Optional[float] = None

    def __post_init__(self):
        if self.algorithm not in LOCAL_RULES:
            raise ConfigError(f"unknown local rule {self.algorithm!r}")
        if (self.phi is not None) != (self.algorithm == "fedadc-dm"):
            raise ConfigError("phi is set exactly when the local rule is fedadc-dm")
        if self.phi is not None and not 0.0 <= self.phi < 1.0:
            raise ConfigError("phi must lie in [0, 1)")
        if (self.mu is not None) != (self.algorithm == "fedprox"):
            raise ConfigError("mu is set exactly when the local rule is fedprox")
        if self.mu is not None and self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if (self.local_iters is None) == (self.local_epochs is None):
            raise ConfigError("set exactly one of local_iters and local_epochs")
        budget = self.local_iters if self.local_iters is not None else self.local_epochs
        if budget < 1:
            raise ConfigError("local budget must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")

    def num_steps(self, train_size: int) -> int:
        """Local iterations H for a client holding ``train_size`` samples."""
        if self.local_iters is not None:
            return self.local_iters
        return math.ceil(train_size / min(self.batch_size, train_size)) * self.local_epochs


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    samples_used: int
    num_steps: int
    train_loss: float
    grads: Optional[List[np.ndarray]] = None


def normalize_momentum(momentum, beta_local: float, num_steps: int) -> np.ndarray:
    """Per-step share of the global momentum: ``beta_local * m / H``."""
    if num_steps < 1:
        raise ConfigError("H must be at least 1")
    return beta_local * np.asarray(momentum) / num_steps


def batch_schedule(n: int, batch_size: int, rng: np.random.Generator):
    """Endless mini-batches: reshuffle each epoch, final batch may be short."""
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            yield perm[start:start + bs]


def local_round(theta, m_bar, shard, dataset, spec: nn.ModelSpec, cfg: LocalConfig,
                eta: float, rng: np.random.Generator, teacher: Optional[TeacherSnapshot] = None,
                round_idx: Optional[int] = None, record_grads: bool = False) -> ClientUpdate:
    """Run one client's ``H`` local steps from the broadcast model.

    ``dataset`` is the training pool ``shard`` indexes into. Returns the
    descent-positive model difference.
    """
    theta0 = nn.check_params(spec, theta)
    m_bar = np.asarray(m_bar, dtype=np.float64)
    algo = cfg.algorithm
    if algo in ("fedavg", "fedprox") and np.any(m_bar != 0.0):
        raise ConfigError(f"{algo} runs without embedded momentum")
    combined = cfg.loss.kind == "combined"
    if combined != (teacher is not None):
        raise ConfigError("a teacher is required exactly when the loss is combined")

    train_idx = shard.train_indices
    if train_idx.size == 0:
        raise InputError(f"client {shard.client_id} has no training samples")
    x_all = dataset.features[train_idx]
    y_all = dataset.labels[train_idx]
    t_all = None
    if combined:
        # the teacher is frozen for the round, so one pass serves every step
        t_all = batch_targets(teacher, nn.Batch(x_all, y_all), shard.rho)

    dims, act = spec.layer_dims, spec.activation
    lam, tau, wd = cfg.loss.effective_lam, cfg.loss.tau, cfg.loss.weight_decay
    steps = cfg.num_steps(train_idx.size)
    batches = batch_schedule(train_idx.size, cfg.batch_size, rng)
    used = 0

    def grad_fn(theta_k, step):
        nonlocal used
        idx = next(batches)
        used += idx.size
        tg = t_all[idx] if combined else None
        loss, g = kernels.loss_grad(dims, act, theta_k, x_all[idx], y_all[idx], tg, lam, tau, wd)
        if not math.isfinite(loss):
            raise DivergedClientError(shard.client_id, round_idx, f"non-finite loss at step {step}")
        return loss, g

    theta_h, mean_loss, grads = apply_local_rule(
        theta0, m_bar, grad_fn, algo, eta, steps, phi=cfg.phi, mu=cfg.mu,
        record_grads=record_grads,
    )
    delta = theta0 - theta_h
    if not np.all(np.isfinite(delta)):
        raise DivergedClientError(shard.client_id, round_idx, "non-finite model update")
    return ClientUpdate(shard.client_id, delta, used, steps, mean_loss, grads)


def apply_local_rule(theta0, m_bar, grad_fn, rule: str, eta: float, steps: int,
                     phi: Optional[float] = None, mu: Optional[float] = None,
                     record_grads: bool = False):
    """The local update rules, independent of how gradients are produced.

    ``grad_fn(theta, step)`` returns ``(loss, gradient)`` for 1-based
    ``step``. Returns ``(theta_H, mean loss, recorded gradients or None)``;
    recorded gradients include the proximal term for fedprox.
    """
    theta = np.array(theta0, dtype=np.float64)
    theta_start = theta.copy()
    local_m = None
    grads = [] if record_grads else None
    loss_sum = 0.0
    for step in range(1, steps + 1):
        if rule == "fedadc-nesterov":
            theta = theta - eta * m_bar
        loss, g = grad_fn(theta, step)
        if rule == "fedprox" and mu:
            g = g + mu * (theta - theta_start)
        if record_grads:
            grads.append(np.array(g, dtype=np.float64))
        if rule == "fedadc-heavyball":
            theta = theta - eta * (g + m_bar)
        elif rule == "fedadc-dm":
            # first step seeds the local momentum with the raw gradient
            local_m = g if step == 1 else phi * local_m + (1.0 - phi) * g
            theta = theta - eta * (m_bar + local_m)
        else:
            theta = theta - eta * g
        loss_sum += loss
    return theta, loss_sum / steps, grads


def pseudo_delta(updates: List[ClientUpdate], eta: float) -> np.ndarray:
    """``(1/|S|)(1/eta) * sum(delta)``, reduced in ascending client-id order."""
    if not updates:
        raise InputError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shape = ordered[0].delta.shape
    total = np.zeros(shape)
    for u in ordered:
        if u.delta.shape != shape:
            raise InputError("client updates differ in shape")
        total += u.delta
    return total / len(ordered) / eta


def _step(state: ServerState, new_m: np.ndarray) -> ServerState:
    theta = state.theta - state.alpha * state.eta * new_m
    return replace(state, round=state.round + 1, theta=theta, momentum=new_m)


def server_update_slowmo(state: ServerState, g_bar, beta: Optional[float] = None) -> ServerState:
    """SLOWMO: ``m' = beta * m + g_bar``; ``beta`` defaults to ``beta_global``."""
    beta = state.beta_global if beta is None else beta
    return _step(state, beta * state.momentum + g_bar)


def server_update_fedadc(state: ServerState, delta_bar) -> ServerState:
    """``m' = delta_bar + (beta_global - beta_local) * m``.

    The clients already injected ``beta_local * m`` through the embedded
    momentum, so only the difference is added back here.
    """
    return _step(state, delta_bar + (state.beta_global - state.beta_local) * state.momentum)


def server_update_dm(state: ServerState, delta_bar) -> ServerState:
    return _step(state, np.array(delta_bar, dtype=np.float64))


def server_update_fedavg(state: ServerState, updates: List[ClientUpdate]) -> ServerState:
    """Model averaging, ``theta - mean(delta)``.

    Computed as ``theta - eta * pseudo_delta`` so that it shares its
    arithmetic with the momentum servers; momentum stays zero.
    """
    d_bar = pseudo_delta(updates, state.eta)
    return replace(state, round=state.round + 1, theta=state.theta - state.eta * d_bar,
                   momentum=np.zeros_like(state.momentum))
