"""Self-confidence knowledge distillation.

The global model received at the start of a round acts as a frozen teacher.
For a sample of class ``y`` the target keeps ``(1 - rho_i)`` of the
teacher's mass on every other class ``i`` and moves the remainder onto
``y``. Classes the client never sees (``rho_i = 0``) therefore keep the
teacher's prediction untouched, while classes the client is confident about
(``rho_i = 1``) are pushed to zero, recovering plain one-hot training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class TeacherSnapshot:
    params: np.ndarray
    spec: nn.ModelSpec
    tau: float = 1.0

    def __post_init__(self):
        params = np.array(nn.check_params(self.spec, self.params), dtype=np.float64)
        params.flags.writeable = False
        object.__setattr__(self, "params", params)
        if not self.tau > 0:
            raise ConfigError("temperature must be positive")


def teacher_probs(teacher: TeacherSnapshot, batch) -> np.ndarray:
    """Softmax of the teacher's logits at the teacher temperature, one row per sample."""
    return nn.softmax_temp(nn.forward(teacher.spec, teacher.params, batch), teacher.tau)


def _check_rho(rho, k):
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (k,):
        raise ConfigError(f"confidence vector must have length {k}")
    if np.any(rho < 0.0) or np.any(rho > 1.0):
        raise InputError("confidence entries must lie in [0, 1]")
    return rho


def target_probs(p_tilde, rho, y) -> np.ndarray:
    """Distillation target for one sample (1-D ``p_tilde``) or a batch (2-D).

    ``y`` is a scalar label or one label per row.
    """
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    single = p_tilde.ndim == 1
    p2 = np.atleast_2d(p_tilde)
    n, k = p2.shape
    nn.check_distribution(p2)
    rho = _check_rho(rho, k)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    if np.any(y < 0) or np.any(y >= k):
        raise InputError("label outside [0, K)")
    rows = np.arange(n)
    out = (1.0 - rho) * p2
    # mass taken off the other classes moves to y; equal to 1 - sum(others)
    # but keeps out[y] >= p[y] and rho = 0 passthrough exact in floating point
    moved = rho * p2
    moved[rows, y] = 0.0
    out[rows, y] = p2[rows, y] + moved.sum(axis=1)
    return out[0] if single else out


def batch_targets(teacher: TeacherSnapshot, batch: nn.Batch, rho) -> np.ndarray:
    return target_probs(teacher_probs(teacher, batch), rho, batch.labels)


def combined_loss_grad(spec: nn.ModelSpec, params, batch: nn.Batch, p_hat, lam: float,
                       tau: float, weight_decay: float = 0.0):
    """``(1 - lam) * CE + lam * KL(p_hat || p(tau))`` over the batch, with its gradient."""
    loss = nn.LossSpec("combined", lam, tau, weight_decay)
    return nn.loss_and_grad(spec, params, batch, loss, p_hat)
