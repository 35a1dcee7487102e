"""Federated-learning simulator: accelerated FL with drift control (FedADC),
self-confidence distillation, non-IID partitioning and classifier calibration."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: E402
