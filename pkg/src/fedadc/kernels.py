"""Backend selection for the fused loss/gradient kernel.

The compiled ``_ckernel`` is used when it was built; otherwise the numpy
implementation in ``_pykernel`` takes over. Setting ``FEDADC_KERNEL=python``
forces the fallback. Both backends compute the same quantities in the same
order of operations, but BLAS blocking means they are only equal to within
rounding, so bitwise-reproducibility guarantees hold per backend.
"""
import os

from . import _pykernel

_forced = os.environ.get("FEDADC_KERNEL", "").lower()

if _forced == "python":
    _impl = _pykernel
else:
    try:
        from . import _ckernel as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _pykernel

BACKEND = _impl.BACKEND


def loss_grad(dims, act, params, x, y, targets, lam, tau, wd):
    """Mean combined loss over a batch and its flat gradient.

    ``lam`` weights the KL-to-``targets`` term at temperature ``tau``; the
    cross-entropy term always uses temperature 1. ``targets`` may be None
    when ``lam == 0``.
    """
    return _impl.loss_grad(tuple(dims), act, params, x, y, targets, lam, tau, wd)


def available_backends():
    out = {"python": _pykernel}
    try:
        from . import _ckernel
    except ImportError:
        pass
    else:
        out["cython"] = _ckernel
    return out
