"""Memory-bank kernels with a compiled core and a NumPy fallback.

The compiled extension (``_bankops``) is used when it was built at install
time; otherwise the pure NumPy module is selected. Set
``MCL_OKD_PURE_PYTHON=1`` to force the fallback.

``BACKEND`` names the active implementation ("cython" or "numpy").
"""
import os

import numpy as np

from . import _reference as reference

try:
    from . import _bankops as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not os.environ.get("MCL_OKD_PURE_PYTHON"):
    _impl = compiled
    BACKEND = "cython"
else:
    _impl = reference
    BACKEND = "numpy"

__all__ = [
    "BACKEND",
    "compiled",
    "reference",
    "gather_dot",
    "gather_weighted_sum",
    "momentum_update",
]


def _check_idx(idx, n_rows):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"bank index out of range [0, {n_rows})")
    return idx


def _check_float(name, arr, dtype=None):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"{name} must be float32 or float64, got {arr.dtype}")
    if dtype is not None and arr.dtype != dtype:
        raise TypeError(f"{name} dtype {arr.dtype} does not match bank dtype {dtype}")
    return arr


def gather_dot(anchors, bank, idx, impl=None):
    """Return ``out[b, k] = anchors[b] . bank[idx[b, k]]`` without materializing
    the gathered rows."""
    impl = impl or _impl
    bank = _check_float("bank", bank)
    anchors = _check_float("anchors", anchors, bank.dtype)
    idx = _check_idx(idx, bank.shape[0])
    if idx.ndim != 2 or idx.shape[0] != anchors.shape[0]:
        raise ValueError("idx must have shape (batch, K) matching anchors")
    if anchors.shape[1] != bank.shape[1]:
        raise ValueError("anchor and bank dimensions differ")
    out = np.empty(idx.shape, dtype=bank.dtype)
    impl.gather_dot(anchors, bank, idx, out)
    return out


def gather_weighted_sum(weights, bank, idx, impl=None):
    """Return ``out[b] = sum_k weights[b, k] * bank[idx[b, k]]``."""
    impl = impl or _impl
    bank = _check_float("bank", bank)
    weights = _check_float("weights", weights, bank.dtype)
    idx = _check_idx(idx, bank.shape[0])
    if weights.shape != idx.shape:
        raise ValueError("weights and idx shapes differ")
    out = np.empty((idx.shape[0], bank.shape[1]), dtype=bank.dtype)
    impl.gather_weighted_sum(weights, bank, idx, out)
    return out


def momentum_update(bank, idx, values, rho, impl=None):
    """In place: ``bank[j] <- normalize((1 - rho) * bank[j] + rho * v)``.

    Repeated indices are applied in order. ``bank`` must be a C-contiguous
    float array (it is modified, never copied).
    """
    impl = impl or _impl
    if not (isinstance(bank, np.ndarray) and bank.flags.c_contiguous):
        raise ValueError("bank must be a C-contiguous ndarray")
    _check_float("bank", bank)
    values = _check_float("values", values, bank.dtype)
    idx = _check_idx(np.atleast_1d(idx), bank.shape[0])
    values = np.atleast_2d(values)
    if idx.shape[0] != values.shape[0] or values.shape[1] != bank.shape[1]:
        raise ValueError("values must have shape (len(idx), dim)")
    impl.momentum_update(bank, idx, values, float(rho))
