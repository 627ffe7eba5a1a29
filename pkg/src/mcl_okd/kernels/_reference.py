"""Pure NumPy versions of the memory-bank kernels.

Same signatures and semantics as the compiled ``_bankops`` module. Used when
the extension is not built, and as the comparison side of the benchmark.
"""
import numpy as np


def gather_dot(anchors, bank, idx, out):
    out[...] = np.einsum("bd,bkd->bk", anchors, bank[idx])


def gather_weighted_sum(weights, bank, idx, out):
    out[...] = np.einsum("bk,bkd->bd", weights, bank[idx])


def _blend(old, values, rho):
    rows = (1.0 - rho) * old.astype(np.float64) + rho * values.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    degenerate = norms[:, 0] == 0.0
    if degenerate.any():
        rows[degenerate] = values[degenerate]
        norms[degenerate] = np.linalg.norm(values[degenerate], axis=1, keepdims=True)
    return rows / norms


def momentum_update(bank, idx, values, rho):
    if len(np.unique(idx)) == len(idx):
        bank[idx] = _blend(bank[idx], values, rho)
        return
    # repeated indices must compound in order
    for i, j in enumerate(idx):
        bank[j : j + 1] = _blend(bank[j : j + 1], values[i : i + 1], rho)
