"""Orthonormal fast Walsh-Hadamard transform (Sylvester ordering)."""

from __future__ import annotations

import math

import numpy as np

from .core import as_tensor3


class SizeError(ValueError):
    """Raised for transform lengths that are not a power of two."""


def is_power_of_two(d: int) -> bool:
    return isinstance(d, (int, np.integer)) and d >= 1 and (d & (d - 1)) == 0


def _check_size(d: int) -> None:
    if not is_power_of_two(d):
        raise SizeError(f"Hadamard size must be a power of two, got {d}")


def fht(x, axis: int = -1) -> np.ndarray:
    """Normalized FHT along ``axis``; returns ``H_d x / sqrt(d)``.

    Vectorized butterfly: stage ``h`` pairs element ``i`` with ``i + h``
    inside each block of ``2h``. The result is orthonormal and symmetric,
    hence its own inverse.
    """
    x = np.asarray(x, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    d = x.shape[-1]
    _check_size(d)
    lead = x.shape[:-1]
    y = x.reshape(-1, d).copy()
    h = 1
    while h < d:
        blocks = y.reshape(-1, d // (2 * h), 2, h)
        top = blocks[:, :, 0, :]
        bottom = blocks[:, :, 1, :]
        y = np.stack((top + bottom, top - bottom), axis=2).reshape(-1, d)
        h *= 2
    y = (y / math.sqrt(d)).reshape(*lead, d)
    return np.moveaxis(y, -1, axis)


def fht_inplace(v: np.ndarray) -> np.ndarray:
    """Transform a 1-D float64 vector in place and return it."""
    if v.ndim != 1:
        raise SizeError(f"fht_inplace expects a vector, got shape {v.shape}")
    d = v.shape[0]
    _check_size(d)
    h = 1
    while h < d:
        for start in range(0, d, 2 * h):
            a = v[start:start + h].copy()
            b = v[start + h:start + 2 * h]
            v[start:start + h] = a + b
            v[start + h:start + 2 * h] = a - b
        h *= 2
    v /= math.sqrt(d)
    return v


def fht_tensor(x) -> np.ndarray:
    """Apply the transform independently to every (token, head) vector."""
    x = as_tensor3(x)
    return fht(x, axis=-1)


def hadamard_matrix(d: int) -> np.ndarray:
    """Dense ``H_d / sqrt(d)`` built by Sylvester doubling.

    Only meant for offline weight folding and as a cross-check of ``fht``.
    """
    _check_size(d)
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(d)


def block_hadamard(num_heads: int, head_dim: int) -> np.ndarray:
    """``I_H kron H_norm``: one normalized Hadamard block per head."""
    return np.kron(np.eye(num_heads), hadamard_matrix(head_dim))
