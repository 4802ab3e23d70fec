"""Dense tensor helpers shared by every other module.

Tensors are plain ``numpy`` float64 arrays. A ``Tensor3`` is shaped
``(tokens, heads, head_dim)`` in C order, so the channel index varies
fastest in memory; file formats rely on that layout.
"""

from __future__ import annotations

import numpy as np

DEFAULT_SEED = 0


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a C-contiguous float64 ``(S, H, d_h)`` array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be 3-D (tokens, heads, head_dim), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def empty_tensor3(num_heads: int, head_dim: int) -> np.ndarray:
    return np.zeros((0, num_heads, head_dim), dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def token_l2_norm(x: np.ndarray, token: int, head: int) -> float:
    """Euclidean norm of the ``(token, head)`` vector of a Tensor3."""
    s, h, _ = x.shape
    if not (0 <= token < s and 0 <= head < h):
        raise IndexError(f"(token={token}, head={head}) out of range for shape {x.shape}")
    return float(np.sqrt(np.sum(x[token, head] ** 2)))


def token_norms(x: np.ndarray) -> np.ndarray:
    """All per-(token, head) l2 norms, shape ``(S, H)``."""
    return np.sqrt(np.sum(np.square(x), axis=-1))


def make_rng(seed: int | None = None) -> np.random.Generator:
    """Seeded generator backed by PCG64.

    PCG64 is numpy's default bit generator and its raw stream is stable
    across platforms and releases, so a seed pins every draw.
    """
    if seed is None:
        seed = DEFAULT_SEED
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))
