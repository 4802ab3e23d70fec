"""Asymmetric uniform b-bit quantization, grouped variants and 2-bit packing.

Step size and zero point follow the usual min/max recipe::

    delta = (max - min) / (2**b - 1)
    z     = round(-min / delta)
    q     = clamp(round(x / delta) + z, 0, 2**b - 1)
    x_hat = delta * (q - z)

``round`` is half-away-from-zero everywhere. A constant block has
``delta == 0``; its codes are all zero and it reconstructs to the stored
minimum exactly. The zero point is kept as a signed integer (it leaves
``[0, 2**b - 1]`` when the block range excludes zero); clamping it would
shift the whole grid off the data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

ALLOWED_BITS = (2, 3, 4, 8, 16)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(bits: int) -> None:
    if bits not in ALLOWED_BITS:
        raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {bits}")


def code_dtype(bits: int):
    return np.uint8 if bits <= 8 else np.uint16


@dataclass(frozen=True)
class QuantParams:
    delta: float
    zero_point: int
    bits: int
    minimum: float = 0.0

    @property
    def levels(self) -> int:
        return 2**self.bits - 1


@dataclass(frozen=True)
class QuantBlock:
    codes: np.ndarray
    params: QuantParams
    axis: Literal["channel", "token"]
    group_size: int

    def dequantize(self) -> np.ndarray:
        return dequantize(self.codes, self.params)


@dataclass(frozen=True)
class PackedWords:
    words: np.ndarray
    count: int
    bits: int = 2


# -- vectorized primitives ---------------------------------------------------

def range_params(lo, hi, bits: int):
    """Broadcasted ``(delta, zero_point, minimum)`` for ranges ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    delta = (hi - lo) / (2**bits - 1)
    constant = delta == 0
    safe = np.where(constant, 1.0, delta)
    zero = np.where(constant, 0.0, round_half_away(-lo / safe)).astype(np.int64)
    return delta, zero, lo


def quantize_array(x, delta, zero, bits: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    constant = delta == 0
    safe = np.where(constant, 1.0, delta)
    q = np.clip(round_half_away(x / safe) + zero, 0, 2**bits - 1)
    q = np.where(constant, 0, q)
    return q.astype(code_dtype(bits))


def dequantize_array(codes, delta, zero, minimum) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    x_hat = delta * (codes - zero)
    return np.where(delta == 0, minimum, x_hat)


# -- scalar-parameter API ------------------------------------------------------

def quant_params(values, bits: int) -> QuantParams:
    _check_bits(bits)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot derive quantization parameters from an empty array")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    delta, zero, lo = range_params(values.min(), values.max(), bits)
    return QuantParams(delta=float(delta), zero_point=int(zero), bits=bits, minimum=float(lo))


def quantize(values, params: QuantParams) -> np.ndarray:
    return quantize_array(values, params.delta, params.zero_point, params.bits)


def dequantize(codes, params: QuantParams) -> np.ndarray:
    return dequantize_array(codes, params.delta, params.zero_point, params.minimum)


# -- grouped quantization ------------------------------------------------------

@dataclass
class GroupedCodes:
    """Codes plus per-group parameters for a whole array.

    ``axis == "channel"``: groups run along tokens (axis 0) for each
    channel, params have shape ``(S // G, *rest)``.
    ``axis == "token"``: groups run along the last axis, params have
    shape ``(*lead, d // G)``.
    """

    codes: np.ndarray
    delta: np.ndarray
    zero: np.ndarray
    minimum: np.ndarray
    axis: Literal["channel", "token"]
    group_size: int
    bits: int

    def dequantize(self) -> np.ndarray:
        g = self.group_size
        if self.axis == "channel":
            s = self.codes.shape[0]
            shaped = self.codes.reshape(s // g, g, *self.codes.shape[1:])
            out = dequantize_array(shaped, self.delta[:, None], self.zero[:, None],
                                   self.minimum[:, None])
        else:
            d = self.codes.shape[-1]
            shaped = self.codes.reshape(*self.codes.shape[:-1], d // g, g)
            out = dequantize_array(shaped, self.delta[..., None], self.zero[..., None],
                                   self.minimum[..., None])
        return out.reshape(self.codes.shape)


def quantize_channel_groups(x, group_size: int, bits: int) -> GroupedCodes:
    """Per-channel quantization with blocks of ``group_size`` consecutive tokens."""
    _check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    s = x.shape[0]
    if group_size <= 0 or s % group_size:
        raise ValueError(f"token count {s} is not divisible by group size {group_size}")
    shaped = x.reshape(s // group_size, group_size, *x.shape[1:])
    delta, zero, lo = range_params(shaped.min(axis=1), shaped.max(axis=1), bits)
    codes = quantize_array(shaped, delta[:, None], zero[:, None], bits).reshape(x.shape)
    return GroupedCodes(codes, delta, zero, lo, "channel", group_size, bits)


def quantize_token_groups(x, group_size: int, bits: int) -> GroupedCodes:
    """Per-token quantization with blocks of ``group_size`` consecutive channels."""
    _check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if group_size <= 0 or d % group_size:
        raise ValueError(f"channel count {d} is not divisible by group size {group_size}")
    shaped = x.reshape(*x.shape[:-1], d // group_size, group_size)
    delta, zero, lo = range_params(shaped.min(axis=-1), shaped.max(axis=-1), bits)
    codes = quantize_array(shaped, delta[..., None], zero[..., None], bits).reshape(x.shape)
    return GroupedCodes(codes, delta, zero, lo, "token", group_size, bits)


def _blocks(grouped: GroupedCodes) -> list[QuantBlock]:
    blocks = []
    g = grouped.group_size
    if grouped.axis == "channel":
        s, d = grouped.codes.shape
        for j in range(d):
            for gi in range(s // g):
                params = QuantParams(float(grouped.delta[gi, j]), int(grouped.zero[gi, j]),
                                     grouped.bits, float(grouped.minimum[gi, j]))
                blocks.append(QuantBlock(grouped.codes[gi * g:(gi + 1) * g, j].copy(),
                                         params, "channel", g))
    else:
        s, d = grouped.codes.shape
        for t in range(s):
            for gi in range(d // g):
                params = QuantParams(float(grouped.delta[t, gi]), int(grouped.zero[t, gi]),
                                     grouped.bits, float(grouped.minimum[t, gi]))
                blocks.append(QuantBlock(grouped.codes[t, gi * g:(gi + 1) * g].copy(),
                                         params, "token", g))
    return blocks


def group_quant_per_channel(k, group_size: int, bits: int) -> list[QuantBlock]:
    """One block per (channel, token group) of a single head's ``(S, d_h)`` keys.

    Blocks are ordered channel-major: all groups of channel 0, then channel 1, ...
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise ValueError(f"expected a (tokens, channels) slice, got shape {k.shape}")
    return _blocks(quantize_channel_groups(k, group_size, bits))


def group_quant_per_token(v, group_size: int, bits: int) -> list[QuantBlock]:
    """``d_h // G`` blocks per token of a single head's ``(S, d_h)`` values."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a (tokens, channels) slice, got shape {v.shape}")
    return _blocks(quantize_token_groups(v, group_size, bits))


# -- 2-bit packing -------------------------------------------------------------

def pack_2bit(codes) -> PackedWords:
    """Pack 2-bit codes eight to a uint16 word, code ``i`` at bits ``2*(i % 8)``."""
    codes = np.asarray(codes).ravel()
    if codes.size and (codes.min() < 0 or codes.max() > 3):
        raise ValueError("2-bit codes must lie in [0, 3]")
    count = codes.size
    padded = np.zeros(-(-count // 8) * 8, dtype=np.uint16)
    padded[:count] = codes
    lanes = padded.reshape(-1, 8)
    shifts = np.arange(0, 16, 2, dtype=np.uint16)
    words = np.bitwise_or.reduce(lanes << shifts, axis=1).astype(np.uint16)
    return PackedWords(words=words, count=count, bits=2)


def unpack_2bit(words, count: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint16).ravel()
    if count > words.size * 8:
        raise ValueError(f"{words.size} words hold at most {words.size * 8} codes, asked for {count}")
    shifts = np.arange(0, 16, 2, dtype=np.uint16)
    lanes = (words[:, None] >> shifts) & np.uint16(3)
    return lanes.ravel()[:count].astype(np.uint8)
