"""Token-norm profiling, per-block quantization error bounds and RTN error studies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import as_tensor3, token_norms
from .quant import ALLOWED_BITS, quantize_channel_groups, quantize_token_groups

STATE_TAGS = ("query", "key", "value")
TNI_COLUMNS = ("token", "state", "min", "median", "max", "mean")
ERROR_COLUMNS = ("bits", "condition", "axis", "mse_x100")
CONDITIONS = ("with-outliers", "without-outliers", "mixed-modality", "single-modality")
AXES = ("per-channel-k", "per-token-v")


# -- token norm profile ----------------------------------------------------------

@dataclass
class TniProfile:
    """Per-token statistics of the head-wise L2 norms of one state tensor."""

    state: str
    min: np.ndarray
    median: np.ndarray
    max: np.ndarray
    mean: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.min.shape[0]

    def rows(self) -> list[tuple]:
        return [(t, self.state, float(self.min[t]), float(self.median[t]),
                 float(self.max[t]), float(self.mean[t])) for t in range(self.n_tokens)]

    def imbalance(self) -> float:
        """Largest over smallest per-token mean norm (inf if any token is zero)."""
        lo = float(self.mean.min()) if self.n_tokens else 0.0
        return math.inf if lo == 0 else float(self.mean.max()) / lo


def tni_profile(x, state: str = "key") -> TniProfile:
    state = state.lower()
    aliases = {"q": "query", "k": "key", "v": "value"}
    state = aliases.get(state, state)
    if state not in STATE_TAGS:
        raise ValueError(f"state must be one of {STATE_TAGS}, got {state!r}")
    norms = token_norms(as_tensor3(x))
    return TniProfile(state=state, min=norms.min(axis=1), median=np.median(norms, axis=1),
                      max=norms.max(axis=1), mean=norms.mean(axis=1))


# -- error bounds for one per-channel block ----------------------------------------

def _block(block) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] == 0:
        raise ValueError(f"expected a non-empty (tokens, channels) block, got shape {block.shape}")
    return block


def mse_lower_bound(block, bits: int) -> float:
    """``(|k_m| - |k_n|)^2 / (12 (2^b - 1)^2)`` for the largest- and smallest-norm rows."""
    block = _block(block)
    norms = np.linalg.norm(block, axis=1)
    return float((norms.max() - norms.min()) ** 2 / (12 * (2**bits - 1) ** 2))


def pairwise_bound(block, bits: int) -> float:
    """``|k_m - k_n|^2 / (12 (2^b - 1)^2)``, the step before the reverse triangle inequality."""
    block = _block(block)
    norms = np.linalg.norm(block, axis=1)
    diff = block[int(norms.argmax())] - block[int(norms.argmin())]
    return float(diff @ diff / (12 * (2**bits - 1) ** 2))


def block_model_mse(block, bits: int) -> float:
    """Uniform-noise error model: sum over channels of ``delta_j^2 / 12``.

    ``delta_j`` is the measured step of channel ``j`` over the block, so this
    is the per-token reconstruction error the bound reasons about.
    """
    block = _block(block)
    delta = (block.max(axis=0) - block.min(axis=0)) / (2**bits - 1)
    return float(np.sum(delta**2) / 12)


def block_rtn_mse(block, bits: int) -> float:
    """Actual per-channel RTN error: mean over tokens of the squared error summed over channels."""
    block = _block(block)
    grouped = quantize_channel_groups(block, block.shape[0], bits)
    err = grouped.dequantize() - block
    return float(np.mean(np.sum(err**2, axis=1)))


# -- RTN error study ------------------------------------------------------------------

@dataclass
class ErrorCell:
    bits: int
    condition: str
    axis: str
    mse_x100: float


@dataclass
class ErrorReport:
    cells: list[ErrorCell] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        return [(c.bits, c.condition, c.axis, c.mse_x100) for c in self.cells]

    def get(self, bits: int, condition: str, axis: str) -> float:
        for c in self.cells:
            if (c.bits, c.condition, c.axis) == (bits, condition, axis):
                return c.mse_x100
        raise KeyError((bits, condition, axis))


def _k_sq_error(x: np.ndarray, group_size: int, bits: int) -> np.ndarray:
    """Squared per-channel RTN error of a ``(S, H, d)`` slice, groups of ``group_size`` tokens."""
    return (quantize_channel_groups(x, group_size, bits).dequantize() - x) ** 2


def _v_sq_error(x: np.ndarray, group_size: int, bits: int) -> np.ndarray:
    return (quantize_token_groups(x, group_size, bits).dequantize() - x) ** 2


def error_study(data, bits=(2, 3, 4), group_size: int = 32, outlier_tokens=(),
                modality_blocks=(), value_group_size: int | None = None) -> ErrorReport:
    """RTN reconstruction error (mean squared error x 100) under each condition.

    Keys are quantized per channel in groups of ``group_size`` tokens, values
    per token in groups of ``value_group_size`` channels (default
    ``group_size``). Outlier conditions compare the token groups that
    contain ``outlier_tokens`` with and without those rows. Modality
    conditions compare grouping across the whole sequence with grouping
    inside each ``(start, end)`` block, measured over the covered tokens.
    """
    x = as_tensor3(data)
    s, _, d = x.shape
    vg = group_size if value_group_size is None else value_group_size
    for b in bits:
        if b not in ALLOWED_BITS:
            raise ValueError(f"bits must be drawn from {ALLOWED_BITS}, got {b}")
    if group_size <= 0 or s % group_size:
        raise ValueError(f"token count {s} is not divisible by group size {group_size}")
    if vg <= 0 or d % vg:
        raise ValueError(f"head dim {d} is not divisible by value group size {vg}")
    outliers = sorted({int(t) for t in outlier_tokens})
    if any(not 0 <= t < s for t in outliers):
        raise ValueError(f"outlier token indices must lie in [0, {s})")
    blocks = [(int(lo), int(hi)) for lo, hi, *_ in modality_blocks]
    for lo, hi in blocks:
        if not 0 <= lo < hi <= s:
            raise ValueError(f"modality block ({lo}, {hi}) outside [0, {s}]")
        if (hi - lo) % group_size:
            raise ValueError(f"modality block ({lo}, {hi}) of length {hi - lo} is not divisible "
                             f"by group size {group_size}")

    out_set = set(outliers)
    affected = [g for g in range(s // group_size)
                if out_set & set(range(g * group_size, (g + 1) * group_size))]
    report = ErrorReport()
    for b in bits:
        k_err = _k_sq_error(x, group_size, b)
        v_err = _v_sq_error(x, vg, b)
        if affected:
            k_with, k_without, v_with, v_without = [], [], [], []
            for g in affected:
                rows = np.arange(g * group_size, (g + 1) * group_size)
                keep = np.array([t for t in rows if t not in out_set])
                k_with.append(k_err[rows])
                v_with.append(v_err[rows])
                if keep.size:
                    kept = x[keep]
                    k_without.append(_k_sq_error(kept, keep.size, b))
                    v_without.append(v_err[keep])
            k_w = float(np.mean(np.concatenate(k_with)))
            v_w = float(np.mean(np.concatenate(v_with)))
            k_wo = float(np.mean(np.concatenate(k_without))) if k_without else 0.0
            v_wo = float(np.mean(np.concatenate(v_without))) if v_without else 0.0
        else:
            k_w = k_wo = float(np.mean(k_err))
            v_w = v_wo = float(np.mean(v_err))
        report.cells += [ErrorCell(b, "with-outliers", "per-channel-k", 100 * k_w),
                         ErrorCell(b, "without-outliers", "per-channel-k", 100 * k_wo),
                         ErrorCell(b, "with-outliers", "per-token-v", 100 * v_w),
                         ErrorCell(b, "without-outliers", "per-token-v", 100 * v_wo)]
        if blocks:
            covered = np.concatenate([np.arange(a, e) for a, e in blocks])
            k_single = np.concatenate([_k_sq_error(x[a:e], group_size, b) for a, e in blocks])
            report.cells += [
                ErrorCell(b, "mixed-modality", "per-channel-k", 100 * float(np.mean(k_err[covered]))),
                ErrorCell(b, "single-modality", "per-channel-k", 100 * float(np.mean(k_single))),
                # per-token groups never cross tokens, so both groupings coincide
                ErrorCell(b, "mixed-modality", "per-token-v", 100 * float(np.mean(v_err[covered]))),
                ErrorCell(b, "single-modality", "per-token-v", 100 * float(np.mean(v_err[covered]))),
            ]
    return report


# -- scaling artifact worked example ------------------------------------------------------

@dataclass(frozen=True)
class ArtifactDemo:
    a: np.ndarray
    b: np.ndarray
    target_norm: float
    norm_a: float
    norm_b: float
    alpha: float
    beta: float
    a_scaled: np.ndarray
    b_scaled: np.ndarray
    outlier_channel: int
    bits: int
    range_before: np.ndarray
    range_after: np.ndarray
    step_inflation: np.ndarray

    @property
    def condition_holds(self) -> bool:
        """``alpha * c`` dominates ``beta * max_{j != d} a_j`` (taken as at least 10x)."""
        others = np.delete(self.a, self.outlier_channel)
        c = float(np.min(self.b))
        return self.alpha * c >= 10 * self.beta * float(np.max(np.abs(others)))

    def lines(self) -> list[str]:
        fmt = lambda v: "[" + ", ".join(f"{x:.4f}" for x in v) + "]"
        return [
            f"a = {fmt(self.a)}",
            f"b = {fmt(self.b)}",
            f"|a| = {self.norm_a:.4f}",
            f"|b| = {self.norm_b:.4f}",
            f"beta = N/|a| = {self.beta:.6f}",
            f"alpha = N/|b| = {self.alpha:.6f}",
            f"a' = {fmt(self.a_scaled)}",
            f"b' = {fmt(self.b_scaled)}",
            f"artifact condition alpha*c >> beta*max a_j: {self.condition_holds}",
            "channel,range_a',range_a'+b',step_inflation",
            *(f"{j + 1},{self.range_before[j]:.6f},{self.range_after[j]:.6f},{self.step_inflation[j]:.2f}"
              for j in range(self.a.size) if j != self.outlier_channel),
        ]


def artifact_demo(a=(1.0, 1.0, 1.0, 100.0), b=(0.1, 0.1, 0.1, 0.1), target_norm: float = 1.0,
                  bits: int = 2) -> ArtifactDemo:
    """Scale a normal token and a low-norm token to one norm and compare channel ranges.

    A channel's dynamic range is measured as its largest magnitude, so its
    ``bits``-bit step is ``range / (2**bits - 1)`` and the inflation is the
    ratio of the ranges with and without the scaled low-norm token.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    beta, alpha = target_norm / norm_a, target_norm / norm_b
    a_s, b_s = beta * a, alpha * b
    levels = 2**bits - 1
    before = np.abs(a_s)
    after = np.maximum(np.abs(a_s), np.abs(b_s))
    inflation = (after / levels) / (before / levels)
    return ArtifactDemo(a=a, b=b, target_norm=target_norm, norm_a=norm_a, norm_b=norm_b,
                        alpha=alpha, beta=beta, a_scaled=a_s, b_scaled=b_s,
                        outlier_channel=int(np.argmax(np.abs(a))), bits=bits,
                        range_before=before, range_after=after, step_inflation=inflation)
