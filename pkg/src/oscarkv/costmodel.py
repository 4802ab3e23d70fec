"""Closed-form per-token operation counts of KV-cache key processing.

Counts exclude the attention product itself. Arithmetic operations cost one
unit each, table lookups ``lookup_weight`` units. Prefill figures are per
token times ``L``; decode figures are for one step over an ``L``-token cache.
A fast Walsh-Hadamard transform over ``d`` features split into heads of
size ``h`` costs ``d * log2(h)`` additions per transformed tensor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

METHODS = ("kivi", "quarot", "oscar", "turboquant", "turboquant_plus")
COST_COLUMNS = ("method", "prefill_munits", "decode_munits")

# symbolic forms as (prefill arith, prefill lookup, decode arith, decode lookup);
# W = d*log2(h) is one transform
FORMULAS = {
    "kivi": ("5d", "0", "5d + 2Ld", "0"),
    "quarot": ("2W + 5d", "0", "2W + 5d + 2Ld", "0"),
    "oscar": ("2W + 8d", "0", "2W + 8d + 3Ld", "0"),
    "turboquant": ("6dh + 14.5d", "0", "6dh + 14.5d + Ld", "Ld"),
    "turboquant_plus": ("4dh + 5.25d", "0", "4dh + 5.25d + Ld", "Ld"),
}


@dataclass(frozen=True)
class CostConfig:
    d: int = 4096
    h: int = 128
    L: int = 10_000
    lookup_weight: float = 5.0

    def __post_init__(self):
        if min(self.d, self.h, self.L) <= 0:
            raise ValueError("d, h and L must be positive")
        if self.h & (self.h - 1):
            raise ValueError(f"head dimension must be a power of two, got {self.h}")
        if self.lookup_weight < 0:
            raise ValueError("lookup_weight must be non-negative")

    @property
    def wht(self) -> float:
        return self.d * math.log2(self.h)


@dataclass(frozen=True)
class CostBreakdown:
    method: str
    prefill_arith: float
    prefill_lookup: float
    decode_arith: float
    decode_lookup: float
    lookup_weight: float

    @property
    def effective_prefill(self) -> float:
        return self.prefill_arith + self.lookup_weight * self.prefill_lookup

    @property
    def effective_decode(self) -> float:
        return self.decode_arith + self.lookup_weight * self.decode_lookup

    def row(self, digits: int = 1) -> tuple:
        """``(method, prefill, decode)`` in millions of units, rounded."""
        return (self.method, round(self.effective_prefill / 1e6, digits),
                round(self.effective_decode / 1e6, digits))


def method_cost(method: str, cfg: CostConfig | None = None) -> CostBreakdown:
    cfg = cfg or CostConfig()
    d, h, L, w = cfg.d, cfg.h, cfg.L, cfg.wht
    if method == "kivi":
        per_token, step, lookups = 5 * d, 5 * d + 2 * L * d, 0
    elif method == "quarot":
        per_token, step, lookups = 2 * w + 5 * d, 2 * w + 5 * d + 2 * L * d, 0
    elif method == "oscar":
        per_token, step, lookups = 2 * w + 8 * d, 2 * w + 8 * d + 3 * L * d, 0
    elif method == "turboquant":
        per_token = 6 * d * h + 14.5 * d
        step, lookups = per_token + L * d, L * d
    elif method == "turboquant_plus":
        per_token = 4 * d * h + 5.25 * d
        step, lookups = per_token + L * d, L * d
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return CostBreakdown(method=method, prefill_arith=float(per_token * L), prefill_lookup=0.0,
                         decode_arith=float(step), decode_lookup=float(lookups),
                         lookup_weight=cfg.lookup_weight)


def cost_table(methods=METHODS, cfg: CostConfig | None = None) -> list[CostBreakdown]:
    return [method_cost(m, cfg) for m in methods]


@dataclass(frozen=True)
class ParetoRow:
    method: str
    decode_cost: float
    score: float
    dominated: bool


def pareto_table(methods, cfg: CostConfig | None, accuracy: dict[str, float]) -> list[ParetoRow]:
    """Join decode cost with externally supplied accuracy, cheapest first.

    A row is dominated when another row is no more expensive and no less
    accurate, and strictly better on one of the two. Methods without a score
    are dropped with a warning.
    """
    joined = []
    for m in methods:
        if m not in accuracy:
            warnings.warn(f"no accuracy score for {m!r}; row omitted", stacklevel=2)
            continue
        joined.append((m, method_cost(m, cfg).effective_decode, float(accuracy[m])))
    rows = []
    for m, cost, score in joined:
        dominated = any(c2 <= cost and s2 >= score and (c2 < cost or s2 > score)
                        for m2, c2, s2 in joined if m2 != m)
        rows.append(ParetoRow(m, cost, score, dominated))
    return sorted(rows, key=lambda r: (r.decode_cost, r.method))
