"""Single-layer attention over a quantized KV cache: OScaR and its baselines.

Methods (``PipelineConfig.method``):

``fp``           no quantization, reference path
``kivi``         per-channel K / per-token V quantization, no transforms
``rotate-only``  Hadamard on Q and K before quantization
``scale-only``   per-token K scaling before quantization, norms restored at the logits
``oscar``        Hadamard on Q and K, then per-token K scaling

For ``oscar`` the value-side Hadamard is folded into ``W_V``/``W_O`` by
:func:`preprocess`; at the state level :func:`simulate` applies it explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .cache import KvCache, PipelineConfig
from .core import DimensionError, as_tensor3, make_rng, token_norms
from .hadamard import block_hadamard, fht, is_power_of_two

SCALE_EPS = 1e-12


class StateError(RuntimeError):
    """Operation not allowed in the current model or cache state."""


@dataclass(frozen=True)
class ModelStub:
    """Projection weights of one attention layer; ``hidden @ W`` convention."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    num_heads: int
    head_dim: int
    preprocessed: bool = False

    def __post_init__(self):
        width = self.num_heads * self.head_dim
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape[1] != width:
                raise DimensionError(f"{name} must be (d_model, {width}), got {w.shape}")
        if self.w_o.shape != (width, self.w_q.shape[0]):
            raise DimensionError(f"w_o must be ({width}, {self.w_q.shape[0]}), got {self.w_o.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random(cls, d_model: int, num_heads: int, head_dim: int, seed: int = 0) -> "ModelStub":
        rng = make_rng(seed)
        width = num_heads * head_dim
        scale = 1.0 / math.sqrt(d_model)
        w = [rng.standard_normal((d_model, width)) * scale for _ in range(3)]
        w_o = rng.standard_normal((width, d_model)) / math.sqrt(width)
        return cls(*w, w_o, num_heads=num_heads, head_dim=head_dim)


def preprocess(model: ModelStub) -> ModelStub:
    """Fold the per-head value Hadamard into ``W_V`` and ``W_O``."""
    if model.preprocessed:
        raise StateError("model weights are already preprocessed")
    if not is_power_of_two(model.head_dim):
        raise ValueError(f"head_dim {model.head_dim} is not a power of two")
    h = block_hadamard(model.num_heads, model.head_dim)
    return replace(model, w_v=model.w_v @ h, w_o=h @ model.w_o, preprocessed=True)


# -- token scaling -------------------------------------------------------------

class ScaleResult(NamedTuple):
    scaled: np.ndarray
    norms: np.ndarray
    degenerate: np.ndarray


def fast_rsqrt(x) -> np.ndarray:
    """Approximate ``1/sqrt(x)`` for ``x > 0``.

    Seeds with a single-precision reciprocal square root (the accuracy of a
    GPU ``rsqrt`` instruction, about 1e-7 relative) and applies one
    Newton-Raphson step in double precision, which brings the relative
    error well below 1e-6. The exponent is split off first so inputs
    outside the float32 range still work.
    """
    x = np.asarray(x, dtype=np.float64)
    mant, expo = np.frexp(x)
    odd = expo % 2
    mant = mant * np.where(odd, 2.0, 1.0)
    half = (expo - odd) // 2
    seed = (np.float32(1.0) / np.sqrt(mant.astype(np.float32))).astype(np.float64)
    seed = seed * (1.5 - 0.5 * mant * seed * seed)
    return np.ldexp(seed, -half)


def omni_token_scale(k, strategy: str = "l2") -> ScaleResult:
    """Divide every (token, head) vector by its scale; zero vectors get ``1e-12``."""
    k = as_tensor3(k, "keys")
    if strategy == "l2":
        norms = token_norms(k)
    elif strategy == "rsqrt":
        sumsq = np.sum(np.square(k), axis=-1)
        safe = np.where(sumsq > 0, sumsq, 1.0)
        norms = np.where(sumsq > 0, 1.0 / fast_rsqrt(safe), 0.0)
    elif strategy == "max":
        norms = np.max(np.abs(k), axis=-1)
    elif strategy == "mean-abs":
        norms = np.mean(np.abs(k), axis=-1)
    else:
        raise ValueError(f"unknown scaling strategy {strategy!r}")
    degenerate = norms <= 0
    norms = np.where(degenerate, SCALE_EPS, norms)
    return ScaleResult(k / norms[..., None], norms, degenerate)


# -- attention -----------------------------------------------------------------

def attention_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scaled dot products, shape ``(H, T, S)``."""
    return np.einsum("thd,shd->hts", q, k) / math.sqrt(q.shape[-1])


def attention(q, k, v, causal: bool = False, return_logits: bool = False):
    """Softmax attention per head for ``T`` queries over ``S`` keys.

    With ``causal`` the queries are the last ``T`` positions of the key
    sequence and query ``i`` sees keys ``0 .. S - T + i``.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[1:] != k.shape[1:] or k.shape != v.shape:
        raise DimensionError(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    t, s = q.shape[0], k.shape[0]
    logits = attention_logits(q, k)
    if causal:
        if t > s:
            raise DimensionError("more queries than keys under a causal mask")
        allowed = np.arange(s)[None, :] <= (np.arange(t)[:, None] + s - t)
        logits = np.where(allowed[None], logits, -np.inf)
    if s == 0:
        out = np.zeros_like(q)
    else:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        weights = np.exp(shifted)
        weights /= weights.sum(axis=-1, keepdims=True)
        out = np.einsum("hts,shd->thd", weights, v)
    return (out, logits) if return_logits else out


# -- state-level pipeline --------------------------------------------------------

def transform_query(q: np.ndarray, config: PipelineConfig) -> np.ndarray:
    return fht(q) if config.rotates else q


def transform_key(k: np.ndarray, config: PipelineConfig) -> ScaleResult:
    if config.rotates:
        k = fht(k)
    if config.scales:
        return omni_token_scale(k, config.scaling)
    ones = np.ones(k.shape[:2])
    return ScaleResult(k, ones, np.zeros(k.shape[:2], dtype=bool))


@dataclass
class StepOutput:
    attn_out: np.ndarray
    logits: np.ndarray | None = None
    output: np.ndarray | None = None


def _check_states(config: PipelineConfig, *tensors) -> list[np.ndarray]:
    out = []
    for name, x in zip("qkv", tensors):
        x = as_tensor3(x, name)
        if x.shape[1:] != (config.num_heads, config.head_dim):
            raise DimensionError(
                f"{name} per-token shape {x.shape[1:]} does not match config "
                f"({config.num_heads}, {config.head_dim})")
        out.append(x)
    if len({x.shape[0] for x in out}) != 1:
        raise DimensionError("q, k and v must have the same token count")
    return out


def prefill_states(q, k, v, config: PipelineConfig) -> tuple[KvCache, np.ndarray]:
    """Causal attention over the prompt, then fill an empty cache."""
    q, k, v = _check_states(config, q, k, v)
    qt = transform_query(q, config)
    kt = transform_key(k, config)
    out = attention(qt, kt.scaled * kt.norms[..., None], v, causal=True)
    cache = KvCache(config)
    cache.buffer_quant_k(kt.scaled, kt.norms)
    cache.buffer_quant_v(v)
    return cache, out


def decode_states(cache: KvCache, q_t, k_t, v_t, config: PipelineConfig) -> StepOutput:
    """Attend one new token over the cache plus itself, then append it."""
    if cache.config != config:
        raise StateError("cache was built with a different configuration")
    q_t, k_t, v_t = _check_states(config, q_t, k_t, v_t)
    qt = transform_query(q_t, config)
    kt = transform_key(k_t, config)
    k_all = np.concatenate([cache.materialize_k(), kt.scaled * kt.norms[..., None]])
    v_all = np.concatenate([cache.materialize_v(), v_t])
    out, logits = attention(qt, k_all, v_all, causal=True, return_logits=True)
    cache.buffer_quant_k(kt.scaled, kt.norms)
    cache.buffer_quant_v(v_t)
    return StepOutput(out, logits)


# -- model-level pipeline --------------------------------------------------------

def project(model: ModelStub, hidden) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[1] != model.d_model:
        raise DimensionError(f"hidden must be (S, {model.d_model}), got {hidden.shape}")
    shape = (hidden.shape[0], model.num_heads, model.head_dim)
    return tuple((hidden @ w).reshape(shape) for w in (model.w_q, model.w_k, model.w_v))


def _check_model(model: ModelStub, config: PipelineConfig) -> None:
    if (model.num_heads, model.head_dim) != (config.num_heads, config.head_dim):
        raise StateError("model head layout does not match the config")


def _merge_heads(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], x.shape[1] * x.shape[2])


def prefill(model: ModelStub, hidden, config: PipelineConfig) -> tuple[KvCache, np.ndarray]:
    """Run the prompt; returns the filled cache and ``(S, d_model)`` outputs."""
    _check_model(model, config)
    q, k, v = project(model, hidden)
    cache, attn = prefill_states(q, k, v, config)
    return cache, _merge_heads(attn) @ model.w_o


def decode_step(model: ModelStub, cache: KvCache, hidden_t,
                config: PipelineConfig) -> tuple[KvCache, StepOutput]:
    _check_model(model, config)
    q, k, v = project(model, np.atleast_2d(hidden_t))
    if q.shape[0] != 1:
        raise DimensionError("decode_step takes exactly one token")
    step = decode_states(cache, q, k, v, config)
    step.output = _merge_heads(step.attn_out) @ model.w_o
    return cache, step


def reference_forward(model: ModelStub, hidden) -> np.ndarray:
    """Full-precision causal attention with no transforms, ``(S, d_model)``."""
    q, k, v = project(model, hidden)
    return _merge_heads(attention(q, k, v, causal=True)) @ model.w_o


# -- simulation against the full-precision oracle -------------------------------

@dataclass
class SimulationResult:
    config: PipelineConfig
    prefill_len: int
    decode_steps: int
    outputs: np.ndarray
    reference: np.ndarray
    logit_mse: float
    output_mse: float
    prefill_output_mse: float
    memory: dict = field(default_factory=dict)
    flushes: int = 0
    residual_tokens: int = 0
    packed_tokens: int = 0


def simulate(q, k, v, config: PipelineConfig, prefill_len: int,
             rotate_values: bool | None = None) -> SimulationResult:
    """Prefill ``prefill_len`` tokens, decode the rest one by one, compare with fp.

    Errors are measured on the per-head attention outputs of the decode
    steps (value-space, after undoing any value rotation) and on their
    logits. The oracle calls :func:`attention` on exactly the same shapes,
    so the ``fp`` method matches it bit for bit.
    """
    q, k, v = _check_states(config, q, k, v)
    total = q.shape[0]
    if not 0 <= prefill_len <= total:
        raise ValueError(f"prefill_len {prefill_len} outside [0, {total}]")
    if rotate_values is None:
        rotate_values = config.method == "oscar"
    if rotate_values and not is_power_of_two(config.head_dim):
        raise ValueError("value rotation needs a power-of-two head_dim")
    vv = fht(v) if rotate_values else v

    cache, pre_out = prefill_states(q[:prefill_len], k[:prefill_len], vv[:prefill_len], config)
    if rotate_values:
        pre_out = fht(pre_out)
    pre_ref = attention(q[:prefill_len], k[:prefill_len], v[:prefill_len], causal=True)

    outs, refs, logit_err = [], [], []
    for t in range(prefill_len, total):
        step = decode_states(cache, q[t:t + 1], k[t:t + 1], vv[t:t + 1], config)
        out = fht(step.attn_out) if rotate_values else step.attn_out
        ref, ref_logits = attention(q[t:t + 1], k[:t + 1], v[:t + 1], causal=True, return_logits=True)
        outs.append(out)
        refs.append(ref)
        logit_err.append(np.mean((step.logits - ref_logits) ** 2))
    steps = total - prefill_len
    h, d = config.num_heads, config.head_dim
    outputs = np.concatenate(outs) if outs else np.zeros((0, h, d))
    reference = np.concatenate(refs) if refs else np.zeros((0, h, d))
    return SimulationResult(
        config=config,
        prefill_len=prefill_len,
        decode_steps=steps,
        outputs=outputs,
        reference=reference,
        logit_mse=float(np.mean(logit_err)) if logit_err else 0.0,
        output_mse=float(np.mean((outputs - reference) ** 2)) if steps else 0.0,
        prefill_output_mse=float(np.mean((pre_out - pre_ref) ** 2)) if prefill_len else 0.0,
        memory=cache.memory_report(),
        flushes=cache.flush_count,
        residual_tokens=cache.residual_len,
        packed_tokens=cache.packed_len,
    )
