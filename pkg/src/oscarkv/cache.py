"""Quantized KV cache with high-precision residual windows.

Keys are stored per-channel quantized in blocks of ``group_size`` tokens,
values per-token quantized in blocks of ``group_size`` channels. Up to
``residual_len - 1`` of the most recent tokens stay in float64 until a
whole residual block can be flushed. Keys carry one norm per
(token, head); materialization multiplies it back in.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import as_tensor3, empty_tensor3
from .hadamard import is_power_of_two
from .quant import (
    ALLOWED_BITS,
    code_dtype,
    dequantize_array,
    pack_2bit,
    quantize_channel_groups,
    quantize_token_groups,
    unpack_2bit,
)

METHODS = ("fp", "kivi", "rotate-only", "scale-only", "oscar")
SCALINGS = ("l2", "rsqrt", "max", "mean-abs")

DUMP_MAGIC = b"KVC1"


class CacheInvariantError(RuntimeError):
    """The cache reached a state the flush logic should make impossible."""


@dataclass(frozen=True)
class PipelineConfig:
    method: str = "oscar"
    bits: int = 2
    group_size: int = 32
    residual_len: int = 128
    scaling: str = "l2"
    head_dim: int = 128
    num_heads: int = 1
    quantize: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {self.scaling!r}; choose from {SCALINGS}")
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.group_size <= 0 or self.residual_len <= 0:
            raise ValueError("group_size and residual_len must be positive")
        if self.num_heads <= 0 or self.head_dim <= 0:
            raise ValueError("num_heads and head_dim must be positive")
        if self.residual_len % self.group_size:
            raise ValueError(
                f"residual_len {self.residual_len} must be a multiple of group_size {self.group_size}")
        if self.quantizes and self.head_dim % self.group_size:
            raise ValueError(
                f"head_dim {self.head_dim} must be a multiple of group_size {self.group_size}")
        if self.rotates and not is_power_of_two(self.head_dim):
            raise ValueError(f"method {self.method} rotates, so head_dim must be a power of two")

    @property
    def rotates(self) -> bool:
        return self.method in ("oscar", "rotate-only")

    @property
    def scales(self) -> bool:
        return self.method in ("oscar", "scale-only")

    @property
    def quantizes(self) -> bool:
        return self.method != "fp" and self.quantize

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PackedChunk:
    """One flushed span of tokens, quantized (or kept raw when quantization is off)."""

    shape: tuple
    axis: str
    group_size: int
    bits: int
    payload: np.ndarray
    delta: np.ndarray | None = None
    zero: np.ndarray | None = None
    minimum: np.ndarray | None = None

    @classmethod
    def from_values(cls, x: np.ndarray, axis: str, group_size: int, bits: int,
                    quantize: bool = True) -> "PackedChunk":
        if not quantize:
            return cls(x.shape, axis, group_size, 64, x.copy())
        if axis == "channel":
            grouped = quantize_channel_groups(x, group_size, bits)
        else:
            grouped = quantize_token_groups(x, group_size, bits)
        payload = pack_2bit(grouped.codes).words if bits == 2 else grouped.codes
        return cls(x.shape, axis, group_size, bits, payload,
                   grouped.delta, grouped.zero, grouped.minimum)

    @property
    def n_tokens(self) -> int:
        return self.shape[0]

    @property
    def is_raw(self) -> bool:
        return self.delta is None

    def codes(self) -> np.ndarray:
        if self.is_raw:
            raise ValueError("raw chunk has no codes")
        if self.bits == 2:
            return unpack_2bit(self.payload, int(np.prod(self.shape))).reshape(self.shape)
        return self.payload

    def dequantize(self) -> np.ndarray:
        if self.is_raw:
            return self.payload
        g = self.group_size
        codes = self.codes()
        if self.axis == "channel":
            s = self.shape[0]
            shaped = codes.reshape(s // g, g, *self.shape[1:])
            out = dequantize_array(shaped, self.delta[:, None], self.zero[:, None],
                                   self.minimum[:, None])
        else:
            d = self.shape[-1]
            shaped = codes.reshape(*self.shape[:-1], d // g, g)
            out = dequantize_array(shaped, self.delta[..., None], self.zero[..., None],
                                   self.minimum[..., None])
        return out.reshape(self.shape)

    def payload_bits(self) -> int:
        return int(np.prod(self.shape)) * self.bits


class KvCache:
    """Cache state for one attention layer (all heads).

    Update methods mutate the instance and return it; callers own exclusive
    access during an update.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        h, d = config.num_heads, config.head_dim
        self.k_chunks: list[PackedChunk] = []
        self.v_chunks: list[PackedChunk] = []
        self.k_norms_grouped = np.zeros((0, h))
        self.k_residual = empty_tensor3(h, d)
        self.k_norms_residual = np.zeros((0, h))
        self.v_residual = empty_tensor3(h, d)
        self.k_flushes = 0
        self.v_flushes = 0

    # -- sizes ---------------------------------------------------------------

    @property
    def packed_len(self) -> int:
        return sum(c.n_tokens for c in self.k_chunks)

    @property
    def packed_v_len(self) -> int:
        return sum(c.n_tokens for c in self.v_chunks)

    @property
    def residual_len(self) -> int:
        return self.k_residual.shape[0]

    @property
    def seq_len(self) -> int:
        return self.packed_len + self.residual_len

    @property
    def flush_count(self) -> int:
        return self.k_flushes

    def _k_empty(self) -> bool:
        return not self.k_chunks and self.k_residual.shape[0] == 0

    def _v_empty(self) -> bool:
        return not self.v_chunks and self.v_residual.shape[0] == 0

    def _check_shape(self, x: np.ndarray, name: str) -> np.ndarray:
        x = as_tensor3(x, name)
        want = (self.config.num_heads, self.config.head_dim)
        if x.shape[1:] != want:
            raise ValueError(f"{name} has per-token shape {x.shape[1:]}, cache expects {want}")
        return x

    # -- updates ---------------------------------------------------------------

    def buffer_quant_k(self, new_k, new_norms) -> "KvCache":
        """Store already rotated and normalized keys with their norms."""
        cfg = self.config
        new_k = self._check_shape(new_k, "new_k")
        new_norms = np.asarray(new_norms, dtype=np.float64)
        if new_norms.shape != new_k.shape[:2]:
            raise ValueError(f"norms shape {new_norms.shape} does not match keys {new_k.shape[:2]}")
        r_len = cfg.residual_len
        if self._k_empty():
            s = new_k.shape[0]
            split = s - s % r_len
            if split:
                self.k_chunks.append(PackedChunk.from_values(
                    new_k[:split], "channel", cfg.group_size, cfg.bits, cfg.quantizes))
                self.k_norms_grouped = new_norms[:split].copy()
            self.k_residual = new_k[split:].copy()
            self.k_norms_residual = new_norms[split:].copy()
            return self
        self.k_residual = np.concatenate([self.k_residual, new_k])
        self.k_norms_residual = np.concatenate([self.k_norms_residual, new_norms])
        while self.k_residual.shape[0] >= r_len:
            block, self.k_residual = self.k_residual[:r_len], self.k_residual[r_len:]
            norms, self.k_norms_residual = self.k_norms_residual[:r_len], self.k_norms_residual[r_len:]
            self.k_chunks.append(PackedChunk.from_values(
                block, "channel", cfg.group_size, cfg.bits, cfg.quantizes))
            self.k_norms_grouped = np.concatenate([self.k_norms_grouped, norms])
            self.k_flushes += 1
        if self.k_residual.shape[0] >= r_len:
            raise CacheInvariantError("key residual exceeded the residual length")
        return self

    def buffer_quant_v(self, new_v) -> "KvCache":
        cfg = self.config
        new_v = self._check_shape(new_v, "new_v")
        r_len = cfg.residual_len
        if self._v_empty():
            s = new_v.shape[0]
            split = s - s % r_len
            if split:
                self.v_chunks.append(PackedChunk.from_values(
                    new_v[:split], "token", cfg.group_size, cfg.bits, cfg.quantizes))
            self.v_residual = new_v[split:].copy()
            return self
        self.v_residual = np.concatenate([self.v_residual, new_v])
        while self.v_residual.shape[0] >= r_len:
            block, self.v_residual = self.v_residual[:r_len], self.v_residual[r_len:]
            self.v_chunks.append(PackedChunk.from_values(
                block, "token", cfg.group_size, cfg.bits, cfg.quantizes))
            self.v_flushes += 1
        if self.v_residual.shape[0] >= r_len:
            raise CacheInvariantError("value residual exceeded the residual length")
        return self

    # -- reads ---------------------------------------------------------------

    def dequantized_k(self) -> np.ndarray:
        """Packed keys without their norms (the unit directions for scaled methods)."""
        if not self.k_chunks:
            return empty_tensor3(self.config.num_heads, self.config.head_dim)
        return np.concatenate([c.dequantize() for c in self.k_chunks])

    def materialize_k(self) -> np.ndarray:
        packed = self.dequantized_k() * self.k_norms_grouped[..., None]
        residual = self.k_residual * self.k_norms_residual[..., None]
        return np.concatenate([packed, residual])

    def materialize_v(self) -> np.ndarray:
        parts = [c.dequantize() for c in self.v_chunks] + [self.v_residual]
        return np.concatenate(parts)

    # -- bookkeeping ---------------------------------------------------------

    def check_invariants(self) -> None:
        cfg = self.config
        if self.residual_len != self.v_residual.shape[0]:
            raise CacheInvariantError("key and value residual lengths differ")
        if self.residual_len >= cfg.residual_len:
            raise CacheInvariantError("residual is not below the residual length at rest")
        if self.packed_len % cfg.residual_len or self.packed_len != self.packed_v_len:
            raise CacheInvariantError("packed token count is not a whole number of residual blocks")
        if self.k_norms_grouped.shape[0] != self.packed_len:
            raise CacheInvariantError("one norm per packed key token is required")
        if np.any(self.k_norms_grouped <= 0) or np.any(self.k_norms_residual <= 0):
            raise CacheInvariantError("key norms must be positive")

    def memory_report(self) -> dict:
        """Storage accounting in bits; parameters and norms counted at 64 bits each."""
        cfg = self.config
        h, d = cfg.num_heads, cfg.head_dim
        k_params = sum(c.delta.size for c in self.k_chunks if not c.is_raw)
        v_params = sum(c.delta.size for c in self.v_chunks if not c.is_raw)
        report = {
            "packed_tokens": self.packed_len,
            "residual_tokens": self.residual_len,
            "packed_k_payload_bits": sum(c.payload_bits() for c in self.k_chunks),
            "packed_v_payload_bits": sum(c.payload_bits() for c in self.v_chunks),
            # delta, zero point and minimum per group
            "k_param_bits": 3 * 64 * k_params,
            "v_param_bits": 3 * 64 * v_params,
            "k_norm_bits": 64 * (self.packed_len + self.residual_len) * h,
            "k_residual_bits": 64 * self.residual_len * h * d,
            "v_residual_bits": 64 * self.residual_len * h * d,
        }
        report["total_bits"] = sum(v for k, v in report.items() if k.endswith("_bits"))
        report["fp64_equivalent_bits"] = 2 * 64 * self.seq_len * h * d
        return report

    def copy(self) -> "KvCache":
        other = KvCache(self.config)
        other.k_chunks = list(self.k_chunks)
        other.v_chunks = list(self.v_chunks)
        other.k_norms_grouped = self.k_norms_grouped.copy()
        other.k_residual = self.k_residual.copy()
        other.k_norms_residual = self.k_norms_residual.copy()
        other.v_residual = self.v_residual.copy()
        other.k_flushes = self.k_flushes
        other.v_flushes = self.v_flushes
        return other


# -- debug dump ----------------------------------------------------------------
#
# File layout: b"KVC1", one UTF-8 JSON line, then raw little-endian sections in
# the order listed under "sections" (each entry gives name, dtype, shape,
# offset from the start of the body and byte length). Packed codes are laid
# out [token, head, channel] row-major before packing.

def _section_arrays(cache: KvCache) -> dict[str, np.ndarray]:
    cfg = cache.config
    h, d = cfg.num_heads, cfg.head_dim
    out: dict[str, np.ndarray] = {}
    for prefix, chunks in (("k", cache.k_chunks), ("v", cache.v_chunks)):
        if cfg.quantizes:
            if chunks:
                codes = np.concatenate([c.codes() for c in chunks])
                delta = np.concatenate([c.delta for c in chunks])
                zero = np.concatenate([c.zero for c in chunks])
                minimum = np.concatenate([c.minimum for c in chunks])
            else:
                codes = np.zeros((0, h, d), dtype=code_dtype(cfg.bits))
                pshape = (0, h, d) if prefix == "k" else (0, h, d // cfg.group_size)
                delta = np.zeros(pshape)
                zero = np.zeros(pshape, dtype=np.int64)
                minimum = np.zeros(pshape)
            if cfg.bits == 2:
                out[f"{prefix}_words"] = pack_2bit(codes).words
            else:
                out[f"{prefix}_codes"] = codes
            out[f"{prefix}_delta"] = delta
            out[f"{prefix}_zero"] = zero.astype(np.int64)
            out[f"{prefix}_min"] = minimum
        else:
            parts = [c.payload for c in chunks]
            out[f"{prefix}_values"] = np.concatenate(parts) if parts else empty_tensor3(h, d)
    out["k_norms"] = cache.k_norms_grouped
    out["k_residual"] = cache.k_residual
    out["k_norms_residual"] = cache.k_norms_residual
    out["v_residual"] = cache.v_residual
    return out


def write_cache_dump(cache: KvCache, path) -> None:
    cfg = cache.config
    arrays = _section_arrays(cache)
    sections = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        sections.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "S_packed": cache.packed_len, "R": cfg.residual_len, "G": cfg.group_size,
        "b": cfg.bits, "H": cfg.num_heads, "d_h": cfg.head_dim,
        "S_residual": cache.residual_len, "config": cfg.to_dict(),
        "k_flushes": cache.k_flushes, "v_flushes": cache.v_flushes,
        "sections": sections,
    }
    with open(Path(path), "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_cache_dump(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise ValueError(f"bad magic at byte 0: expected {DUMP_MAGIC!r}, found {raw[:4]!r}")
    end = raw.index(b"\n", 4)
    manifest = json.loads(raw[4:end].decode("utf-8"))
    body = raw[end + 1:]
    arrays = {}
    for sec in manifest["sections"]:
        chunk = body[sec["offset"]:sec["offset"] + sec["nbytes"]]
        if len(chunk) != sec["nbytes"]:
            raise ValueError(f"section {sec['name']} truncated: expected {sec['nbytes']} bytes, "
                             f"found {len(chunk)} at body offset {sec['offset']}")
        dt = np.dtype(sec["dtype"])
        arrays[sec["name"]] = np.frombuffer(chunk, dtype=dt).astype(dt.newbyteorder("=")).reshape(sec["shape"])
    return manifest, arrays


def load_cache_dump(path) -> KvCache:
    """Rebuild a cache from a dump; packed storage comes back as a single chunk."""
    manifest, arrays = read_cache_dump(path)
    cfg = PipelineConfig(**manifest["config"])
    cache = KvCache(cfg)
    h, d = cfg.num_heads, cfg.head_dim
    s = manifest["S_packed"]
    if s:
        for prefix, axis in (("k", "channel"), ("v", "token")):
            if cfg.quantizes:
                if cfg.bits == 2:
                    codes = unpack_2bit(arrays[f"{prefix}_words"], s * h * d).reshape(s, h, d)
                    payload = pack_2bit(codes).words
                else:
                    payload = arrays[f"{prefix}_codes"].reshape(s, h, d)
                chunk = PackedChunk((s, h, d), axis, cfg.group_size, cfg.bits, payload,
                                    arrays[f"{prefix}_delta"], arrays[f"{prefix}_zero"],
                                    arrays[f"{prefix}_min"])
            else:
                chunk = PackedChunk((s, h, d), axis, cfg.group_size, 64, arrays[f"{prefix}_values"])
            (cache.k_chunks if prefix == "k" else cache.v_chunks).append(chunk)
    cache.k_norms_grouped = arrays["k_norms"]
    cache.k_residual = arrays["k_residual"]
    cache.k_norms_residual = arrays["k_norms_residual"]
    cache.v_residual = arrays["v_residual"]
    cache.k_flushes = manifest["k_flushes"]
    cache.v_flushes = manifest["v_flushes"]
    return cache
