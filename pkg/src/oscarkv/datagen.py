"""Synthetic KV tensors with token-norm-imbalance patterns, and the KVT1 file format.

Patterns layered over a standard normal base, in order:

* outlier channels: a persistent signed offset of ``outlier_factor`` on a
  few channels of every regular token, the same channels in every head
  (this is what makes them channel outliers rather than noise);
* norm spread: every row scaled by ``exp(norm_spread * N(0, 1))``, one
  draw per (token, head);
* modality blocks: token ranges rescaled by a per-block factor;
* heavy tokens: rows multiplied by ``heavy_factor``;
* sink tokens: low-norm rows with no channel structure, every entry
  close to one common positive value (or, with ``sink_channels``, close
  to one on those channels and near zero elsewhere), rescaled to
  ``sink_factor`` times the median regular-token norm of the head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .core import as_tensor3, token_norms

MAGIC = b"KVT1"
# relative spread of sink entries around their common value
SINK_JITTER = 0.1
LAYOUT = "row-major-channel-fastest"


class FormatError(ValueError):
    """Malformed KVT1 file."""


@dataclass(frozen=True)
class TniSpec:
    seq_len: int = 256
    num_heads: int = 4
    head_dim: int = 128
    outlier_channels: tuple[int, ...] = (5, 37, 70, 101)
    outlier_factor: float = 20.0
    sink_tokens: tuple[int, ...] = (0, 45, 99, 160, 222)
    sink_factor: float = 0.01
    sink_channels: tuple[int, ...] = ()
    modality_blocks: tuple[tuple[int, int, float], ...] = ()
    heavy_tokens: tuple[int, ...] = ()
    heavy_factor: float = 4.0
    norm_spread: float = 0.0
    seed: int = 0

    def __post_init__(self):
        s, d = self.seq_len, self.head_dim
        if min(s, self.num_heads, d) <= 0:
            raise ValueError("seq_len, num_heads and head_dim must be positive")
        for name, idx, bound in (("outlier_channels", self.outlier_channels, d),
                                 ("sink_tokens", self.sink_tokens, s),
                                 ("sink_channels", self.sink_channels, d),
                                 ("heavy_tokens", self.heavy_tokens, s)):
            if any(not 0 <= i < bound for i in idx):
                raise ValueError(f"{name} has indices outside [0, {bound})")
        if set(self.sink_tokens) & set(self.heavy_tokens):
            raise ValueError("sink and heavy token sets overlap")
        for start, end, scale in self.modality_blocks:
            if not 0 <= start < end <= s:
                raise ValueError(f"modality block ({start}, {end}) outside [0, {s}]")
            if scale <= 0:
                raise ValueError("modality scale factors must be positive")
        if self.norm_spread < 0:
            raise ValueError("norm_spread must be non-negative")
        if min(self.outlier_factor, self.sink_factor, self.heavy_factor) <= 0:
            raise ValueError("pattern factors must be positive")

    def plain(self) -> "TniSpec":
        """Same shape and seed with every pattern removed."""
        return replace(self, outlier_channels=(), sink_tokens=(), modality_blocks=(), heavy_tokens=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_blocks"] = [list(b) for b in self.modality_blocks]
        return d


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, stream]))


def generate(spec: TniSpec, stream: int = 0) -> tuple[np.ndarray, dict]:
    """Tensor ``(S, H, d_h)`` plus annotations.

    ``stream`` selects an independent noise draw that shares the channel
    signs of ``spec.seed``, so Q, K and V of one synthetic layer line up.
    """
    s, h, d = spec.seq_len, spec.num_heads, spec.head_dim
    signs = _rng(spec.seed, 0).choice([-1.0, 1.0], size=(h, d))
    rng = _rng(spec.seed, 1 + stream)
    x = rng.standard_normal((s, h, d))
    sink_dirs = rng.standard_normal((len(spec.sink_tokens), h, d))
    token_scale = np.exp(spec.norm_spread * rng.standard_normal((s, h)))

    if spec.outlier_channels:
        cols = list(spec.outlier_channels)
        x[:, :, cols] += spec.outlier_factor * signs[:, cols]
    x *= token_scale[..., None]
    for start, end, scale in spec.modality_blocks:
        x[start:end] *= scale
    if spec.heavy_tokens:
        x[list(spec.heavy_tokens)] *= spec.heavy_factor
    if spec.sink_tokens:
        sinks = list(spec.sink_tokens)
        regular = np.setdiff1d(np.arange(s), sinks)
        typical = np.median(token_norms(x[regular]), axis=0) if regular.size else np.ones(h)
        if spec.sink_channels:
            rows = SINK_JITTER * sink_dirs
            rows[:, :, list(spec.sink_channels)] += 1.0
        else:
            rows = 1.0 + SINK_JITTER * sink_dirs
        x[sinks] = rows / token_norms(rows)[..., None] * (spec.sink_factor * typical)[None, :, None]

    annotations = {
        "sink_tokens": sorted(spec.sink_tokens),
        "heavy_tokens": sorted(spec.heavy_tokens),
        "outlier_tokens": sorted(set(spec.sink_tokens) | set(spec.heavy_tokens)),
        "outlier_channels": sorted(spec.outlier_channels),
        "modality_blocks": [[a, b] for a, b, _ in spec.modality_blocks],
    }
    return x, annotations


def generate_states(spec: TniSpec, query_scale: float = 1.0
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Query, key and value tensors of one synthetic layer.

    Q and K share outlier channels and sinks; V has the token patterns but
    no channel outliers. ``query_scale`` multiplies Q and so acts as an
    inverse softmax temperature: the shared outlier offsets make raw logits
    large enough to saturate attention onto a single key.
    """
    if query_scale <= 0:
        raise ValueError("query_scale must be positive")
    k, ann = generate(spec, stream=0)
    q, _ = generate(spec, stream=1)
    q = q * query_scale
    v, _ = generate(replace(spec, outlier_channels=()), stream=2)
    return q, k, v, ann


# -- KVT1 files ------------------------------------------------------------------
#
# b"KVT1" + JSON header + b"\n" + little-endian body, C order [token, head, channel].

def write_file(path, x, annotations: dict | None = None, dtype: str = "f64") -> None:
    x = as_tensor3(x)
    if dtype not in ("f32", "f64"):
        raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    annotations = dict(annotations or {})
    header = {
        "shape": list(x.shape),
        "dtype": dtype,
        "layout": LAYOUT,
        "modality_blocks": annotations.pop("modality_blocks", []),
        "outlier_tokens": annotations.pop("outlier_tokens", []),
    }
    if annotations:
        header["annotations"] = annotations
    body = x.astype("<f4" if dtype == "f32" else "<f8").tobytes()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(body)


def read_file(path) -> tuple[np.ndarray, dict]:
    """Return the tensor (widened to float64) and its annotations."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic at byte offset 0: expected {MAGIC!r}, found {raw[:4]!r}")
    newline = raw.find(b"\n", 4)
    if newline < 0:
        raise FormatError(f"header starting at byte offset 4 is not newline-terminated")
    try:
        header = json.loads(raw[4:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header at byte offset 4: {exc}") from exc
    shape = header.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n >= 0 for n in shape)):
        raise FormatError(f"header at byte offset 4 has invalid shape {shape!r}")
    dtype = header.get("dtype")
    if dtype not in ("f32", "f64"):
        raise FormatError(f"header at byte offset 4 has unsupported dtype {dtype!r}")
    if header.get("layout", LAYOUT) != LAYOUT:
        raise FormatError(f"unsupported layout {header.get('layout')!r}")
    itemsize = 4 if dtype == "f32" else 8
    start = newline + 1
    expected = int(np.prod(shape)) * itemsize
    actual = len(raw) - start
    if actual != expected:
        raise FormatError(f"body at byte offset {start}: expected {expected} bytes for shape "
                          f"{shape} {dtype}, found {actual}")
    x = np.frombuffer(raw, dtype="<f4" if dtype == "f32" else "<f8", offset=start)
    x = x.astype(np.float64).reshape(shape)
    annotations = dict(header.get("annotations", {}))
    annotations["modality_blocks"] = header.get("modality_blocks", [])
    annotations["outlier_tokens"] = header.get("outlier_tokens", [])
    return x, annotations
