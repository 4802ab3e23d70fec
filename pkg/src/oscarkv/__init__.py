"""Rotated, norm-scaled low-bit KV-cache quantization: reference pipeline and analysis tools."""

__version__ = "0.1.0"

from .analysis import artifact_demo, error_study, mse_lower_bound, tni_profile
from .cache import KvCache, PipelineConfig, load_cache_dump, write_cache_dump
from .costmodel import CostConfig, method_cost, pareto_table
from .datagen import TniSpec, generate, generate_states, read_file, write_file
from .hadamard import fht, fht_inplace, fht_tensor, hadamard_matrix
from .pipeline import (ModelStub, attention, decode_step, omni_token_scale, prefill, preprocess,
                       simulate)
from .quant import dequantize, pack_2bit, quant_params, quantize, unpack_2bit

__all__ = [
    "__version__", "artifact_demo", "error_study", "mse_lower_bound", "tni_profile",
    "KvCache", "PipelineConfig", "load_cache_dump", "write_cache_dump",
    "CostConfig", "method_cost", "pareto_table",
    "TniSpec", "generate", "generate_states", "read_file", "write_file",
    "fht", "fht_inplace", "fht_tensor", "hadamard_matrix",
    "ModelStub", "attention", "decode_step", "omni_token_scale", "prefill", "preprocess", "simulate",
    "dequantize", "pack_2bit", "quant_params", "quantize", "unpack_2bit",
]
