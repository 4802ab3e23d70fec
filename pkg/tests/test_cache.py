import numpy as np
import pytest

from oscarkv.cache import (KvCache, PipelineConfig, load_cache_dump, read_cache_dump,
                           write_cache_dump)
from oscarkv.core import make_rng
from oscarkv.pipeline import omni_token_scale
from oscarkv.hadamard import fht


def unit_keys(s, h, d, seed=0):
    k = make_rng(seed).standard_normal((s, h, d))
    res = omni_token_scale(fht(k))
    return res.scaled, res.norms


def fill(cfg, s, seed=0, batched=True):
    k, n = unit_keys(s, cfg.num_heads, cfg.head_dim, seed)
    v = make_rng(seed + 1).standard_normal((s, cfg.num_heads, cfg.head_dim))
    cache = KvCache(cfg)
    if batched:
        cache.buffer_quant_k(k, n)
        cache.buffer_quant_v(v)
    else:
        for t in range(s):
            cache.buffer_quant_k(k[t:t + 1], n[t:t + 1])
            cache.buffer_quant_v(v[t:t + 1])
    return cache, k, n, v


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(residual_len=100, group_size=32)
    with pytest.raises(ValueError):
        PipelineConfig(method="oscar", head_dim=96, group_size=32)
    with pytest.raises(ValueError):
        PipelineConfig(method="bogus")
    with pytest.raises(ValueError):
        PipelineConfig(scaling="bogus")
    with pytest.raises(ValueError):
        PipelineConfig(bits=5)
    PipelineConfig(method="kivi", head_dim=96, group_size=32)


def test_prefill_split_300():
    cfg = PipelineConfig(head_dim=128, num_heads=2)
    cache, *_ = fill(cfg, 300)
    assert (cache.packed_len, cache.residual_len) == (256, 44)
    assert cache.packed_v_len == 256 and cache.v_residual.shape[0] == 44
    cache.check_invariants()


def test_prefill_exact_multiple_packs_everything():
    cfg = PipelineConfig(head_dim=32)
    cache, *_ = fill(cfg, 128)
    assert (cache.packed_len, cache.residual_len) == (128, 0)
    cache.check_invariants()


def test_decode_flush_at_r():
    cfg = PipelineConfig(head_dim=32)
    cache, *_ = fill(cfg, 127)
    assert (cache.packed_len, cache.residual_len) == (0, 127)
    k, n = unit_keys(1, 1, 32, seed=9)
    cache.buffer_quant_k(k, n)
    cache.buffer_quant_v(np.ones((1, 1, 32)))
    assert (cache.packed_len, cache.residual_len, cache.flush_count) == (128, 0, 1)
    cache.check_invariants()


def test_groups_per_block_and_v_groups():
    cfg = PipelineConfig(head_dim=128, num_heads=1)
    cache, *_ = fill(cfg, 256)
    chunk = cache.k_chunks[0]
    assert chunk.delta.shape == (256 // 32, 1, 128)
    assert cache.v_chunks[0].delta.shape == (256, 1, 4)


def test_empty_decode_stream_leaves_cache_unchanged():
    cfg = PipelineConfig(head_dim=32)
    cache, *_ = fill(cfg, 200)
    before = cache.materialize_v().copy()
    cache.buffer_quant_v(np.zeros((0, 1, 32)))
    cache.buffer_quant_k(np.zeros((0, 1, 32)), np.zeros((0, 1)))
    np.testing.assert_array_equal(cache.materialize_v(), before)
    assert cache.seq_len == 200


def test_empty_cache_materializes_empty():
    cache = KvCache(PipelineConfig(head_dim=32, num_heads=2))
    assert cache.materialize_k().shape == (0, 2, 32)
    assert cache.materialize_v().shape == (0, 2, 32)


def test_unquantized_cache_restores_keys():
    cfg = PipelineConfig(head_dim=64, quantize=False)
    cache, k, n, v = fill(cfg, 300)
    np.testing.assert_allclose(cache.materialize_k(), k * n[..., None], rtol=1e-15)
    np.testing.assert_array_equal(cache.materialize_v(), v)


def test_grid_keys_reconstruct_exactly():
    # keys on a zero-anchored 2-bit grid per channel, norms all one
    cfg = PipelineConfig(method="kivi", head_dim=32)
    rng = make_rng(4)
    step = rng.uniform(0.1, 1.0, 32)
    k = (rng.integers(0, 4, (128, 1, 32)) * step)
    k[0, 0], k[1, 0] = 0.0, 3 * step
    cache = KvCache(cfg)
    cache.buffer_quant_k(k, np.ones((128, 1)))
    np.testing.assert_allclose(cache.materialize_k(), k, atol=1e-12)


def test_norms_are_stored_untouched():
    cfg = PipelineConfig(head_dim=64, num_heads=2)
    cache, k, n, _ = fill(cfg, 300)
    np.testing.assert_array_equal(cache.k_norms_grouped, n[:256])
    np.testing.assert_array_equal(cache.k_norms_residual, n[256:])


@pytest.mark.parametrize("s,r,g", [(300, 128, 32), (256, 128, 32), (130, 64, 32)])
def test_flush_consistency(s, r, g):
    cfg = PipelineConfig(head_dim=64, num_heads=2, residual_len=r, group_size=g)
    a, *_ = fill(cfg, s, seed=5, batched=True)
    b, *_ = fill(cfg, s, seed=5, batched=False)
    np.testing.assert_allclose(a.materialize_k(), b.materialize_k(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.materialize_v(), b.materialize_v(), rtol=0, atol=1e-12)
    assert a.packed_len == b.packed_len == s - s % r


def test_replay_prefill_then_decode_matches_prefill():
    cfg = PipelineConfig(head_dim=32, residual_len=64)
    k, n = unit_keys(200, 1, 32, seed=2)
    v = make_rng(3).standard_normal((200, 1, 32))
    full = KvCache(cfg).buffer_quant_k(k, n).buffer_quant_v(v)
    part = KvCache(cfg).buffer_quant_k(k[:130], n[:130]).buffer_quant_v(v[:130])
    for t in range(130, 200):
        part.buffer_quant_k(k[t:t + 1], n[t:t + 1]).buffer_quant_v(v[t:t + 1])
    np.testing.assert_allclose(part.materialize_k(), full.materialize_k(), atol=1e-12)
    np.testing.assert_allclose(part.materialize_v(), full.materialize_v(), atol=1e-12)


def test_multi_token_append_flushes_repeatedly():
    cfg = PipelineConfig(head_dim=32, residual_len=32)
    cache, *_ = fill(cfg, 10)
    k, n = unit_keys(100, 1, 32, seed=8)
    cache.buffer_quant_k(k, n)
    cache.buffer_quant_v(np.ones((100, 1, 32)))
    assert (cache.packed_len, cache.residual_len, cache.flush_count) == (96, 14, 3)
    cache.check_invariants()


def test_shape_errors():
    cache = KvCache(PipelineConfig(head_dim=32))
    with pytest.raises(ValueError):
        cache.buffer_quant_k(np.ones((2, 1, 16)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        cache.buffer_quant_k(np.ones((2, 1, 32)), np.ones((3, 1)))


def test_memory_accounting():
    cfg = PipelineConfig(head_dim=64, num_heads=2, bits=2)
    cache, *_ = fill(cfg, 300)
    rep = cache.memory_report()
    assert rep["packed_k_payload_bits"] == 256 * 2 * 64 * 2
    assert rep["k_residual_bits"] == 44 * 2 * 64 * 64
    assert rep["total_bits"] < rep["fp64_equivalent_bits"]


@pytest.mark.parametrize("bits,quantize", [(2, True), (4, True), (2, False)])
def test_dump_round_trip(tmp_path, bits, quantize):
    cfg = PipelineConfig(head_dim=64, num_heads=2, bits=bits, quantize=quantize)
    cache, *_ = fill(cfg, 300)
    path = tmp_path / "cache.kvc"
    write_cache_dump(cache, path)
    manifest, arrays = read_cache_dump(path)
    assert {k: manifest[k] for k in ("S_packed", "R", "G", "b", "H", "d_h")} == \
        {"S_packed": 256, "R": 128, "G": 32, "b": bits, "H": 2, "d_h": 64}
    if quantize and bits == 2:
        assert arrays["k_words"].dtype == np.uint16
        assert arrays["k_words"].size == 256 * 2 * 64 // 8
    loaded = load_cache_dump(path)
    np.testing.assert_array_equal(loaded.materialize_k(), cache.materialize_k())
    np.testing.assert_array_equal(loaded.materialize_v(), cache.materialize_v())
    loaded.check_invariants()


def test_dump_words_follow_packing_layout(tmp_path):
    cfg = PipelineConfig(method="kivi", head_dim=32)
    cache, *_ = fill(cfg, 128)
    path = tmp_path / "c.kvc"
    write_cache_dump(cache, path)
    _, arrays = read_cache_dump(path)
    codes = cache.k_chunks[0].codes().ravel()
    word0 = int(arrays["k_words"][0])
    assert [(word0 >> (2 * i)) & 3 for i in range(8)] == codes[:8].tolist()


def test_dump_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"XXXX{}\n")
    with pytest.raises(ValueError, match="magic"):
        read_cache_dump(path)


def test_dump_empty_cache(tmp_path):
    cache = KvCache(PipelineConfig(head_dim=32))
    write_cache_dump(cache, tmp_path / "e")
    loaded = load_cache_dump(tmp_path / "e")
    assert loaded.seq_len == 0
