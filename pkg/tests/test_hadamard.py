import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oscarkv.core import make_rng
from oscarkv.hadamard import (SizeError, block_hadamard, fht, fht_inplace, fht_tensor,
                              hadamard_matrix, is_power_of_two)

SIZES = [2**k for k in range(0, 9)]


def test_small_cases():
    np.testing.assert_allclose(fht_inplace(np.array([1.0, 1.0])), [math.sqrt(2), 0], atol=1e-15)
    np.testing.assert_allclose(fht_inplace(np.array([1.0, 0, 0, 0])), [0.5] * 4, atol=1e-15)
    np.testing.assert_allclose(fht_tensor(np.array([[[1.0, 1.0]]])), [[[math.sqrt(2), 0]]], atol=1e-15)
    assert np.array_equal(hadamard_matrix(1), [[1.0]])
    np.testing.assert_allclose(hadamard_matrix(2), np.array([[1, 1], [1, -1]]) / math.sqrt(2))


def test_inplace_mutates_and_returns_same_array():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    out = fht_inplace(v)
    assert out is v
    np.testing.assert_allclose(v, [5, -1, -2, 0], atol=1e-15)


@pytest.mark.parametrize("d", [3, 6, 12, 100])
def test_rejects_non_power_of_two(d):
    with pytest.raises(SizeError):
        fht_inplace(np.ones(d))
    with pytest.raises(SizeError):
        hadamard_matrix(d)
    with pytest.raises(SizeError):
        fht(np.ones((2, d)))


def test_is_power_of_two():
    assert [d for d in range(20) if is_power_of_two(d)] == [1, 2, 4, 8, 16]


def test_self_inverse_d128():
    v = make_rng(0).standard_normal(128)
    np.testing.assert_allclose(fht(fht(v)), v, rtol=0, atol=1e-12)


@pytest.mark.parametrize("d", SIZES)
def test_vectorized_matches_dense_and_loop(d):
    rng = make_rng(d)
    v = rng.standard_normal(d)
    dense = hadamard_matrix(d) @ v
    np.testing.assert_allclose(fht(v), dense, atol=1e-12)
    np.testing.assert_allclose(fht_inplace(v.copy()), dense, atol=1e-12)


def test_dense_oracle_d16():
    v = make_rng(16).standard_normal(16)
    np.testing.assert_allclose(hadamard_matrix(16) @ v, fht_inplace(v.copy()), atol=1e-12)


def test_axis_argument():
    x = make_rng(1).standard_normal((8, 3))
    np.testing.assert_allclose(fht(x, axis=0), fht(x.T).T, atol=1e-14)


def test_tensor_norms_and_inner_products():
    rng = make_rng(5)
    x = rng.standard_normal((6, 3, 64))
    y = fht_tensor(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)
    q, k = rng.standard_normal((2, 64))
    assert np.dot(fht(q), fht(k)) == pytest.approx(np.dot(q, k), rel=1e-11)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.integers(0, 2**32 - 1))
def test_properties_random(log_d, seed):
    d = 2**log_d
    rng = make_rng(seed)
    q, k = rng.standard_normal((2, d))
    np.testing.assert_allclose(fht(fht(q)), q, atol=1e-12)
    assert abs(np.linalg.norm(fht(q)) - np.linalg.norm(q)) <= 1e-12 * max(1, np.linalg.norm(q))
    ref = np.dot(q, k)
    assert abs(np.dot(fht(q), fht(k)) - ref) <= 1e-11 * max(abs(ref), np.linalg.norm(q) * np.linalg.norm(k))


def test_block_hadamard_structure():
    b = block_hadamard(3, 4)
    assert b.shape == (12, 12)
    np.testing.assert_allclose(b[4:8, 4:8], hadamard_matrix(4))
    assert np.all(b[0:4, 4:12] == 0)
    np.testing.assert_allclose(b @ b, np.eye(12), atol=1e-14)
