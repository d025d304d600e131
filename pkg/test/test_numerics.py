from math import log
from test import reference

import numpy as np
import pytest

from memattn.exceptions import DimensionError, NumericError, ParameterError
from memattn.numerics import (
    Prng,
    init_gaussian,
    l2_distance,
    l2_distances,
    l2_normalize,
    matmul,
    softmax_rows,
)


@pytest.mark.parametrize(
    'a, b, expected',
    [
        (np.eye(2), [[1, 2], [3, 4]], [[1, 2], [3, 4]]),
        ([[1, 2]], [[3], [4]], [[11]]),
    ],
)
def test_matmul(a, b, expected):
    result = matmul(np.asarray(a, dtype=np.float32), np.asarray(b, dtype=np.float32))
    assert result.dtype == np.float32
    assert result.flags['C_CONTIGUOUS']
    np.testing.assert_array_equal(result, expected)


def test_matmul__matches_scalar_loops():
    prng = Prng(1)
    a = prng.standard_normal((4, 5)).astype(np.float32)
    b = prng.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), reference.matmul(a, b), atol=1e-6)


def test_matmul__shape_mismatch():
    with pytest.raises(DimensionError, match=r'\(2, 3\).*\(2, 2\)'):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul__non_finite():
    with pytest.raises(NumericError):
        matmul(np.array([[np.nan]]), np.array([[1.0]]))


def test_matmul__associativity():
    prng = Prng(2)
    for _ in range(20):
        a, b, c = (prng.standard_normal((6, 6)).astype(np.float32) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-4 * max(1.0, np.max(np.abs(left)))


@pytest.mark.parametrize(
    'row, expected',
    [
        ([0, 0, 0, 0], [0.25, 0.25, 0.25, 0.25]),
        ([log(2), 0], [2 / 3, 1 / 3]),
        ([1000, 0], [1.0, 0.0]),
        ([-1000, 1000], [0.0, 1.0]),
    ],
)
def test_softmax_rows(row, expected):
    result = softmax_rows(np.array([row], dtype=np.float32))
    assert np.all(np.isfinite(result))
    np.testing.assert_allclose(result[0], expected, atol=1e-6)


def test_softmax_rows__properties():
    prng = Prng(3)
    # Whole numbers, so the shifted input is exact in float32
    x = np.round(prng.standard_normal((50, 7)) * 300).astype(np.float32)
    result = softmax_rows(x)
    assert np.all(result >= 0)
    np.testing.assert_allclose(result.sum(axis=1), 1.0, atol=1e-6)

    shifted = softmax_rows(x + np.float32(12.5))
    np.testing.assert_allclose(shifted, result, atol=1e-6)


def test_softmax_rows__non_finite():
    with pytest.raises(NumericError):
        softmax_rows(np.array([[np.inf, 0.0]]))


@pytest.mark.parametrize(
    'a, b, expected',
    [
        ([1.5, -2.0, 3.0], [1.5, -2.0, 3.0], 0.0),
        ([0, 0], [3, 4], 5.0),
    ],
)
def test_l2_distance(a, b, expected):
    assert l2_distance(np.array(a), np.array(b)) == pytest.approx(expected)


def test_l2_distance__matches_scalar_loop():
    prng = Prng(4)
    for _ in range(50):
        a, b = prng.standard_normal(16), prng.standard_normal(16)
        assert l2_distance(a, b) == pytest.approx(reference.l2_distance(a, b), abs=1e-6)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_l2_distance__metric_properties(seed):
    prng = Prng(seed)
    for _ in range(50):
        a, b, c = (prng.standard_normal(8) for _ in range(3))
        assert l2_distance(a, b) == l2_distance(b, a)
        assert l2_distance(a, a) == 0.0
        assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-12


def test_l2_distance__length_mismatch():
    with pytest.raises(DimensionError):
        l2_distance(np.zeros(3), np.zeros(4))


def test_l2_distances():
    points = np.array([[1, 0], [0, 1], [0.7071, 0.7071]])
    distances = l2_distances(points, np.array([1.0, 0.0]))
    assert distances.dtype == np.float64
    np.testing.assert_allclose(distances, [0.0, 2**0.5, 0.7654], atol=1e-4)


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-7)
    np.testing.assert_array_equal(l2_normalize(np.zeros(3), eps=1e-12), np.zeros(3))


def test_init_gaussian__deterministic():
    a = init_gaussian((8, 8), Prng(42), std=0.02)
    b = init_gaussian((8, 8), Prng(42), std=0.02)
    c = init_gaussian((8, 8), Prng(43), std=0.02)
    assert a.tobytes() == b.tobytes()
    assert np.any(a != c)


def test_init_gaussian__statistics():
    n = 10**6
    samples = init_gaussian(n, Prng(5), std=1.0)
    assert 0.99 <= samples.std() <= 1.01
    assert abs(samples.mean()) <= 5 / n**0.5


@pytest.mark.parametrize('std', [0.0, -1.0])
def test_init_gaussian__invalid_std(std):
    with pytest.raises(ParameterError):
        init_gaussian((2, 2), Prng(0), std=std)


@pytest.mark.parametrize('seed', [-1, 2**64])
def test_prng__invalid_seed(seed):
    with pytest.raises(ParameterError):
        Prng(seed)


@pytest.mark.parametrize('seed', [0, 42, 2**64 - 1])
@pytest.mark.parametrize('count', [1, 7, 64])
def test_prng__standard_normal_matches_scalar_reference(seed, count):
    samples = Prng(seed).standard_normal(count)
    assert samples.dtype == np.float64
    expected = reference.prng_standard_normal(seed, count)
    np.testing.assert_allclose(samples, expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize('seed', [0, 42, 2**64 - 1])
def test_prng__uniform_from_raw_stream(seed):
    """Unit uniforms are exactly the top 53 bits of each raw word"""
    np.testing.assert_array_equal(Prng(seed).uniform(16), reference.prng_units(seed, 16))

    samples = Prng(seed).uniform((100, 3), -2.0, 0.5)
    assert samples.shape == (100, 3)
    assert samples.min() >= -2.0
    assert samples.max() < 0.5


def test_prng__shapes():
    """A draw depends only on the number of samples, not on the requested shape"""
    flat = Prng(3).standard_normal(6)
    np.testing.assert_array_equal(Prng(3).standard_normal((2, 3)).ravel(), flat)
    assert Prng(3).standard_normal(0).shape == (0,)

    prng = Prng(3)
    first, second = prng.standard_normal(5), prng.standard_normal(5)
    assert np.all(first != second)
