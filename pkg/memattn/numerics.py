"""Dense tensor kernels used by the attention engine.

A tensor is a C-contiguous (row-major) :py:class:`numpy.ndarray` of dtype ``float32``. Every public
function here returns a new array in that layout and checks that the result is finite.

Random initialization draws from the raw Philox stream with a fixed sampling algorithm (see
:py:class:`Prng`), so a given seed produces the same weights with any numpy release.

**Main functions:**

.. autosummary::
    :nosignatures:

    Prng
    matmul
    softmax_rows
    l2_distance
    l2_distances
    l2_normalize
    init_gaussian
"""

from logging import getLogger
from typing import Sequence, Union

import numpy as np

from .exceptions import DimensionError, NumericError, ParameterError

Tensor = np.ndarray
Shape = Union[int, Sequence[int]]
DTYPE = np.float32
MAX_SEED = 2**64 - 1
UNIT_SCALE = 2.0**-53

logger = getLogger(__name__)


class Prng:
    """Deterministic random number source built on the raw output of numpy's Philox bit
    generator (Philox4x64-10, keyed with the seed).

    Only the 64-bit words from :py:meth:`numpy.random.Philox.random_raw` are used; that stream
    is fixed across numpy releases. They are turned into samples as follows:

    * Uniform: the top 53 bits of one word, scaled by 2⁻⁵³, give ``u`` in ``[0, 1)``
    * Normal: Box-Muller on two consecutive uniforms ``u1, u2``. With
      ``r = sqrt(-2·ln(1 - u1))``, this gives ``r·cos(2πu2)`` then ``r·sin(2πu2)``. For an odd
      count the last sine is discarded.

    Args:
        seed: Unsigned 64-bit seed
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= MAX_SEED:
            raise ParameterError(f'Seed must be an unsigned 64-bit integer, got {seed}')
        self.seed = int(seed)
        self._bit_generator = np.random.Philox(key=self.seed)

    def _unit(self, count: int) -> np.ndarray:
        raw = np.asarray(self._bit_generator.random_raw(count), dtype=np.uint64)
        return (raw >> np.uint64(11)).astype(np.float64) * UNIT_SCALE

    def standard_normal(self, shape: Shape) -> np.ndarray:
        """Draw float64 samples from N(0, 1)"""
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        uniforms = self._unit(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - uniforms[:, 0]))
        angle = 2.0 * np.pi * uniforms[:, 1]
        samples = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return samples.ravel()[:count].reshape(shape)

    def uniform(self, shape: Shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Draw float64 samples from U(low, high)"""
        count = int(np.prod(shape))
        return (low + (high - low) * self._unit(count)).reshape(shape)

    def __repr__(self):
        return f'Prng(seed={self.seed})'


def as_tensor(values) -> Tensor:
    """Convert any array-like into a row-major float32 tensor"""
    return np.ascontiguousarray(values, dtype=DTYPE)


def check_finite(x: np.ndarray, name: str = 'tensor') -> np.ndarray:
    """Raise a :py:exc:`.NumericError` if any value is NaN or infinite"""
    if not np.all(np.isfinite(x)):
        raise NumericError(f'Non-finite values in {name} with shape {tuple(x.shape)}')
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``[m×p]`` and a ``[p×n]`` tensor"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f'Cannot multiply tensors with shapes {tuple(a.shape)} and {tuple(b.shape)}'
        )
    return check_finite(as_tensor(np.matmul(as_tensor(a), as_tensor(b))), 'matmul output')


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed in float64 with max subtraction.

    For a ``[m×n]`` input each output row is non-negative and sums to 1. Higher-rank inputs are
    treated as a stack of such matrices.
    """
    x64 = np.asarray(x, dtype=np.float64)
    check_finite(x64, 'softmax input')
    shifted = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    return as_tensor(shifted / shifted.sum(axis=-1, keepdims=True))


def l2_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distance from each row of ``points`` ``[n×d]`` to ``query`` ``[d]``, as float64"""
    points = np.asarray(points)
    query = np.asarray(query)
    if points.ndim != 2 or query.ndim != 1 or points.shape[1] != query.shape[0]:
        raise DimensionError(
            f'Cannot compare points with shape {tuple(points.shape)} '
            f'to a query with shape {tuple(query.shape)}'
        )
    diff = points.astype(np.float64) - query.astype(np.float64)
    return np.sqrt(np.einsum('ij,ij->i', diff, diff))


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean norm of ``a - b``"""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f'Vector lengths differ: {tuple(a.shape)} vs {tuple(b.shape)}')
    return float(l2_distances(a[np.newaxis, :], b)[0])


def l2_normalize(v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Scale a vector to unit norm. Vectors with norm <= ``eps`` are returned as zeros."""
    v64 = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.dot(v64, v64))
    if norm <= eps:
        return np.zeros_like(v64, dtype=DTYPE)
    return as_tensor(v64 / norm)


def init_gaussian(shape: Shape, prng: Prng, std: float) -> Tensor:
    """Sample a tensor from N(0, std²). Identical seeds give bitwise-identical tensors."""
    if not std > 0:
        raise ParameterError(f'Standard deviation must be positive, got {std}')
    return check_finite(as_tensor(prng.standard_normal(shape) * std), 'gaussian init')
