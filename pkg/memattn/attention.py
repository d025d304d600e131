"""Dense multi-head self-attention, feed-forward network, and the plain pre-norm Transformer block.

The block is laid out as::

    h = x + attention(norm_1(x)) · w_o
    y = h + gelu(norm_2(h) · w_1) · w_2

Attention is scaled dot-product attention over ``num_heads`` heads, with no biases in any
projection, so a block with model width ``d`` and FFN width ``d_ff`` has exactly
``4·d² + 2·d·d_ff + 4·d`` parameters (the last term is the scale and shift of two layer norms).

The local path is split into :py:func:`local_attention` (norm, projection, attention) and
:py:func:`finish_block` (output projection, residual, FFN), so that the memorizing block in
:py:mod:`memattn.memory` can fuse memory attention in between while running the exact same code
as the dense block on either side.

**Main functions:**

.. autosummary::
    :nosignatures:

    project_qkv
    dense_attention
    transformer_block
    count_params
"""

from logging import getLogger
from math import pi, sqrt
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np
from attr import define, field

from .constants import DEFAULT_INIT_STD, LAYER_NORM_EPS
from .exceptions import DimensionError, ParameterError
from .numerics import Prng, Tensor, as_tensor, check_finite, init_gaussian, matmul, softmax_rows

if TYPE_CHECKING:
    from .memory import FusionWeights

GELU_COEF = sqrt(2.0 / pi)

logger = getLogger(__name__)


def _check_heads(d_model: int, num_heads: int):
    if num_heads < 1 or d_model % num_heads != 0:
        raise DimensionError(f'Model width {d_model} is not divisible by {num_heads} heads')


@define(eq=False)
class AttentionParams:
    """Q/K/V/output projection weights, each ``[d_model×d_model]``"""

    w_q: Tensor = field(converter=as_tensor)
    w_k: Tensor = field(converter=as_tensor)
    w_v: Tensor = field(converter=as_tensor)
    w_o: Tensor = field(converter=as_tensor)
    num_heads: int = field(default=1)

    def __attrs_post_init__(self):
        d = self.d_model
        for name in ['w_q', 'w_k', 'w_v', 'w_o']:
            if getattr(self, name).shape != (d, d):
                raise DimensionError(
                    f'{name} has shape {getattr(self, name).shape}, expected {(d, d)}'
                )
        _check_heads(d, self.num_heads)

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def num_params(self) -> int:
        return 4 * self.d_model**2


@define(eq=False)
class FfnParams:
    """Feed-forward weights: ``w1`` ``[d_model×d_ff]`` and ``w2`` ``[d_ff×d_model]``"""

    w1: Tensor = field(converter=as_tensor)
    w2: Tensor = field(converter=as_tensor)

    def __attrs_post_init__(self):
        if self.w1.ndim != 2 or self.w2.shape != (self.w1.shape[1], self.w1.shape[0]):
            raise DimensionError(f'FFN shapes {self.w1.shape} and {self.w2.shape} do not chain')

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    @property
    def num_params(self) -> int:
        return 2 * self.w1.shape[0] * self.d_ff


@define(eq=False)
class NormParams:
    """Layer norm scale and shift, each ``[d_model]``"""

    scale: Tensor = field(converter=as_tensor)
    shift: Tensor = field(converter=as_tensor)

    @property
    def num_params(self) -> int:
        return self.scale.size + self.shift.size


@define(eq=False)
class BlockParams:
    """All weights of one Transformer block"""

    attn: AttentionParams = field()
    ffn: FfnParams = field()
    norm1: NormParams = field()
    norm2: NormParams = field()

    @classmethod
    def init(
        cls,
        d_model: int,
        d_ff: int,
        num_heads: int,
        prng: Prng,
        std: float = DEFAULT_INIT_STD,
    ) -> 'BlockParams':
        """Initialize random projection weights, with unit norm scales and zero shifts.
        Tensors are drawn from ``prng`` in the same order as :py:meth:`tensors`.
        """
        _check_heads(d_model, num_heads)
        square = (d_model, d_model)
        ones, zeros = np.ones(d_model), np.zeros(d_model)
        return cls(
            norm1=NormParams(ones, zeros),
            attn=AttentionParams(
                w_q=init_gaussian(square, prng, std),
                w_k=init_gaussian(square, prng, std),
                w_v=init_gaussian(square, prng, std),
                w_o=init_gaussian(square, prng, std),
                num_heads=num_heads,
            ),
            norm2=NormParams(ones, zeros),
            ffn=FfnParams(
                w1=init_gaussian((d_model, d_ff), prng, std),
                w2=init_gaussian((d_ff, d_model), prng, std),
            ),
        )

    @classmethod
    def zeros(cls, d_model: int, d_ff: int, num_heads: int) -> 'BlockParams':
        """A block with every weight set to zero; its output equals its input"""
        square = np.zeros((d_model, d_model))
        zeros = np.zeros(d_model)
        return cls(
            attn=AttentionParams(square, square, square, square, num_heads=num_heads),
            ffn=FfnParams(np.zeros((d_model, d_ff)), np.zeros((d_ff, d_model))),
            norm1=NormParams(zeros, zeros),
            norm2=NormParams(zeros, zeros),
        )

    @classmethod
    def from_tensors(cls, tensors: List[Tensor], num_heads: int) -> 'BlockParams':
        """Rebuild a block from the tensor list produced by :py:meth:`tensors`"""
        n1_scale, n1_shift, w_q, w_k, w_v, w_o, n2_scale, n2_shift, w1, w2 = tensors
        return cls(
            attn=AttentionParams(w_q, w_k, w_v, w_o, num_heads=num_heads),
            ffn=FfnParams(w1, w2),
            norm1=NormParams(n1_scale, n1_shift),
            norm2=NormParams(n2_scale, n2_shift),
        )

    def tensors(self) -> List[Tensor]:
        """All weight tensors in serialization order"""
        return [
            self.norm1.scale,
            self.norm1.shift,
            self.attn.w_q,
            self.attn.w_k,
            self.attn.w_v,
            self.attn.w_o,
            self.norm2.scale,
            self.norm2.shift,
            self.ffn.w1,
            self.ffn.w2,
        ]

    @staticmethod
    def tensor_shapes(d_model: int, d_ff: int) -> List[Tuple[int, ...]]:
        d = d_model
        return [(d,), (d,), (d, d), (d, d), (d, d), (d, d), (d,), (d,), (d, d_ff), (d_ff, d)]

    @property
    def d_model(self) -> int:
        return self.attn.d_model

    @property
    def d_ff(self) -> int:
        return self.ffn.d_ff

    @property
    def num_heads(self) -> int:
        return self.attn.num_heads

    @property
    def num_params(self) -> int:
        return (
            self.attn.num_params
            + self.ffn.num_params
            + self.norm1.num_params
            + self.norm2.num_params
        )


@define(eq=False)
class BlockActivations:
    """Activations captured from one block forward pass.

    ``keys`` and ``values`` are post-projection tensors; these are what a memory bank stores.
    ``attention`` is the (possibly fused) attention output before ``w_o``, and ``fusion`` holds the
    weights used to produce it, if any memory was retrieved.
    """

    queries: Tensor = field()
    keys: Tensor = field()
    values: Tensor = field()
    attention: Tensor = field()
    block_output: Tensor = field()
    fusion: Optional['FusionWeights'] = field(default=None)


def project_qkv(x: Tensor, p: AttentionParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Project input tokens ``[n×d_model]`` into queries, keys, and values"""
    if x.ndim != 2 or x.shape[1] != p.d_model:
        raise DimensionError(
            f'Input shape {tuple(x.shape)} does not match model width {p.d_model}'
        )
    return matmul(x, p.w_q), matmul(x, p.w_k), matmul(x, p.w_v)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``[n×d_model]`` -> ``[num_heads×n×head_dim]``"""
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """``[num_heads×n×head_dim]`` -> ``[n×d_model]``"""
    h, n, hd = x.shape
    return as_tensor(x.transpose(1, 0, 2).reshape(n, h * hd))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention of queries ``[n×d]`` over keys/values ``[m×d]``.
    Shared by local self-attention and memory attention.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError('Attention inputs must be 2-dimensional')
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise DimensionError(
            f'Incompatible attention shapes: Q {tuple(q.shape)}, K {tuple(k.shape)}, '
            f'V {tuple(v.shape)}'
        )
    _check_heads(q.shape[1], num_heads)
    head_dim = q.shape[1] // num_heads

    q_h, k_h, v_h = (split_heads(as_tensor(t), num_heads) for t in (q, k, v))
    scores = np.matmul(q_h, k_h.transpose(0, 2, 1)) / np.float32(sqrt(head_dim))
    weights = softmax_rows(scores)
    return check_finite(merge_heads(np.matmul(weights, v_h)), 'attention output')


def dense_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Local self-attention A_L: per head ``softmax(Q_h·K_hᵀ/√head_dim)·V_h``, heads
    concatenated
    """
    if not q.shape == k.shape == v.shape:
        raise DimensionError(
            f'Self-attention needs equal shapes, got Q {tuple(q.shape)}, K {tuple(k.shape)}, '
            f'V {tuple(v.shape)}'
        )
    return multi_head_attention(q, k, v, num_heads)


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    x64 = np.asarray(x, dtype=np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + LAYER_NORM_EPS)
    return as_tensor(normed * p.scale + p.shift)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x64 = np.asarray(x, dtype=np.float64)
    return as_tensor(0.5 * x64 * (1.0 + np.tanh(GELU_COEF * (x64 + 0.044715 * x64**3))))


def feed_forward(x: Tensor, p: FfnParams) -> Tensor:
    return matmul(gelu(matmul(x, p.w1)), p.w2)


def local_attention(x: Tensor, params: BlockParams) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Run the first half of a block: norm, Q/K/V projection, and local attention.

    Returns:
        Tuple of ``(Q, K, V, A_L)``
    """
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DimensionError(
            f'Block input shape {tuple(x.shape)} does not match model width {params.d_model}'
        )
    check_finite(x, 'block input')
    q, k, v = project_qkv(layer_norm(x, params.norm1), params.attn)
    return q, k, v, dense_attention(q, k, v, params.num_heads)


def finish_block(x: Tensor, attention: Tensor, params: BlockParams) -> Tensor:
    """Run the second half of a block: output projection, residual, and FFN"""
    h = as_tensor(x + matmul(attention, params.attn.w_o))
    return check_finite(as_tensor(h + feed_forward(layer_norm(h, params.norm2), params.ffn)))


def transformer_block(x: Tensor, params: BlockParams) -> BlockActivations:
    """Forward pass of a dense pre-norm Transformer block"""
    q, k, v, a_local = local_attention(x, params)
    return BlockActivations(
        queries=q,
        keys=k,
        values=v,
        attention=a_local,
        block_output=finish_block(x, a_local, params),
    )


def count_params(block) -> int:
    """Count the trainable scalars in a block. Accepts :py:class:`BlockParams`, or any block
    object with a ``params`` attribute (such as :py:class:`memattn.memory.MemorizingBlock`).
    """
    params = getattr(block, 'params', block)
    if not isinstance(params, BlockParams):
        raise ParameterError(f'Cannot count parameters of {type(block).__name__}')
    return params.num_params
