"""The memorizing Transformer block: kNN retrieval of stored (key, value) pairs, attention over each
retrieved memory, and ratio-based fusion with local self-attention.

For local attention output ``A_L`` and per-memory attention outputs ``A_1..A_k`` at kNN distances
``D_1..D_k``, the fused attention output is::

    A_c = R_L·A_L + Σ R_i·A_i

where ``R_L`` is a preset ratio and ``R_i`` is derived from the distances by one of two rules
(see :py:class:`FusionMode`). Memory attention reuses the block's own query projection and the
bank stores post-projection keys and values, so a memorizing block has exactly as many parameters
as the dense block it wraps. With no retrieved memories the block output is bitwise identical to
the dense block.

**Main classes and functions:**

.. autosummary::
    :nosignatures:

    BlockConfig
    FusionMode
    FusionWeights
    RetrievedMemory
    MemorizingBlock
    compute_fusion_weights
    fuse_attention
    memory_attention_single
    memorizing_block_forward
"""

from enum import Enum
from logging import getLogger
from math import log
from typing import List, Optional, Sequence, Tuple

import numpy as np
from attr import define, field, frozen

from .attention import (
    BlockActivations,
    BlockParams,
    finish_block,
    local_attention,
    multi_head_attention,
)
from .bank import AnyBank, BankHeader, Neighbor
from .constants import DEFAULT_EPSILON, DEFAULT_K, DEFAULT_R_LOCAL
from .exceptions import BankIncompatibleError, DimensionError, ParameterError, RetrievalError
from .numerics import Tensor, as_tensor, check_finite

logger = getLogger(__name__)


class FusionMode(Enum):
    """How memory ratios ``R_i`` are derived from kNN distances ``D_i``.

    * ``NORMALIZED_INVERSE_DISTANCE``: ``R_i = (1 - R_L)·(1/D_i) / Σ_j (1/D_j)``. Weights form a
      convex combination with ``R_L``, and nearer memories weigh more.
    * ``PAPER_LITERAL``: ``R_i = D_i / Σ_j (R_L/D_j)``. Weights are not normalized and farther
      memories weigh more.
    """

    NORMALIZED_INVERSE_DISTANCE = 'normalized-inverse-distance'
    PAPER_LITERAL = 'paper-literal'


def _check_r_local(instance, attribute, value):
    if not 0.0 <= value <= 1.0:
        raise ParameterError(f'r_local must be in [0, 1], got {value}')


def _check_k(instance, attribute, value):
    if value < 0:
        raise ParameterError(f'k must be non-negative, got {value}')


def _check_epsilon(instance, attribute, value):
    if not value > 0:
        raise ParameterError(f'epsilon must be positive, got {value}')


@frozen
class BlockConfig:
    """Hyperparameters of a memorizing block

    Args:
        r_local: Ratio ``R_L`` applied to local attention
        k: Number of memories to retrieve
        fusion_mode: Rule for deriving memory ratios from distances
        epsilon: Lower clamp applied to distances before use
    """

    r_local: float = field(default=DEFAULT_R_LOCAL, converter=float, validator=_check_r_local)
    k: int = field(default=DEFAULT_K, converter=int, validator=_check_k)
    fusion_mode: FusionMode = field(
        default=FusionMode.NORMALIZED_INVERSE_DISTANCE, converter=FusionMode
    )
    epsilon: float = field(default=DEFAULT_EPSILON, converter=float, validator=_check_epsilon)


@frozen(eq=False)
class FusionWeights:
    """Resolved fusion coefficients for one set of retrieved memories"""

    r_local: float = field()
    r_mem: Tuple[float, ...] = field(converter=tuple)
    distances: Tuple[float, ...] = field(converter=tuple)

    @property
    def total(self) -> float:
        return self.r_local + sum(self.r_mem)

    def entropy(self) -> float:
        """Shannon entropy (nats) of all weights, each taken by magnitude and normalized to sum
        to 1. Zero when a single weight dominates; ``log(k + 1)`` when all are equal.
        """
        weights = [abs(w) for w in (self.r_local, *self.r_mem)]
        total = sum(weights)
        if total == 0:
            return 0.0
        return -sum((w / total) * log(w / total) for w in weights if w > 0)


@define(eq=False)
class RetrievedMemory:
    """Keys and values of one retrieved bank entry, for the current layer"""

    entry_id: int = field()
    distance: float = field()
    keys: Tensor = field(converter=as_tensor)
    values: Tensor = field(converter=as_tensor)

    def __attrs_post_init__(self):
        if self.keys.shape != self.values.shape:
            raise DimensionError(
                f'Memory {self.entry_id}: key shape {self.keys.shape} differs from value shape '
                f'{self.values.shape}'
            )
        if self.distance < 0:
            raise ParameterError(f'Memory {self.entry_id}: negative distance {self.distance}')


def memory_attention_single(q: Tensor, mem: RetrievedMemory, num_heads: int) -> Tensor:
    """Attention of the local queries over one memory: per head
    ``softmax(Q_h·K_mem,hᵀ/√head_dim)·V_mem,h``, heads concatenated
    """
    if q.ndim != 2 or q.shape[1] != mem.keys.shape[1]:
        raise DimensionError(
            f'Query shape {tuple(q.shape)} does not match memory {mem.entry_id} key shape '
            f'{mem.keys.shape}'
        )
    return multi_head_attention(q, mem.keys, mem.values, num_heads)


def compute_fusion_weights(distances: Sequence[float], cfg: BlockConfig) -> FusionWeights:
    """Derive memory ratios from kNN distances. Distances are clamped to at least
    ``cfg.epsilon`` first.
    """
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ParameterError(f'Distances must be finite and non-negative, got {list(distances)}')
    if d.size == 0:
        return FusionWeights(r_local=cfg.r_local, r_mem=(), distances=())
    d = np.maximum(d, cfg.epsilon)

    if cfg.fusion_mode == FusionMode.PAPER_LITERAL:
        denominator = np.sum(cfg.r_local / d)
        if denominator == 0:
            raise ParameterError('Paper-literal fusion requires r_local > 0')
        r_mem = d / denominator
    else:
        inverse = 1.0 / d
        r_mem = (1.0 - cfg.r_local) * inverse / inverse.sum()

    return FusionWeights(
        r_local=cfg.r_local,
        r_mem=[float(r) for r in r_mem],
        distances=[float(x) for x in d],
    )


def combine_attention(
    a_local: Tensor, outputs: Sequence[Tensor], weights: FusionWeights
) -> Tensor:
    """Weighted sum ``R_L·A_L + Σ R_i·A_i``, accumulated in float64"""
    if len(outputs) != len(weights.r_mem):
        raise ParameterError(f'Got {len(outputs)} memory outputs for {len(weights.r_mem)} ratios')
    fused = weights.r_local * a_local.astype(np.float64)
    for i, (a_mem, ratio) in enumerate(zip(outputs, weights.r_mem)):
        if a_mem.shape != a_local.shape:
            raise DimensionError(
                f'Memory attention output {i} has shape {tuple(a_mem.shape)}, '
                f'local attention has {tuple(a_local.shape)}'
            )
        fused += ratio * a_mem.astype(np.float64)
    return check_finite(as_tensor(fused), 'fused attention')


def _fuse(
    a_local: Tensor,
    memories: Sequence[RetrievedMemory],
    q: Tensor,
    cfg: BlockConfig,
    num_heads: int,
) -> Tuple[Tensor, Optional[FusionWeights]]:
    # With nothing retrieved, pass local attention through unscaled
    if not memories:
        return a_local, None
    outputs = [memory_attention_single(q, mem, num_heads) for mem in memories]
    weights = compute_fusion_weights([mem.distance for mem in memories], cfg)
    return combine_attention(a_local, outputs, weights), weights


def fuse_attention(
    a_local: Tensor,
    memories: Sequence[RetrievedMemory],
    q: Tensor,
    cfg: BlockConfig,
    num_heads: int,
) -> Tensor:
    """Fuse local attention with attention over each retrieved memory.
    With no memories, ``a_local`` is returned unchanged.
    """
    return _fuse(a_local, memories, q, cfg, num_heads)[0]


def check_bank_geometry(header: BankHeader, params: BlockParams, layer_id: int):
    """Raise a :py:exc:`.BankIncompatibleError` if a bank can't serve this block"""
    if (
        header.d_model != params.d_model
        or header.num_heads != params.num_heads
        or layer_id not in header.layer_ids
    ):
        raise BankIncompatibleError(
            f'Bank geometry ({header.describe()}) is incompatible with block layer {layer_id} '
            f'(d_model={params.d_model}, num_heads={params.num_heads})'
        )


def retrieve_memories(
    bank: AnyBank, neighbors: Sequence[Neighbor], layer_id: int
) -> List[RetrievedMemory]:
    """Load keys and values for each neighbor at one layer"""
    memories = []
    for entry_id, distance in neighbors:
        try:
            keys, values = bank.fetch(entry_id, layer_id)
        except OSError as e:
            raise RetrievalError(
                f'Failed to load memory entry {entry_id} for layer {layer_id}: {e}',
                entry_id=entry_id,
            ) from e
        memories.append(RetrievedMemory(entry_id, distance, keys, values))
    logger.debug(f'Layer {layer_id}: retrieved entries {[n[0] for n in neighbors]}')
    return memories


def memorizing_block_forward(
    x: Tensor,
    params: BlockParams,
    bank: Optional[AnyBank],
    cfg: BlockConfig,
    fingerprint: Optional[np.ndarray] = None,
    layer_id: int = 0,
    neighbors: Optional[Sequence[Neighbor]] = None,
) -> BlockActivations:
    """Forward pass of a memorizing block.

    Runs the local attention path, retrieves the ``cfg.k`` nearest bank entries for the input
    fingerprint, attends over each one, fuses the results, then finishes with the output
    projection, residual, and FFN exactly as the dense block does.

    Args:
        x: Block input ``[n×d_model]``
        params: Block weights
        bank: Memory bank; if ``None`` (or ``cfg.k == 0``), this reduces to the dense block
        cfg: Memorizing hyperparameters
        fingerprint: Retrieval vector for the current image
        layer_id: Encoder layer index, used to select stored keys and values
        neighbors: Precomputed kNN results, to share one search across several layers
    """
    q, k, v, a_local = local_attention(x, params)

    memories: List[RetrievedMemory] = []
    if bank is not None and cfg.k > 0:
        check_bank_geometry(bank.header, params, layer_id)
        if neighbors is None:
            if fingerprint is None:
                raise ParameterError('A fingerprint or precomputed neighbors are required')
            neighbors = bank.search(fingerprint, cfg.k)
        memories = retrieve_memories(bank, neighbors[: cfg.k], layer_id)

    a_fused, weights = _fuse(a_local, memories, q, cfg, params.num_heads)
    return BlockActivations(
        queries=q,
        keys=k,
        values=v,
        attention=a_fused,
        block_output=finish_block(x, a_fused, params),
        fusion=weights,
    )


@define(eq=False)
class MemorizingBlock:
    """A Transformer block plugged into a memory bank. Holds the same weights as a dense block and
    adds none of its own.
    """

    params: BlockParams = field()
    cfg: BlockConfig = field(factory=BlockConfig)
    bank: Optional[AnyBank] = field(default=None)
    layer_id: int = field(default=0)

    def forward(
        self,
        x: Tensor,
        fingerprint: Optional[np.ndarray] = None,
        neighbors: Optional[Sequence[Neighbor]] = None,
    ) -> BlockActivations:
        return memorizing_block_forward(
            x, self.params, self.bank, self.cfg, fingerprint, self.layer_id, neighbors
        )
