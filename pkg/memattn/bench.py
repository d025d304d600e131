"""Efficiency measurements: analytic FLOP and parameter counts, wall-clock inference timing, bank
I/O accounting, and the ablation over the number of retrieved memories ``k``.

FLOPs are counted two ways:

* **parametric**: weight matmuls (Q/K/V/output projections and the FFN) plus local attention
  scores and mixing, counted as 2 FLOPs per multiply-accumulate. Layer norms, GELU, softmax, and
  the patch embedding are excluded (pass ``include_embedding=True`` to count the embedding). This
  count does not depend on ``k``.
* **total**: parametric plus the attention over each of the ``k`` retrieved memories, at every
  memorizing layer.

**Example**::

    >>> from memattn import BlockConfig, EncoderConfig, count_flops
    >>> cfg = EncoderConfig()
    >>> count_flops(cfg, BlockConfig(k=3))
    FlopCount(parametric=..., total=...)

**Main classes and functions:**

.. autosummary::
    :nosignatures:

    EfficiencyReport
    AblationRow
    count_flops
    time_inference
    run_efficiency
    run_ablation
"""

from enum import Enum
from hashlib import sha256
from logging import getLogger
from time import perf_counter
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from attr import define, evolve, field
from tablib import Dataset

from .bank import AnyBank, open_banks
from .console import get_multi_progress
from .constants import DEFAULT_ABLATION_K_VALUES, DEFAULT_CACHE_CAPACITY, PathOrStr
from .encoder import EncoderConfig, EncoderWeights, encode
from .exceptions import ConfigurationError, ParameterError
from .fileio import write, write_json
from .memory import BlockConfig, FusionWeights
from .volume import Volume

ABLATION_COLUMNS = ['k', 'checksum', 'mean_latency_ms', 'fusion_entropy']

logger = getLogger(__name__)


class BenchMode(Enum):
    DENSE = 'dense'
    MEMORIZING = 'memorizing'


class FlopCount(NamedTuple):
    parametric: int
    total: int


class LatencyStats(NamedTuple):
    """Wall times in milliseconds"""

    mean: float
    median: float
    p95: float
    samples: List[float]


@define
class EfficiencyReport:
    """Cost of running the encoder in one mode"""

    mode: BenchMode = field(converter=BenchMode)
    k: int = field()
    mean_ms: float = field()
    median_ms: float = field()
    p95_ms: float = field()
    parametric_flops: int = field()
    total_flops: int = field()
    params: int = field()
    peak_cache_bytes: int = field(default=0)
    bytes_read: int = field(default=0)
    repetitions: int = field(default=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode.value,
            'k': self.k,
            'mean_ms': self.mean_ms,
            'median_ms': self.median_ms,
            'p95_ms': self.p95_ms,
            'parametric_flops': self.parametric_flops,
            'total_flops': self.total_flops,
            'params': self.params,
            'peak_cache_bytes': self.peak_cache_bytes,
            'bytes_read': self.bytes_read,
            'repetitions': self.repetitions,
        }


@define
class AblationRow:
    """Results for one value of ``k``. ``checksum`` is the SHA-256 of all output features."""

    k: int = field()
    checksum: str = field()
    mean_latency_ms: float = field()
    fusion_entropy: float = field(default=0.0)

    def to_list(self) -> list:
        return [
            self.k,
            self.checksum,
            round(self.mean_latency_ms, 6),
            round(self.fusion_entropy, 6),
        ]


@define
class AblationResult:
    rows: List[AblationRow] = field()
    dense_checksum: str = field()

    def to_dataset(self) -> Dataset:
        return to_dataset(self.rows)


def count_flops(
    cfg: EncoderConfig,
    block_cfg: Optional[BlockConfig] = None,
    n_mem_tokens: Optional[int] = None,
    include_embedding: bool = False,
) -> FlopCount:
    """Count encoder FLOPs for one volume.

    Args:
        cfg: Encoder geometry
        block_cfg: Memorizing block config; ``k`` is taken from here (0 if not given)
        n_mem_tokens: Tokens per stored memory; defaults to the encoder's own token count
        include_embedding: Also count the patch embedding matmul
    """
    n, d, d_ff = cfg.n_tokens, cfg.d_model, cfg.d_ff
    projections = 4 * (2 * n * d * d)
    ffn = 2 * (2 * n * d * d_ff)
    local_attention = 2 * (2 * n * n * d)
    parametric = cfg.num_layers * (projections + ffn + local_attention)
    if include_embedding:
        parametric += 2 * n * cfg.patch_volume * d

    k = block_cfg.k if block_cfg else 0
    n_mem = n if n_mem_tokens is None else n_mem_tokens
    memory_attention = 2 * (2 * n * n_mem * d)
    total = parametric + len(cfg.memorizing_layers) * k * memory_attention
    return FlopCount(parametric=parametric, total=total)


def time_inference(
    fn: Callable[[Any], Any], inputs: Sequence[Any], repetitions: int = 5, warmup: int = 1
) -> LatencyStats:
    """Time ``fn`` on each input, over several repetitions.

    Warmup passes over all inputs run first and are not recorded. Each call is timed separately
    with a monotonic clock, so there is one sample per input per repetition.
    """
    if repetitions < 1:
        raise ParameterError(f'repetitions must be at least 1, got {repetitions}')
    if warmup < 0:
        raise ParameterError(f'warmup must be non-negative, got {warmup}')
    if not inputs:
        raise ParameterError('No inputs to time')

    for _ in range(warmup):
        for x in inputs:
            fn(x)
    samples = []
    for _ in range(repetitions):
        for x in inputs:
            start = perf_counter()
            fn(x)
            samples.append((perf_counter() - start) * 1000)

    values = np.asarray(samples)
    return LatencyStats(
        mean=float(values.mean()),
        median=float(np.median(values)),
        p95=float(np.percentile(values, 95)),
        samples=samples,
    )


def run_efficiency(
    volumes: Sequence[Volume],
    cfg: EncoderConfig,
    weights: EncoderWeights,
    mode: BenchMode = BenchMode.DENSE,
    bank_paths: Optional[Sequence[PathOrStr]] = None,
    block_cfg: Optional[BlockConfig] = None,
    repetitions: int = 5,
    warmup: int = 1,
    cache_capacity: int = DEFAULT_CACHE_CAPACITY,
) -> EfficiencyReport:
    """Measure inference cost in one mode. In dense mode no bank is opened."""
    mode = BenchMode(mode)
    block_cfg = block_cfg or BlockConfig()

    if mode == BenchMode.DENSE:
        dense_cfg = evolve(block_cfg, k=0)
        stats = time_inference(
            lambda v: encode(v, cfg, weights, None, dense_cfg), volumes, repetitions, warmup
        )
        flops = count_flops(cfg, dense_cfg)
        return _report(mode, 0, stats, flops, cfg, repetitions)

    if not bank_paths:
        raise ConfigurationError('Memorizing mode requires at least one bank')
    with open_banks(bank_paths, cache_capacity) as bank:
        stats = time_inference(
            lambda v: encode(v, cfg, weights, bank, block_cfg), volumes, repetitions, warmup
        )
        flops = count_flops(cfg, block_cfg, n_mem_tokens=bank.header.n_tokens)
        return _report(
            mode,
            block_cfg.k,
            stats,
            flops,
            cfg,
            repetitions,
            peak_cache_bytes=bank.peak_cache_bytes,
            bytes_read=bank.bytes_read,
        )


def _report(mode, k, stats: LatencyStats, flops: FlopCount, cfg, repetitions, **kwargs):
    report = EfficiencyReport(
        mode=mode,
        k=k,
        mean_ms=stats.mean,
        median_ms=stats.median,
        p95_ms=stats.p95,
        parametric_flops=flops.parametric,
        total_flops=flops.total,
        params=cfg.num_params,
        repetitions=repetitions,
        **kwargs,
    )
    logger.info(f'{mode.value}: mean {stats.mean:.3f} ms over {len(stats.samples)} runs')
    return report


def features_checksum(features: Sequence[np.ndarray]) -> str:
    digest = sha256()
    for f in features:
        digest.update(np.ascontiguousarray(f, dtype='<f4').tobytes())
    return digest.hexdigest()


def _mean_entropy(weights: Sequence[FusionWeights]) -> float:
    return float(np.mean([w.entropy() for w in weights])) if weights else 0.0


def run_ablation(
    volumes: Sequence[Volume],
    cfg: EncoderConfig,
    weights: EncoderWeights,
    bank: AnyBank,
    k_values: Sequence[int] = DEFAULT_ABLATION_K_VALUES,
    block_cfg: Optional[BlockConfig] = None,
    repetitions: int = 1,
    warmup: int = 0,
    strict: bool = True,
    progress_bars: bool = False,
) -> AblationResult:
    """Encode the same volumes once per value of ``k``, with all other settings fixed.

    Args:
        volumes: Fixed inputs shared by every row
        cfg: Encoder geometry
        weights: Encoder weights
        bank: Open bank (or bank set) to retrieve from
        k_values: Values of ``k`` to test; rows are sorted by ``k``
        block_cfg: Other memorizing block settings
        repetitions: Timed passes per row
        warmup: Untimed passes per row
        strict: Require at least ``max(k_values)`` bank entries. Otherwise, retrieval is clamped
            to the bank size.
        progress_bars: Show a progress bar over rows

    Returns:
        One row per ``k``, plus the checksum of dense (no retrieval) features
    """
    if not k_values:
        raise ParameterError('No k values to test')
    if any(k < 0 for k in k_values):
        raise ParameterError(f'k values must be non-negative, got {list(k_values)}')
    if strict and bank.entry_count < max(k_values):
        raise ParameterError(
            f'Bank has {bank.entry_count} entries, fewer than the largest k ({max(k_values)})'
        )
    block_cfg = block_cfg or BlockConfig()
    dense_checksum = features_checksum([encode(v, cfg, weights).features for v in volumes])

    rows = []
    k_values = sorted(set(k_values))
    totals = {f'k={k}': len(volumes) for k in k_values}
    with get_multi_progress(totals, progress_bars, 'Ablating') as progress:
        for k in k_values:
            progress.start_job(f'k={k}')
            row_cfg = evolve(block_cfg, k=k)
            features, fusion = [], []
            for volume in volumes:
                result = encode(volume, cfg, weights, bank, row_cfg)
                features.append(result.features)
                fusion.extend(a.fusion for a in result.activations if a.fusion is not None)
                progress.advance()
            stats = time_inference(
                lambda v: encode(v, cfg, weights, bank, row_cfg), volumes, repetitions, warmup
            )
            rows.append(
                AblationRow(
                    k=k,
                    checksum=features_checksum(features),
                    mean_latency_ms=stats.mean,
                    fusion_entropy=_mean_entropy(fusion),
                )
            )
            logger.info(f'k={k}: checksum {rows[-1].checksum[:12]}, mean {stats.mean:.3f} ms')
    return AblationResult(rows=rows, dense_checksum=dense_checksum)


def to_dataset(rows: Sequence[AblationRow]) -> Dataset:
    """Convert ablation rows to a tabular dataset, exportable to any tablib format"""
    dataset = Dataset()
    dataset.headers = ABLATION_COLUMNS
    dataset.extend([row.to_list() for row in rows])
    return dataset


def write_ablation_csv(rows: Sequence[AblationRow], filename: PathOrStr):
    write(to_dataset(rows).export('csv'), filename)


def write_efficiency_json(reports: Sequence[EfficiencyReport], filename: PathOrStr):
    write_json([r.to_dict() for r in reports], filename)
