import json
from test.conftest import TINY_CONFIG
from unittest.mock import patch

import pytest
from attr import evolve

from memattn.bank import open_bank
from memattn.bench import (
    ABLATION_COLUMNS,
    AblationRow,
    BenchMode,
    EfficiencyReport,
    count_flops,
    features_checksum,
    run_ablation,
    run_efficiency,
    time_inference,
    to_dataset,
    write_ablation_csv,
    write_efficiency_json,
)
from memattn.builder import build_bank
from memattn.encoder import EncoderConfig, encode
from memattn.exceptions import ConfigurationError, ParameterError
from memattn.memory import BlockConfig
from memattn.volume import synthetic_volume

SMALL_CONFIG = EncoderConfig(
    volume_dims=(8, 8, 4),
    patch_size=4,
    d_model=8,
    d_ff=32,
    num_heads=2,
    num_layers=1,
    memorizing_layers=(0,),
)


@pytest.fixture
def volumes():
    return [synthetic_volume(TINY_CONFIG.volume_dims, seed=500 + i, class_id=1) for i in range(3)]


def test_count_flops():
    assert SMALL_CONFIG.n_tokens == 4
    flops = count_flops(SMALL_CONFIG, BlockConfig(k=1))
    assert flops.parametric == 6656
    assert flops.total - flops.parametric == 512
    assert count_flops(SMALL_CONFIG).total == 6656


def test_count_flops__memory_tokens():
    flops = count_flops(SMALL_CONFIG, BlockConfig(k=2), n_mem_tokens=8)
    assert flops.total - flops.parametric == 2 * 2 * (2 * 4 * 8 * 8)


def test_count_flops__embedding():
    flops = count_flops(SMALL_CONFIG, include_embedding=True)
    assert flops.parametric == 6656 + 2 * 4 * 64 * 8


@pytest.mark.parametrize('k', [0, 1, 3, 5, 7])
def test_count_flops__parametric_independent_of_k(k):
    cfg = EncoderConfig()
    flops = count_flops(cfg, BlockConfig(k=k))
    assert flops.parametric == count_flops(cfg).parametric
    assert flops.total >= flops.parametric
    assert (flops.total == flops.parametric) == (k == 0)


def test_time_inference():
    calls = []
    stats = time_inference(calls.append, ['a', 'b'], repetitions=3, warmup=2)
    assert len(calls) == 10
    assert len(stats.samples) == 6
    assert min(stats.samples) <= stats.median <= stats.p95 <= max(stats.samples)


def test_time_inference__single_sample():
    stats = time_inference(lambda x: x, [1], repetitions=1, warmup=0)
    assert stats.mean == stats.median == stats.p95


@pytest.mark.parametrize('kwargs', [{'repetitions': 0}, {'warmup': -1}, {'inputs': []}])
def test_time_inference__invalid(kwargs):
    kwargs = {'inputs': [1], **kwargs}
    with pytest.raises(ParameterError):
        time_inference(lambda x: x, **kwargs)


def test_run_efficiency__dense(volumes, tiny_cfg, tiny_weights, tiny_bank):
    with patch('memattn.bench.open_banks') as mock_open_banks:
        report = run_efficiency(
            volumes, tiny_cfg, tiny_weights, BenchMode.DENSE, [tiny_bank], repetitions=2
        )
    mock_open_banks.assert_not_called()

    assert report.mode == BenchMode.DENSE
    assert report.k == 0
    assert report.peak_cache_bytes == 0
    assert report.bytes_read == 0
    assert report.params == tiny_cfg.num_params
    assert report.parametric_flops == report.total_flops


def test_run_efficiency__memorizing(volumes, tiny_cfg, tiny_weights, tiny_bank):
    dense = run_efficiency(volumes, tiny_cfg, tiny_weights, 'dense', repetitions=1)
    memorizing = run_efficiency(
        volumes,
        tiny_cfg,
        tiny_weights,
        'memorizing',
        [tiny_bank],
        BlockConfig(k=3),
        repetitions=1,
        cache_capacity=2,
    )
    with open_bank(tiny_bank) as bank:
        payload_size = bank.header.payload_size

    assert memorizing.k == 3
    assert memorizing.params == dense.params
    assert memorizing.parametric_flops == dense.parametric_flops
    assert memorizing.total_flops > dense.total_flops
    assert 0 < memorizing.peak_cache_bytes <= 2 * payload_size
    assert memorizing.bytes_read > 0


def test_run_efficiency__memorizing_requires_bank(volumes, tiny_cfg, tiny_weights):
    with pytest.raises(ConfigurationError):
        run_efficiency(volumes, tiny_cfg, tiny_weights, BenchMode.MEMORIZING)


@pytest.mark.slow
def test_run_efficiency__retrieval_adds_latency(volumes, tiny_cfg, tiny_weights, tiny_bank):
    dense = run_efficiency(volumes, tiny_cfg, tiny_weights, 'dense', repetitions=20)
    memorizing = run_efficiency(
        volumes, tiny_cfg, tiny_weights, 'memorizing', [tiny_bank], repetitions=20
    )
    # Allow for timing noise
    assert memorizing.median_ms * 3 >= dense.median_ms
    assert memorizing.median_ms <= 10 * dense.median_ms


@pytest.mark.slow
def test_run_ablation__latency_grows_with_k(volumes, tiny_cfg, tiny_weights, tiny_bank):
    with open_bank(tiny_bank) as bank:
        result = run_ablation(
            volumes, tiny_cfg, tiny_weights, bank, [1, 3, 5, 7], repetitions=20, warmup=2
        )
    latencies = [row.mean_latency_ms for row in result.rows]
    # Allow for timing noise
    for smaller_k, larger_k in zip(latencies, latencies[1:]):
        assert larger_k * 3 >= smaller_k


def test_run_ablation(volumes, tiny_cfg, tiny_weights, tiny_bank):
    with open_bank(tiny_bank) as bank:
        result = run_ablation(volumes, tiny_cfg, tiny_weights, bank, [7, 1, 5, 3])
        repeated = run_ablation(volumes, tiny_cfg, tiny_weights, bank, [1, 3, 5, 7])

    assert [row.k for row in result.rows] == [1, 3, 5, 7]
    assert [row.checksum for row in result.rows] == [row.checksum for row in repeated.rows]
    assert len({row.checksum for row in result.rows}) == 4
    assert result.dense_checksum not in {row.checksum for row in result.rows}
    assert all(row.fusion_entropy > 0 for row in result.rows)
    assert all(row.mean_latency_ms >= 0 for row in result.rows)


def test_run_ablation__k_zero(volumes, tiny_cfg, tiny_weights, tiny_bank):
    with open_bank(tiny_bank) as bank:
        result = run_ablation(volumes, tiny_cfg, tiny_weights, bank, [0, 1])
    assert result.rows[0].checksum == result.dense_checksum
    assert result.rows[0].fusion_entropy == 0.0
    assert result.dense_checksum == features_checksum(
        [encode(v, tiny_cfg, tiny_weights).features for v in volumes]
    )


def test_run_ablation__small_bank(tmp_path, volumes, tiny_cfg, tiny_weights, class_manifest):
    path = tmp_path / 'small.msb'
    manifest = evolve(class_manifest, volume_paths=class_manifest.volume_paths[:3])
    build_bank(manifest, tiny_weights, out_path=path)

    with open_bank(path) as bank:
        with pytest.raises(ParameterError, match='fewer than the largest k'):
            run_ablation(volumes, tiny_cfg, tiny_weights, bank, [1, 5])
        result = run_ablation(volumes, tiny_cfg, tiny_weights, bank, [3, 5], strict=False)
    # Retrieval is clamped to the 3 available entries
    assert result.rows[0].checksum == result.rows[1].checksum


@pytest.mark.parametrize('k_values', [[], [-1, 3]])
def test_run_ablation__invalid(volumes, tiny_cfg, tiny_weights, tiny_bank, k_values):
    with open_bank(tiny_bank) as bank:
        with pytest.raises(ParameterError):
            run_ablation(volumes, tiny_cfg, tiny_weights, bank, k_values)


def test_write_ablation_csv(tmp_path):
    rows = [
        AblationRow(k=1, checksum='ab' * 32, mean_latency_ms=1.23456789, fusion_entropy=0.5),
        AblationRow(k=3, checksum='cd' * 32, mean_latency_ms=2.0),
    ]
    assert to_dataset(rows).headers == ABLATION_COLUMNS

    write_ablation_csv(rows, tmp_path / 'ablation.csv')
    lines = (tmp_path / 'ablation.csv').read_text().splitlines()
    assert lines[0] == 'k,checksum,mean_latency_ms,fusion_entropy'
    assert lines[1] == f'1,{"ab" * 32},1.234568,0.5'
    assert len(lines) == 3


def test_write_efficiency_json(tmp_path):
    report = EfficiencyReport(
        mode='memorizing',
        k=3,
        mean_ms=1.0,
        median_ms=1.0,
        p95_ms=1.5,
        parametric_flops=100,
        total_flops=120,
        params=50,
        peak_cache_bytes=4096,
    )
    write_efficiency_json([report], tmp_path / 'bench.json')
    [data] = json.loads((tmp_path / 'bench.json').read_text())
    assert data['mode'] == 'memorizing'
    assert data['total_flops'] == 120
    assert data['peak_cache_bytes'] == 4096
