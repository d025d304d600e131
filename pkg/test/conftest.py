# flake8: noqa: F401
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pytest

from memattn import (
    BankHeader,
    ClassDatasetManifest,
    EncoderConfig,
    MemoryEntry,
    Prng,
    build_bank,
    init_encoder_weights,
    synthetic_volume,
    write_bank,
    write_volume,
)

PROJECT_DIR = Path(__file__).parent.parent.absolute()

# logging.basicConfig(level='DEBUG')

# 16³ volumes, 8 tokens of width 24, one memorizing layer out of two
TINY_CONFIG = EncoderConfig(
    volume_dims=(16, 16, 16),
    patch_size=8,
    d_model=24,
    d_ff=48,
    num_heads=2,
    num_layers=2,
    memorizing_layers=(1,),
    seed=42,
)
TINY_CONFIG_DICT = TINY_CONFIG.to_dict()


def random_entries(
    header: BankHeader,
    count: int,
    seed: int = 0,
    fingerprints: Optional[np.ndarray] = None,
    class_id: int = 0,
) -> List[MemoryEntry]:
    """Random bank entries for the given geometry"""
    prng = Prng(seed)
    if fingerprints is None:
        fingerprints = prng.standard_normal((count, header.fingerprint_dim))
    shape = (header.n_tokens, header.d_model)
    return [
        MemoryEntry(
            fingerprint=fingerprints[i],
            layers={
                layer_id: (prng.standard_normal(shape), prng.standard_normal(shape))
                for layer_id in header.layer_ids
            },
            class_id=class_id,
            source_id=i.to_bytes(16, 'little'),
        )
        for i in range(count)
    ]


def small_header(fingerprint_dim: int = 4, **kwargs) -> BankHeader:
    """A bank geometry with small payloads, for index and cache tests"""
    return BankHeader(
        fingerprint_dim=fingerprint_dim,
        layer_ids=kwargs.pop('layer_ids', (0,)),
        n_tokens=kwargs.pop('n_tokens', 2),
        num_heads=kwargs.pop('num_heads', 1),
        d_model=kwargs.pop('d_model', 2),
        **kwargs,
    )


def write_random_bank(path: Path, count: int, seed: int = 0, **kwargs) -> List[MemoryEntry]:
    header = small_header(**kwargs)
    entries = random_entries(header, count, seed)
    write_bank(entries, header, path)
    return entries


def write_class_volumes(
    out_dir: Path,
    class_id: int,
    count: int,
    dims: Sequence[int] = TINY_CONFIG.volume_dims,
    seed: int = 0,
) -> ClassDatasetManifest:
    """Write synthetic volumes for one class, plus a manifest file, and return the manifest"""
    paths = []
    for i in range(count):
        path = out_dir / f'class_{class_id}' / f'vol_{i:03d}.vol'
        write_volume(synthetic_volume(dims, seed + 100 * class_id + i, class_id), path)
        paths.append(path)

    manifest: Dict = {
        'class_id': class_id,
        'label': f'class_{class_id}',
        'volume_paths': [str(p.relative_to(out_dir)) for p in paths],
    }
    (out_dir / f'class_{class_id}.json').write_text(json.dumps(manifest))
    return ClassDatasetManifest(class_id=class_id, label=f'class_{class_id}', volume_paths=paths)


@pytest.fixture
def tiny_cfg():
    return TINY_CONFIG


@pytest.fixture
def tiny_weights():
    return init_encoder_weights(TINY_CONFIG)


@pytest.fixture
def tiny_volume():
    return synthetic_volume(TINY_CONFIG.volume_dims, seed=7, class_id=1)


@pytest.fixture
def class_manifest(tmp_path):
    """A 16-volume synthetic class on disk"""
    return write_class_volumes(tmp_path, class_id=1, count=16)


@pytest.fixture
def tiny_bank(tmp_path, class_manifest, tiny_weights):
    """A 16-entry bank built from ``class_manifest``"""
    path = tmp_path / 'class_1.msb'
    build_bank(class_manifest, tiny_weights, out_path=path)
    return path
