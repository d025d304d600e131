"""Volumetric input images: read, write, and generate 3D intensity volumes.

Two on-disk formats are supported, selected by file extension:

* ``.vol``: self-describing container; magic ``VOL1``, dims as 3 × u32, then f32 voxels
* ``.f32`` / ``.raw``: bare little-endian f32 voxels, with dims in a JSON sidecar of the same
  name (``scan.f32`` + ``scan.json``)

Voxels are stored in C order over ``(D, H, W)``, with intensities normalized to ``[0, 1]``.

**Example**::

    >>> from memattn import read_volume, synthetic_volume, write_volume
    >>> volume = synthetic_volume((32, 32, 32), seed=1, class_id=3)
    >>> write_volume(volume, 'scan.vol')
    >>> read_volume('scan.vol').dims
    (32, 32, 32)

**Main classes and functions:**

.. autosummary::
    :nosignatures:

    Volume
    read_volume
    write_volume
    synthetic_volume
"""

import struct
from logging import getLogger
from pathlib import Path
from typing import Sequence

import numpy as np
from attr import field, frozen

from .constants import RAW_SUFFIXES, VOLUME_MAGIC, VOLUME_SUFFIX, Dims, PathOrStr
from .exceptions import DimensionError, FormatError, ParameterError
from .fileio import atomic_write, check_magic, read_exact, read_json, write_json
from .numerics import Prng

VOLUME_HEADER = struct.Struct('<4s3I')

logger = getLogger(__name__)


def _to_dims(dims: Sequence[int]) -> Dims:
    values = tuple(int(d) for d in dims)
    if len(values) != 3 or any(d <= 0 for d in values):
        raise DimensionError(f'Volume dims must be 3 positive integers, got {list(dims)}')
    return values  # type: ignore[return-value]


def _to_voxels(voxels) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(voxels, dtype=np.float32).reshape(-1))


@frozen(eq=False)
class Volume:
    """A 3D image of shape ``(D, H, W)``, stored as a flat f32 array"""

    dims: Dims = field(converter=_to_dims)
    voxels: np.ndarray = field(converter=_to_voxels)

    def __attrs_post_init__(self):
        expected = int(np.prod(self.dims))
        if self.voxels.size != expected:
            raise DimensionError(
                f'Volume has {self.voxels.size} voxels, dims {self.dims} require {expected}'
            )
        if self.voxels.size and (
            not np.all(np.isfinite(self.voxels))
            or self.voxels.min() < 0.0
            or self.voxels.max() > 1.0
        ):
            raise ParameterError('Volume intensities must be finite and within [0, 1]')

    @property
    def array(self) -> np.ndarray:
        """Voxels as a ``[D×H×W]`` view"""
        return self.voxels.reshape(self.dims)

    @classmethod
    def from_array(cls, array: np.ndarray) -> 'Volume':
        return cls(dims=np.shape(array), voxels=array)


def read_volume(path: PathOrStr) -> Volume:
    """Read a volume from a ``.vol`` container, or a raw f32 file with a JSON sidecar"""
    path = Path(path).expanduser()
    suffix = path.suffix.lower()
    if suffix == VOLUME_SUFFIX:
        return _read_container(path)
    elif suffix in RAW_SUFFIXES:
        return _read_raw(path)
    raise FormatError(f'{path}: unsupported volume format {suffix!r}')


def _read_container(path: Path) -> Volume:
    with open(path, 'rb') as f:
        magic, *dims = VOLUME_HEADER.unpack(read_exact(f, VOLUME_HEADER.size, path, 'header'))
        check_magic(magic, VOLUME_MAGIC, path)
        dims = _to_dims(dims)
        data = read_exact(f, int(np.prod(dims)) * 4, path, 'voxels')
    return Volume(dims=dims, voxels=np.frombuffer(data, dtype='<f4'))


def _read_raw(path: Path) -> Volume:
    sidecar = path.with_suffix('.json')
    if not sidecar.is_file():
        raise FileNotFoundError(f'{path}: missing sidecar {sidecar}')
    metadata = read_json(sidecar)
    if metadata.get('dtype', 'float32') != 'float32':
        raise FormatError(f'{sidecar}: unsupported dtype {metadata["dtype"]!r}')
    try:
        dims = _to_dims(metadata['dims'])
    except KeyError:
        raise FormatError(f'{sidecar}: missing "dims"') from None
    expected = int(np.prod(dims)) * 4
    data = path.read_bytes()
    if len(data) != expected:
        raise DimensionError(f'{path}: {len(data)} bytes, dims {dims} require {expected}')
    return Volume(dims=dims, voxels=np.frombuffer(data, dtype='<f4'))


def write_volume(volume: Volume, path: PathOrStr):
    """Write a volume in the format given by the file extension"""
    path = Path(path).expanduser()
    suffix = path.suffix.lower()
    data = volume.voxels.astype('<f4').tobytes()
    if suffix == VOLUME_SUFFIX:
        with atomic_write(path) as f:
            f.write(VOLUME_HEADER.pack(VOLUME_MAGIC, *volume.dims))
            f.write(data)
    elif suffix in RAW_SUFFIXES:
        with atomic_write(path) as f:
            f.write(data)
        write_json(
            {'dims': list(volume.dims), 'dtype': 'float32', 'byte_order': 'little'},
            path.with_suffix('.json'),
        )
    else:
        raise FormatError(f'{path}: unsupported volume format {suffix!r}')
    logger.debug(f'Wrote volume {volume.dims} to {path}')


def synthetic_volume(dims: Sequence[int], seed: int, class_id: int = 0) -> Volume:
    """Generate a smooth volume with class-dependent structure.

    Each class places a Gaussian blob at its own center and radius; ``seed`` jitters the blob and
    adds low-frequency background texture. Volumes of one class are therefore closer to each other
    than to volumes of other classes, which gives retrieval something to find.
    """
    dims = _to_dims(dims)
    class_prng = Prng(class_id)
    center = class_prng.uniform(3, 0.25, 0.75)
    sigma = 0.12 + 0.04 * (class_id % 3)

    prng = Prng(seed)
    center = center + prng.uniform(3, -0.05, 0.05)
    grid = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in dims], indexing='ij')
    sq_dist = sum((axis - c) ** 2 for axis, c in zip(grid, center))
    values = 0.1 + 0.8 * np.exp(-sq_dist / (2 * sigma**2))

    frequencies = prng.uniform((3, 3), 0.5, 2.0)
    phases = prng.uniform(3, 0.0, 2 * np.pi)
    for freq, phase in zip(frequencies, phases):
        wave = sum(f * axis for f, axis in zip(freq, grid))
        values = values + 0.05 * np.cos(2 * np.pi * wave + phase)

    return Volume(dims=dims, voxels=np.clip(values, 0.0, 1.0))
