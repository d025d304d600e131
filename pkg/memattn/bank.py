"""Read and write memory banks: on-disk collections of (fingerprint, key, value) tuples captured
from a frozen encoder, with lazy payload loading and exact kNN search.

**File layout** (all integers and floats little-endian; see ``docs/formats.md`` for details)::

    header   magic "MSAMBNK1" | version u32 | dtype_code u32 | fingerprint_dim u32
             | n_layers u32 | layer_ids u32 × n_layers | n_tokens u32 | num_heads u32
             | d_model u32 | entry_count u64
    index    entry_count rows of: fingerprint f32 × fingerprint_dim | offset u64 | length u64
             | class_id u32 | source_id 16 bytes | crc32 u32
    payload  entry_count payloads; each holds, per layer in layer_ids order, keys then values as
             f32 [n_tokens×d_model]

Opening a bank reads only the header and index. A payload is read from disk the first time a
retrieval touches it, checked against its CRC32, decoded, and kept in an LRU cache.

**Example**::

    >>> from memattn import open_bank
    >>> with open_bank('class_7.msb', cache_capacity=16) as bank:
    ...     neighbors = bank.search(fingerprint, k=3)
    ...     keys, values = bank.fetch(neighbors[0][0], layer_id=2)

**Main classes and functions:**

.. autosummary::
    :nosignatures:

    BankHeader
    MemoryEntry
    BankHandle
    BankSet
    write_bank
    open_bank
    open_banks
    knn_search
    fetch_payload
    merge_banks
"""

import struct
import zlib
from logging import getLogger
from pathlib import Path
from shutil import copyfileobj
from tempfile import TemporaryFile
from threading import Lock
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from attr import define, evolve, field, frozen

from .cache import LRUCache
from .constants import (
    BANK_MAGIC,
    BANK_VERSION,
    DEFAULT_CACHE_CAPACITY,
    DTYPE_F32,
    PathOrStr,
)
from .exceptions import CorruptionError, DimensionError, ParameterError, SchemaError
from .fileio import atomic_write, check_magic, check_version, pack_u32s, read_exact
from .numerics import Tensor, as_tensor, l2_distances

# magic, version, dtype_code, fingerprint_dim, n_layers
HEADER_PREFIX = struct.Struct('<8sIIII')
# n_tokens, num_heads, d_model, entry_count
HEADER_SUFFIX = struct.Struct('<IIIQ')
SOURCE_ID_SIZE = 16

KeyValue = Tuple[Tensor, Tensor]
Neighbor = Tuple[int, float]

logger = getLogger(__name__)


def _positive_ints(instance, attribute, value):
    if isinstance(value, tuple):
        if not value or any(v < 0 for v in value):
            raise SchemaError(f'{attribute.name} must be a non-empty list of layer indices')
    elif value <= 0:
        raise SchemaError(f'{attribute.name} must be positive, got {value}')


@frozen
class BankHeader:
    """Bank geometry and entry count"""

    fingerprint_dim: int = field(validator=_positive_ints)
    layer_ids: Tuple[int, ...] = field(converter=tuple, validator=_positive_ints)
    n_tokens: int = field(validator=_positive_ints)
    num_heads: int = field(validator=_positive_ints)
    d_model: int = field(validator=_positive_ints)
    entry_count: int = field(default=0)
    version: int = field(default=BANK_VERSION)
    dtype_code: int = field(default=DTYPE_F32)

    @property
    def geometry(self) -> tuple:
        """Everything except the entry count; banks with equal geometry can be merged"""
        return (
            self.dtype_code,
            self.fingerprint_dim,
            self.layer_ids,
            self.n_tokens,
            self.num_heads,
            self.d_model,
        )

    def describe(self) -> str:
        return (
            f'fingerprint_dim={self.fingerprint_dim}, layers={list(self.layer_ids)}, '
            f'n_tokens={self.n_tokens}, num_heads={self.num_heads}, d_model={self.d_model}'
        )

    @property
    def header_size(self) -> int:
        return HEADER_PREFIX.size + 4 * len(self.layer_ids) + HEADER_SUFFIX.size

    @property
    def index_row_size(self) -> int:
        return self.index_dtype.itemsize

    @property
    def index_dtype(self) -> np.dtype:
        return np.dtype(
            [
                ('fingerprint', '<f4', (self.fingerprint_dim,)),
                ('offset', '<u8'),
                ('length', '<u8'),
                ('class_id', '<u4'),
                ('source_id', f'V{SOURCE_ID_SIZE}'),
                ('crc32', '<u4'),
            ]
        )

    @property
    def payload_size(self) -> int:
        return len(self.layer_ids) * 2 * self.n_tokens * self.d_model * 4

    @property
    def file_size(self) -> int:
        return self.header_size + self.entry_count * (self.index_row_size + self.payload_size)

    def pack(self) -> bytes:
        return (
            HEADER_PREFIX.pack(
                BANK_MAGIC, self.version, self.dtype_code, self.fingerprint_dim, len(self.layer_ids)
            )
            + pack_u32s(self.layer_ids)
            + HEADER_SUFFIX.pack(self.n_tokens, self.num_heads, self.d_model, self.entry_count)
        )

    @classmethod
    def read(cls, f, path: PathOrStr) -> 'BankHeader':
        """Read and validate a header from the start of an open bank file"""
        prefix = read_exact(f, HEADER_PREFIX.size, path, 'header')
        magic, version, dtype_code, fingerprint_dim, n_layers = HEADER_PREFIX.unpack(prefix)
        check_magic(magic, BANK_MAGIC, path)
        check_version(version, BANK_VERSION, path)
        if dtype_code != DTYPE_F32:
            raise CorruptionError(f'{path}: unknown dtype code {dtype_code}')
        rest = read_exact(f, 4 * n_layers + HEADER_SUFFIX.size, path, 'header')
        layer_ids = struct.unpack(f'<{n_layers}I', rest[: 4 * n_layers])
        n_tokens, num_heads, d_model, entry_count = HEADER_SUFFIX.unpack(rest[4 * n_layers :])
        try:
            return cls(
                fingerprint_dim=fingerprint_dim,
                layer_ids=layer_ids,
                n_tokens=n_tokens,
                num_heads=num_heads,
                d_model=d_model,
                entry_count=entry_count,
                version=version,
                dtype_code=dtype_code,
            )
        except SchemaError as e:
            raise CorruptionError(f'{path}: invalid header: {e}') from e


@define(eq=False)
class MemoryEntry:
    """One stored memory: an image fingerprint, and post-projection keys and values for each
    memorized layer.
    """

    fingerprint: Tensor = field(converter=as_tensor)
    layers: Dict[int, KeyValue] = field()
    class_id: int = field(default=0)
    source_id: bytes = field(default=bytes(SOURCE_ID_SIZE))

    def check_geometry(self, header: BankHeader, position: Optional[int] = None):
        where = f'Entry {position}' if position is not None else 'Entry'
        if self.fingerprint.shape != (header.fingerprint_dim,):
            raise SchemaError(
                f'{where}: fingerprint shape {self.fingerprint.shape} does not match '
                f'fingerprint_dim={header.fingerprint_dim}'
            )
        if set(self.layers) != set(header.layer_ids):
            raise SchemaError(
                f'{where}: layers {sorted(self.layers)} do not match {list(header.layer_ids)}'
            )
        shape = (header.n_tokens, header.d_model)
        for layer_id, (keys, values) in self.layers.items():
            if keys.shape != shape or values.shape != shape:
                raise SchemaError(
                    f'{where}, layer {layer_id}: key/value shapes {keys.shape}/{values.shape} '
                    f'do not match {shape}'
                )
        if len(self.source_id) != SOURCE_ID_SIZE:
            raise SchemaError(f'{where}: source_id must be {SOURCE_ID_SIZE} bytes')

    def payload(self, layer_ids: Sequence[int]) -> bytes:
        """Serialized keys and values, in ``layer_ids`` order"""
        parts = []
        for layer_id in layer_ids:
            keys, values = self.layers[layer_id]
            parts.append(np.asarray(keys, dtype='<f4').tobytes(order='C'))
            parts.append(np.asarray(values, dtype='<f4').tobytes(order='C'))
        return b''.join(parts)


def decode_payload(data: bytes, header: BankHeader) -> Dict[int, KeyValue]:
    """Decode raw payload bytes into ``{layer_id: (keys, values)}``"""
    shape = (len(header.layer_ids), 2, header.n_tokens, header.d_model)
    tensors = np.frombuffer(data, dtype='<f4').reshape(shape).astype(np.float32)
    return {
        layer_id: (tensors[i, 0], tensors[i, 1]) for i, layer_id in enumerate(header.layer_ids)
    }


def write_bank(
    entries: Iterable[MemoryEntry], header: BankHeader, path: PathOrStr
) -> BankHeader:
    """Write a bank file from a stream of entries, in a single pass over the stream.

    Payloads are spooled to a temporary file while the index is built in memory; the final file
    is then assembled next to ``path`` and renamed into place, so a failed write never leaves a
    partial bank behind.

    Args:
        entries: Entries matching the header geometry
        header: Bank geometry; its ``entry_count`` is ignored and set from the stream
        path: Output bank path

    Returns:
        The header as written, with the final entry count
    """
    path = Path(path).expanduser()
    rows = []
    with TemporaryFile() as spool:
        for position, entry in enumerate(entries):
            entry.check_geometry(header, position)
            data = entry.payload(header.layer_ids)
            rows.append(
                (
                    entry.fingerprint,
                    len(data),
                    entry.class_id,
                    bytes(entry.source_id),
                    zlib.crc32(data),
                )
            )
            spool.write(data)

        header = evolve(header, entry_count=len(rows))
        index = np.zeros(len(rows), dtype=header.index_dtype)
        payload_start = header.header_size + len(rows) * header.index_row_size
        for i, (fingerprint, length, class_id, source_id, crc) in enumerate(rows):
            index[i] = (fingerprint, payload_start + i * length, length, class_id, source_id, crc)

        spool.seek(0)
        with atomic_write(path) as f:
            f.write(header.pack())
            f.write(index.tobytes())
            copyfileobj(spool, f)

    logger.info(f'Wrote {header.entry_count} entries to {path}')
    return header


class BankHandle:
    """An open, read-only memory bank.

    The header and index are loaded eagerly; payloads are read lazily through an LRU cache of
    ``cache_capacity`` decoded entries. Reads and cache updates are synchronized, so one handle
    can serve concurrent forward passes.

    Args:
        path: Path to a bank file
        cache_capacity: Maximum number of decoded payloads to keep in memory
    """

    def __init__(self, path: PathOrStr, cache_capacity: int = DEFAULT_CACHE_CAPACITY):
        self.path = Path(path).expanduser()
        self.bytes_read = 0
        self.cache: LRUCache[int, Dict[int, KeyValue]] = LRUCache(cache_capacity)
        self._lock = Lock()
        self._file = open(self.path, 'rb')
        try:
            self.header = BankHeader.read(self._file, self.path)
            index_size = self.header.entry_count * self.header.index_row_size
            index_bytes = read_exact(self._file, index_size, self.path, 'index')
        except Exception:
            self._file.close()
            raise
        self.bytes_read = self.header.header_size + index_size
        self.index = np.frombuffer(index_bytes, dtype=self.header.index_dtype)
        self.fingerprints = self.index['fingerprint'].astype(np.float32)
        self._check_index()
        logger.info(f'Opened bank {self.path} with {self.header.entry_count} entries')

    def _check_index(self):
        expected_end = self.header.file_size
        file_size = self.path.stat().st_size
        if file_size < expected_end:
            self._file.close()
            raise CorruptionError(
                f'{self.path}: truncated payload region ({file_size} of {expected_end} bytes)'
            )
        bad_rows = np.nonzero(self.index['length'] != self.header.payload_size)[0]
        if len(bad_rows):
            self._file.close()
            raise CorruptionError(
                f'{self.path}: entry {int(bad_rows[0])} has payload length '
                f'{int(self.index["length"][bad_rows[0]])}, expected {self.header.payload_size}',
                entry_id=int(bad_rows[0]),
            )

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def __len__(self) -> int:
        return self.entry_count

    def __repr__(self):
        return f'BankHandle({self.path}, entries={self.entry_count})'

    def close(self):
        self._file.close()

    @property
    def entry_count(self) -> int:
        return self.header.entry_count

    @property
    def class_ids(self) -> np.ndarray:
        return self.index['class_id']

    @property
    def cache_hits(self) -> int:
        return self.cache.hits

    @property
    def cache_misses(self) -> int:
        return self.cache.misses

    @property
    def peak_cache_bytes(self) -> int:
        return self.cache.peak_bytes

    def source_id(self, entry_id: int) -> bytes:
        return bytes(self.index['source_id'][entry_id])

    def search(self, query: np.ndarray, k: int) -> List[Neighbor]:
        """Exact k nearest entries to ``query`` by Euclidean distance, nearest first.
        Ties go to the lower entry id. Only the in-memory index is touched.
        """
        return _search(self.fingerprints, query, k)

    def fetch(self, entry_id: int, layer_id: int) -> KeyValue:
        """Get the keys and values stored for one entry and layer"""
        if layer_id not in self.header.layer_ids:
            raise ParameterError(
                f'{self.path}: layer {layer_id} is not memorized '
                f'(available: {list(self.header.layer_ids)})'
            )
        layers = self.cache.get_or_load(
            entry_id, lambda: self._load(entry_id), self.header.payload_size
        )
        return layers[layer_id]

    def read_entry(self, entry_id: int, use_cache: bool = True) -> MemoryEntry:
        """Get a complete entry, including its fingerprint and metadata"""
        if use_cache:
            layers = self.cache.get_or_load(
                entry_id, lambda: self._load(entry_id), self.header.payload_size
            )
        else:
            layers = self._load(entry_id)
        return MemoryEntry(
            fingerprint=self.fingerprints[entry_id],
            layers=layers,
            class_id=int(self.index['class_id'][entry_id]),
            source_id=self.source_id(entry_id),
        )

    def _load(self, entry_id: int) -> Dict[int, KeyValue]:
        """Read, verify, and decode one payload from disk"""
        self._check_entry_id(entry_id)
        row = self.index[entry_id]
        with self._lock:
            self._file.seek(int(row['offset']))
            data = read_exact(self._file, int(row['length']), self.path, f'payload {entry_id}')
            self.bytes_read += len(data)
        if zlib.crc32(data) != int(row['crc32']):
            raise CorruptionError(
                f'{self.path}: CRC mismatch in entry {entry_id}', entry_id=entry_id
            )
        logger.debug(f'Loaded entry {entry_id} from {self.path}')
        return decode_payload(data, self.header)

    def _check_entry_id(self, entry_id: int):
        if not 0 <= entry_id < self.entry_count:
            raise ParameterError(
                f'{self.path}: entry {entry_id} out of range (0..{self.entry_count - 1})'
            )

    def class_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.class_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def stats(self) -> Dict:
        """Summary of bank contents and I/O counters"""
        return {
            'path': str(self.path),
            **_header_dict(self.header),
            'class_counts': self.class_counts(),
            'payload_bytes': self.entry_count * self.header.payload_size,
            'bytes_read': self.bytes_read,
            **{f'cache_{k}': v for k, v in self.cache.stats().items()},
        }


class BankSet:
    """Several banks searched as one. Entry ids are numbered across members in input order, so
    searching a ``BankSet`` gives the same results as searching the output of
    :py:func:`merge_banks` on the same files.

    Decoded payloads go into one LRU cache for the whole set, keyed by set-wide entry id, so at
    most ``cache_capacity`` entries are resident however many members there are. The members'
    own caches are left unused.

    Args:
        handles: Open banks with identical geometry
        cache_capacity: Maximum number of decoded payloads to keep in memory, across all members
    """

    def __init__(
        self, handles: Sequence[BankHandle], cache_capacity: int = DEFAULT_CACHE_CAPACITY
    ):
        if not handles:
            raise ParameterError('A bank set needs at least one bank')
        reference = handles[0].header
        for handle in handles[1:]:
            if handle.header.geometry != reference.geometry:
                raise SchemaError(
                    f'{handle.path}: geometry ({handle.header.describe()}) differs from '
                    f'{handles[0].path} ({reference.describe()})'
                )
        self.handles = list(handles)
        self.offsets = np.cumsum([0] + [h.entry_count for h in handles])
        self.header = evolve(reference, entry_count=int(self.offsets[-1]))
        self.fingerprints = np.concatenate([h.fingerprints for h in handles])
        self.cache: LRUCache[int, Dict[int, KeyValue]] = LRUCache(cache_capacity)

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def __len__(self) -> int:
        return self.entry_count

    def close(self):
        for handle in self.handles:
            handle.close()

    @property
    def entry_count(self) -> int:
        return self.header.entry_count

    @property
    def class_ids(self) -> np.ndarray:
        return np.concatenate([h.class_ids for h in self.handles])

    @property
    def bytes_read(self) -> int:
        return sum(h.bytes_read for h in self.handles)

    @property
    def cache_hits(self) -> int:
        return self.cache.hits

    @property
    def cache_misses(self) -> int:
        return self.cache.misses

    @property
    def peak_cache_bytes(self) -> int:
        return self.cache.peak_bytes

    def _locate(self, entry_id: int) -> Tuple[BankHandle, int]:
        if not 0 <= entry_id < self.entry_count:
            raise ParameterError(f'Entry {entry_id} out of range (0..{self.entry_count - 1})')
        member = int(np.searchsorted(self.offsets, entry_id, side='right')) - 1
        return self.handles[member], entry_id - int(self.offsets[member])

    def search(self, query: np.ndarray, k: int) -> List[Neighbor]:
        return _search(self.fingerprints, query, k)

    def _load(self, entry_id: int) -> Dict[int, KeyValue]:
        handle, local_id = self._locate(entry_id)
        return handle._load(local_id)

    def fetch(self, entry_id: int, layer_id: int) -> KeyValue:
        if layer_id not in self.header.layer_ids:
            raise ParameterError(
                f'layer {layer_id} is not memorized (available: {list(self.header.layer_ids)})'
            )
        layers = self.cache.get_or_load(
            entry_id, lambda: self._load(entry_id), self.header.payload_size
        )
        return layers[layer_id]

    def read_entry(self, entry_id: int, use_cache: bool = True) -> MemoryEntry:
        handle, local_id = self._locate(entry_id)
        if use_cache:
            layers = self.cache.get_or_load(
                entry_id, lambda: self._load(entry_id), self.header.payload_size
            )
        else:
            layers = self._load(entry_id)
        return MemoryEntry(
            fingerprint=self.fingerprints[entry_id],
            layers=layers,
            class_id=int(handle.index['class_id'][local_id]),
            source_id=handle.source_id(local_id),
        )

    def stats(self) -> Dict:
        members = [h.stats() for h in self.handles]
        class_counts: Dict[int, int] = {}
        for m in members:
            for class_id, count in m['class_counts'].items():
                class_counts[class_id] = class_counts.get(class_id, 0) + count
        return {
            'path': [m['path'] for m in members],
            **_header_dict(self.header),
            'class_counts': class_counts,
            'payload_bytes': sum(m['payload_bytes'] for m in members),
            'bytes_read': self.bytes_read,
            **{f'cache_{k}': v for k, v in self.cache.stats().items()},
        }


AnyBank = Union[BankHandle, BankSet]


def _search(fingerprints: np.ndarray, query: np.ndarray, k: int) -> List[Neighbor]:
    query = np.asarray(query)
    if query.shape != (fingerprints.shape[1],):
        raise DimensionError(
            f'Query shape {query.shape} does not match fingerprint_dim={fingerprints.shape[1]}'
        )
    if k < 0:
        raise ParameterError(f'k must be non-negative, got {k}')
    if k == 0 or len(fingerprints) == 0:
        return []
    distances = l2_distances(fingerprints, query)
    order = np.argsort(distances, kind='stable')[:k]
    return [(int(i), float(distances[i])) for i in order]


def _header_dict(header: BankHeader) -> Dict:
    return {
        'version': header.version,
        'dtype_code': header.dtype_code,
        'fingerprint_dim': header.fingerprint_dim,
        'layer_ids': list(header.layer_ids),
        'n_tokens': header.n_tokens,
        'num_heads': header.num_heads,
        'd_model': header.d_model,
        'entry_count': header.entry_count,
    }


def open_bank(path: PathOrStr, cache_capacity: int = DEFAULT_CACHE_CAPACITY) -> BankHandle:
    """Open a bank file, reading only its header and index"""
    return BankHandle(path, cache_capacity=cache_capacity)


def open_banks(
    paths: Sequence[PathOrStr], cache_capacity: int = DEFAULT_CACHE_CAPACITY
) -> AnyBank:
    """Open one or more banks. A single path gives a :py:class:`BankHandle`; several give a
    :py:class:`BankSet` sharing one cache of ``cache_capacity`` entries.
    """
    if len(paths) == 1:
        return open_bank(paths[0], cache_capacity)
    handles: List[BankHandle] = []
    try:
        for path in paths:
            handles.append(open_bank(path, cache_capacity=1))
        return BankSet(handles, cache_capacity)
    except Exception:
        for handle in handles:
            handle.close()
        raise


def knn_search(handle: AnyBank, query_fp: np.ndarray, k: int) -> List[Neighbor]:
    """Exact k nearest entries as ``(entry_id, distance)``, ascending by distance then entry id"""
    return handle.search(query_fp, k)


def fetch_payload(handle: AnyBank, entry_id: int, layer_id: int) -> KeyValue:
    """Get ``(keys, values)`` for one entry and layer, loading and caching the payload if needed"""
    return handle.fetch(entry_id, layer_id)


def merge_banks(paths: Sequence[PathOrStr], out_path: PathOrStr) -> BankHeader:
    """Concatenate banks with identical geometry into a new bank, in input order.
    Entries keep their class ids and source ids. Payloads bypass the read cache.
    """
    if not paths:
        raise ParameterError('No banks to merge')
    handles = [open_bank(path, cache_capacity=1) for path in paths]
    try:
        reference = handles[0]
        for handle in handles[1:]:
            if handle.header.geometry != reference.header.geometry:
                raise SchemaError(
                    f'Cannot merge {handle.path}: geometry ({handle.header.describe()}) differs '
                    f'from {reference.path} ({reference.header.describe()})'
                )

        def iter_entries():
            for handle in handles:
                for entry_id in range(handle.entry_count):
                    yield handle.read_entry(entry_id, use_cache=False)

        header = write_bank(iter_entries(), reference.header, out_path)
    finally:
        for handle in handles:
            handle.close()
    logger.info(f'Merged {len(paths)} banks into {out_path}')
    return header
