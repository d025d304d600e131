"""Thread-safe LRU cache for decoded bank payloads, with hit/miss/byte accounting"""

from collections import OrderedDict
from logging import getLogger
from threading import Lock
from typing import Callable, Dict, Generic, Hashable, List, Optional, Tuple, TypeVar

from .exceptions import ParameterError

K = TypeVar('K', bound=Hashable)
V = TypeVar('V')

logger = getLogger(__name__)


class LRUCache(Generic[K, V]):
    """Least-recently-used cache holding at most ``capacity`` entries.

    Each entry carries a byte size, so the cache can report how much decoded data is resident
    (and the peak over its lifetime) independently of the entry count limit.

    Args:
        capacity: Maximum number of resident entries
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError(f'Cache capacity must be at least 1, got {capacity}')
        self.capacity = capacity
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.resident_bytes = 0
        self.peak_bytes = 0
        self._entries: 'OrderedDict[K, Tuple[V, int]]' = OrderedDict()
        self._lock = Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def get(self, key: K) -> Optional[V]:
        """Get a cached value and mark it as most recently used, or ``None`` on a miss"""
        with self._lock:
            if key not in self._entries:
                self.misses += 1
                return None
            self.hits += 1
            self._entries.move_to_end(key)
            return self._entries[key][0]

    def put(self, key: K, value: V, nbytes: int = 0):
        """Insert a value, evicting least recently used entries beyond capacity"""
        with self._lock:
            if key in self._entries:
                self.resident_bytes -= self._entries.pop(key)[1]
            self._entries[key] = (value, nbytes)
            self.resident_bytes += nbytes
            while len(self._entries) > self.capacity:
                evicted_key, (_, evicted_bytes) = self._entries.popitem(last=False)
                self.resident_bytes -= evicted_bytes
                self.evictions += 1
                logger.debug(f'Evicted {evicted_key} from cache')
            self.peak_bytes = max(self.peak_bytes, self.resident_bytes)

    def get_or_load(self, key: K, loader: Callable[[], V], nbytes: int = 0) -> V:
        """Get a cached value, or load and insert it on a miss. The loader runs outside the lock,
        so concurrent misses on the same key may each load it once.
        """
        value = self.get(key)
        if value is None:
            value = loader()
            self.put(key, value, nbytes)
        return value

    def keys(self) -> List[K]:
        """Resident keys, least recently used first"""
        with self._lock:
            return list(self._entries.keys())

    def clear(self):
        with self._lock:
            self._entries.clear()
            self.resident_bytes = 0

    def stats(self) -> Dict[str, int]:
        with self._lock:
            return {
                'capacity': self.capacity,
                'resident': len(self._entries),
                'hits': self.hits,
                'misses': self.misses,
                'evictions': self.evictions,
                'resident_bytes': self.resident_bytes,
                'peak_bytes': self.peak_bytes,
            }
