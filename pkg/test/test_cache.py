from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from memattn.cache import LRUCache
from memattn.exceptions import ParameterError


def test_lru_order():
    cache: LRUCache[int, str] = LRUCache(2)
    for key in [0, 1, 2]:
        if cache.get(key) is None:
            cache.put(key, str(key))
    assert cache.get(0) is None
    cache.put(0, '0')

    assert cache.keys() == [2, 0]
    assert 1 not in cache
    assert cache.evictions == 2
    assert cache.misses == 4
    assert cache.hits == 0


def test_get__marks_recently_used():
    cache: LRUCache[int, str] = LRUCache(2)
    cache.put(0, 'a')
    cache.put(1, 'b')
    assert cache.get(0) == 'a'
    cache.put(2, 'c')
    assert cache.keys() == [0, 2]


def test_get_or_load():
    cache: LRUCache[str, int] = LRUCache(4)
    calls = []

    def loader():
        calls.append(1)
        return 42

    assert cache.get_or_load('key', loader, nbytes=8) == 42
    assert cache.get_or_load('key', loader, nbytes=8) == 42
    assert len(calls) == 1
    assert cache.stats()['hits'] == 1
    assert cache.stats()['misses'] == 1


def test_byte_accounting():
    cache: LRUCache[int, int] = LRUCache(2)
    cache.put(0, 0, nbytes=100)
    cache.put(1, 1, nbytes=50)
    cache.put(1, 1, nbytes=70)
    assert cache.resident_bytes == 170
    cache.put(2, 2, nbytes=10)
    assert cache.resident_bytes == 80
    assert cache.peak_bytes == 170

    cache.clear()
    assert len(cache) == 0
    assert cache.resident_bytes == 0
    assert cache.peak_bytes == 170


@pytest.mark.parametrize('capacity', [1, 2, 8])
def test_capacity_bound(capacity):
    cache: LRUCache[int, int] = LRUCache(capacity)
    rng = np.random.default_rng(capacity)
    for key in rng.integers(0, 20, size=10**4):
        cache.get_or_load(int(key), lambda: 0, nbytes=4)
        assert len(cache) <= capacity
    assert cache.peak_bytes <= capacity * 4
    assert cache.hits + cache.misses == 10**4


def test_concurrent_access():
    cache: LRUCache[int, int] = LRUCache(4)

    def worker(offset):
        for i in range(500):
            key = (i + offset) % 10
            cache.get_or_load(key, lambda: key, nbytes=1)

    with ThreadPoolExecutor(max_workers=4) as executor:
        list(executor.map(worker, range(4)))
    assert len(cache) <= 4
    assert cache.resident_bytes == len(cache)


@pytest.mark.parametrize('capacity', [0, -1])
def test_invalid_capacity(capacity):
    with pytest.raises(ParameterError):
        LRUCache(capacity)
