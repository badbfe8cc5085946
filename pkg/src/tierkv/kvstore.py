"""Two-tier value storage with a chunk-granular LRU residency cache.

The slow tier holds every offloaded chunk. A bounded fast cache per
``(layer, kv_head)`` records which chunks were recently selected; a fetch
of a resident chunk is a hit and moves no bytes. Transfer cost is pure
byte accounting.
"""

from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import ChunkNotFoundError, DataError, ParameterError

BYTES_PER_FLOAT = 4


class ChunkId(NamedTuple):
    layer: int
    kv_head: int
    chunk: int


@dataclass(frozen=True)
class TierStats:
    slow_tier_bytes: int = 0
    fast_tier_bytes: int = 0
    bytes_fetched_total: int = 0
    chunks_requested: int = 0
    chunks_hit: int = 0

    @property
    def hit_rate(self) -> float:
        if self.chunks_requested == 0:
            return 0.0
        return self.chunks_hit / self.chunks_requested

    def __sub__(self, other: "TierStats") -> "TierStats":
        return TierStats(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["hit_rate"] = self.hit_rate
        return d


class TieredValueStore:
    """Slow-tier map of value blocks fronted by per-head LRU caches.

    ``capacity`` counts chunks per ``(layer, kv_head)`` partition. The store
    is meant to be owned by a single decode worker.
    """

    def __init__(self, chunk_shape, capacity: int = 0):
        if capacity < 0:
            raise ParameterError(f"cache capacity must be >= 0, got {capacity}")
        self.chunk_shape = tuple(int(x) for x in chunk_shape)
        self.capacity = int(capacity)
        self.chunk_bytes = int(np.prod(self.chunk_shape)) * BYTES_PER_FLOAT
        self._slow: dict[ChunkId, np.ndarray] = {}
        self._fast: dict[tuple[int, int], OrderedDict] = {}
        self._stats = TierStats()

    def __len__(self):
        return len(self._slow)

    def __contains__(self, cid):
        return ChunkId(*cid) in self._slow

    def ids(self):
        return sorted(self._slow)

    def _put(self, cid, block):
        cid = ChunkId(*(int(x) for x in cid))
        if cid in self._slow:
            raise DataError(f"duplicate chunk id {cid}")
        block = np.array(block, dtype=np.float32, copy=True)
        if block.shape != self.chunk_shape:
            raise DataError(f"chunk {cid} has shape {block.shape}, expected {self.chunk_shape}")
        block.setflags(write=False)
        self._slow[cid] = block

    def resident(self, layer: int, kv_head: int) -> list:
        """Chunk indices resident in the fast cache, least recently selected first."""
        return list(self._fast.get((layer, kv_head), ()))

    def fetch(self, ids: Iterable) -> tuple[dict, dict]:
        """Return ``(blocks, hits)`` keyed by ChunkId.

        Hit flags reflect residency before this call. Ids are processed in
        sorted order; misses are inserted and the least recently selected
        chunk is evicted when the partition is over capacity.
        """
        ids = sorted({ChunkId(*(int(x) for x in cid)) for cid in ids})
        for cid in ids:
            if cid not in self._slow:
                raise ChunkNotFoundError(cid)
        before = {cid: cid.chunk in self._fast.get((cid.layer, cid.kv_head), ()) for cid in ids}
        blocks, hits = {}, {}
        n_hit = 0
        for cid in ids:
            part = self._fast.setdefault((cid.layer, cid.kv_head), OrderedDict())
            hit = before[cid]
            hits[cid] = hit
            blocks[cid] = self._slow[cid]
            if hit:
                n_hit += 1
                if cid.chunk in part:
                    part.move_to_end(cid.chunk)
                    continue
            if self.capacity == 0:
                continue
            part[cid.chunk] = True
            part.move_to_end(cid.chunk)
            while len(part) > self.capacity:
                part.popitem(last=False)
        resident = sum(len(p) for p in self._fast.values())
        s = self._stats
        self._stats = replace(
            s,
            fast_tier_bytes=resident * self.chunk_bytes,
            bytes_fetched_total=s.bytes_fetched_total + (len(ids) - n_hit) * self.chunk_bytes,
            chunks_requested=s.chunks_requested + len(ids),
            chunks_hit=s.chunks_hit + n_hit,
        )
        return blocks, hits

    def stats_snapshot(self) -> TierStats:
        return self._stats

    def reset_cache(self):
        self._fast.clear()
        self._stats = TierStats(slow_tier_bytes=self._stats.slow_tier_bytes)

    def save(self, directory):
        """Persist the slow tier as two tensor files: ``values.skvt`` and ``index.skvt``."""
        from .tensorfile import write_tensor

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ids = self.ids()
        rows, cols = self.chunk_shape
        values = np.zeros((1, len(ids), rows, cols), dtype=np.float32)
        for i, cid in enumerate(ids):
            values[0, i] = self._slow[cid]
        index = np.asarray(ids, dtype=np.float32).reshape(1, 1, len(ids), 3)
        write_tensor(directory / "values.skvt", values)
        write_tensor(directory / "index.skvt", index)

    @classmethod
    def load(cls, directory, capacity: int = 0) -> "TieredValueStore":
        from .tensorfile import read_tensor

        directory = Path(directory)
        values = read_tensor(directory / "values.skvt")
        index = read_tensor(directory / "index.skvt")
        ids = [ChunkId(*(int(v) for v in row)) for row in index.reshape(-1, 3)]
        return offload(dict(zip(ids, values[0])), capacity=capacity, chunk_shape=values.shape[2:])


def offload(blocks: Mapping, capacity: int = 0, chunk_shape=None) -> TieredValueStore:
    """Build a store holding ``blocks`` (ChunkId -> c x d array) on the slow tier.

    The fast cache starts empty and all counters except ``slow_tier_bytes``
    are zero.
    """
    items = list(blocks.items())
    if chunk_shape is None:
        chunk_shape = np.shape(items[0][1]) if items else (0, 0)
    store = TieredValueStore(chunk_shape, capacity)
    for cid, block in items:
        store._put(cid, block)
    store._stats = TierStats(slow_tier_bytes=len(store) * store.chunk_bytes)
    return store
