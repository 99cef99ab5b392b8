"""Static record cache filled in hop order from the search entry point."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import GraphIndex
from .layout import DiskIndex


@dataclass
class CacheSet:
    """Decoded records kept in memory: ``id -> (vector, neighbor ids)``."""

    capacity: int
    policy: str = "bfs"
    records: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, v) -> bool:
        return int(v) in self.records

    def nbytes(self) -> int:
        return sum(vec.nbytes + nb.nbytes for vec, nb in self.records.values())


def bfs_order(g: GraphIndex, entry: int, limit: int) -> list[int]:
    """First ``limit`` vertices by hop distance from ``entry``; ties in a hop by id."""
    if not 0 <= entry < g.n:
        raise ValueError(f"entry {entry} out of range [0, {g.n})")
    if limit <= 0:
        return []
    seen = np.zeros(g.n, dtype=bool)
    seen[entry] = True
    order, level = [entry], [entry]
    while level and len(order) < limit:
        nxt = set()
        for v in level:
            for u in g.neighbors(v):
                if not seen[u]:
                    nxt.add(int(u))
        level = sorted(nxt)
        seen[level] = True
        order.extend(level)
    return order[:limit]


def build_sssp_cache(g: GraphIndex, disk: DiskIndex, entry: int, budget: int) -> CacheSet:
    """Cache the ``budget`` records nearest to ``entry`` in hops, decoded from the index file."""
    if budget < 0:
        raise ValueError("cache budget must be >= 0")
    ids = bfs_order(g, entry, budget)
    cache = CacheSet(budget, "bfs")
    if not ids:
        return cache
    layout = disk.layout
    wanted: dict[int, list[int]] = {}
    for v in ids:
        wanted.setdefault(int(layout.page_of[v]), []).append(v)
    with open(disk.path, "rb") as f:
        for page in sorted(wanted):
            f.seek(disk.page_offset(page))
            recs = disk.decode_page(f.read(disk.page_size))
            for v in wanted[page]:
                r = recs[int(layout.slot_of[v])]
                cache.records[v] = (r["vec"].copy(), r["nbrs"][:r["cnt"]].astype(np.int64))
    return cache


def cache_lookup(cache: CacheSet | None, v: int):
    """``(vector, neighbors)`` for a cached id, or ``None`` on a miss."""
    if cache is None:
        return None
    return cache.records.get(int(v))


def budget_records(n: int, fraction: float) -> int:
    """Record count for a fractional budget (e.g. 0.001 of the dataset)."""
    return int(round(n * fraction))
