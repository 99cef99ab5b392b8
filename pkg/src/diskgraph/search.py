"""Best-first search over a page-resident graph index.

The engine holds the packed index (optionally a second, page-shuffled copy),
PQ codes, a MemGraph and a record cache; ``SearchConfig`` toggles which of
them a query uses. Every query reports hops, page reads and the split of
loaded records into expanded and read-but-unexpanded ones.
"""

from __future__ import annotations

import bisect
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cache import CacheSet, cache_lookup
from .graph import kernel_distance_scale, metric_view, rows_sqdist
from .iobackend import PageReader
from .layout import DiskIndex
from .memgraph import MemGraph, select_entries
from .pq import PQModel, approx_distances


class ConfigError(ValueError):
    """A toggle needs an artifact the engine was not given."""


@dataclass
class SearchConfig:
    k: int = 10
    L: int = 100
    beam: int = 8
    use_pq: bool = True
    use_cache: bool = False
    use_memgraph: bool = False
    use_shuffled_layout: bool = False
    dynamic_width: bool = False
    pipeline: bool = False
    page_search: bool = False
    omega_min: int = 8
    omega_max: int = 32
    patience: int = 2
    depth: int = 8
    L_mem: int = 10
    fanout: int = 1
    trace: bool = False

    def validate(self) -> None:
        if not 1 <= self.k <= self.L:
            raise ConfigError(f"need 1 <= k <= L (k={self.k}, L={self.L})")
        if self.beam < 1 or self.depth < 1:
            raise ConfigError("beam width and pipeline depth must be >= 1")
        if not 1 <= self.omega_min <= self.omega_max:
            raise ConfigError("need 1 <= omega_min <= omega_max")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def toggles(self) -> dict:
        return {k: getattr(self, k) for k in TOGGLES}


TOGGLES = ("use_pq", "use_cache", "use_memgraph", "use_shuffled_layout",
           "dynamic_width", "pipeline", "page_search")


@dataclass
class SearchStats:
    hops: int = 0
    pages_read: int = 0
    n_read: int = 0
    n_eff: int = 0
    cache_hits: int = 0
    full_distances: int = 0
    pq_distances: int = 0
    latency_s: float = 0.0

    @property
    def n_rbu(self) -> int:
        return self.n_read - self.n_eff

    def as_dict(self) -> dict:
        out = asdict(self)
        out["n_rbu"] = self.n_rbu
        return out


@dataclass
class SearchResult:
    ids: np.ndarray
    distances: np.ndarray
    stats: SearchStats
    events: list = field(default_factory=list)


def io_utilization(stats: SearchStats) -> float:
    """Fraction of loaded records that were expanded."""
    if stats.n_read == 0:
        raise ValueError("I/O utilisation is undefined for a query that loaded no records")
    return stats.n_eff / (stats.n_eff + stats.n_rbu)


def dynamic_width_schedule(iteration: int, converge_start: int | None, cfg: SearchConfig) -> int:
    """Width for this iteration: ``omega_min`` until convergence is detected, then doubling."""
    if converge_start is None:
        return cfg.omega_min
    step = max(0, iteration - converge_start)
    return min(cfg.omega_max, cfg.omega_min << min(step, 30))


class _Query:
    """Per-query mutable state: candidate list, loaded records, counters."""

    def __init__(self, engine: "SearchEngine", q, cfg: SearchConfig):
        self.engine, self.cfg = engine, cfg
        self.index = engine.active_index(cfg)
        self.layout = self.index.layout
        self.reader = engine.reader_for(self.index)
        self.metric = self.index.metric
        self.qv = metric_view(np.asarray(q).reshape(1, -1), self.metric)[0].astype(np.float64)
        self.table = engine.pq.table(q) if cfg.use_pq else None
        self.stats = SearchStats()
        self.cand: list = []            # sorted (key, id), at most L entries
        self.seen: set = set()          # ids ever offered to the candidate list
        self.expanded: set = set()
        self.exact: dict = {}           # id -> full-precision distance (the rerank pool)
        self.pages: dict = {}           # page -> decoded records, this query only
        self.cached: dict = {}          # id -> (vec, nbrs) taken from the cache
        self.loaded: set = set()
        self.searched_pages: set = set()
        self.events: list = [] if cfg.trace else None
        self.best = np.inf

    # -- record access -------------------------------------------------------

    def record(self, v: int):
        page = int(self.layout.page_of[v])
        recs = self.pages.get(page)
        if recs is not None:
            r = recs[int(self.layout.slot_of[v])]
            return r["vec"], r["nbrs"][:r["cnt"]]
        return self.cached[v]

    def _load(self, v: int, source: str) -> None:
        if v not in self.loaded:
            self.loaded.add(v)
            self.stats.n_read += 1
            if self.events is not None:
                self.events.append(("load", v, source))

    def _install_page(self, page: int, data: bytes) -> None:
        self.pages[page] = self.index.decode_page(data)
        for v in self.layout.members[page]:
            if v >= 0:
                self._load(int(v), "disk")

    def plan(self, ids) -> tuple[list, list]:
        """Split missing records into cache-served ones and pages to read."""
        from_cache, to_read = [], []
        cache = self.engine.cache if self.cfg.use_cache else None
        for v in ids:
            if v in self.loaded:
                continue
            page = int(self.layout.page_of[v])
            if page in self.pages or page in to_read:
                continue
            if cache is not None:
                if self.cfg.page_search:
                    row = self.layout.members[page]
                    need = row[row >= 0]
                else:
                    need = (v,)
                if all(int(u) in cache.records for u in need):
                    from_cache.extend(int(u) for u in need)
                    continue
            to_read.append(page)
        return from_cache, to_read

    def take_from_cache(self, ids) -> None:
        for v in ids:
            if v in self.loaded:
                continue
            self.cached[v] = cache_lookup(self.engine.cache, v)
            self.stats.cache_hits += 1
            self._load(v, "cache")

    def read_now(self, pages) -> None:
        if not pages:
            return
        if len(pages) == 1:
            self._install_page(pages[0], self.reader.read_page_sync(pages[0]))
        else:
            batch = self.reader.batch(len(pages))
            batch.submit(pages)
            got = dict(batch.drain())
            for p in pages:
                self._install_page(p, got[p])
        self.stats.pages_read += len(pages)

    def fetch(self, ids) -> list:
        """Make ``ids`` available; returns pages newly touched (disk or cache)."""
        from_cache, to_read = self.plan(ids)
        self.take_from_cache(from_cache)
        self.read_now(to_read)
        touched = list(to_read)
        for v in from_cache:
            p = int(self.layout.page_of[v])
            if p not in touched:
                touched.append(p)
        return touched

    # -- distances -----------------------------------------------------------

    def exact_of(self, v: int) -> float:
        d = self.exact.get(v)
        if d is None:
            vec = self.record(v)[0]
            d = float(rows_sqdist(self.qv, metric_view(vec.reshape(1, -1), self.metric))[0])
            self.exact[v] = d
            self.stats.full_distances += 1
            if d < self.best:
                self.best = d
        return d

    def keys_of(self, ids: list) -> list:
        if self.table is not None:
            self.stats.pq_distances += len(ids)
            return approx_distances(self.table, self.engine.pq.codes[ids]).tolist()
        touched = self.fetch(ids)
        keys = [self.exact_of(v) for v in ids]
        self.page_search(touched)
        return keys

    # -- candidate list --------------------------------------------------------

    def offer(self, ids) -> None:
        fresh = [int(u) for u in ids if int(u) not in self.seen]
        if not fresh:
            return
        self.seen.update(fresh)
        L = self.cfg.L
        for key, u in zip(self.keys_of(fresh), fresh):
            item = (key, u)
            if len(self.cand) == L and item > self.cand[-1]:
                continue
            bisect.insort(self.cand, item)
            if len(self.cand) > L:
                self.cand.pop()

    def frontier(self, width: int, skip=()) -> list:
        out = []
        for _, v in self.cand:
            if v not in self.expanded and v not in skip:
                out.append(v)
                if len(out) == width:
                    break
        return out

    def in_list(self, v: int) -> bool:
        return any(u == v for _, u in self.cand)

    def expand(self, v: int) -> None:
        self.expanded.add(v)
        self.stats.n_eff += 1
        if self.events is not None:
            self.events.append(("expand", v, ""))
        self.exact_of(v)
        self.offer(self.record(v)[1].tolist())

    def page_search(self, pages) -> None:
        if not self.cfg.page_search:
            return
        for p in pages:
            if p in self.searched_pages:
                continue
            self.searched_pages.add(p)
            residents = [int(u) for u in self.layout.members[p] if u >= 0]
            for u in residents:
                self.exact_of(u)
            self.offer(residents)

    def results(self):
        k = self.cfg.k
        items = sorted((d, v) for v, d in self.exact.items())[:k]
        scale = kernel_distance_scale(self.metric)
        ids = np.array([v for _, v in items], dtype=np.int64)
        dists = np.array([d for d, _ in items], dtype=np.float64) * scale
        return ids, dists


class SearchEngine:
    """Shared, read-only search state; ``search`` may be called from many threads."""

    def __init__(self, index: DiskIndex, pq: PQModel | None = None, memgraph: MemGraph | None = None,
                 cache: CacheSet | None = None, shuffled: DiskIndex | None = None,
                 direct_io: bool = True, io_workers: int = 8):
        self.index, self.shuffled = index, shuffled
        self.pq, self.memgraph, self.cache = pq, memgraph, cache
        self.readers = {id(index): PageReader.for_index(index, direct_io, io_workers)}
        if shuffled is not None:
            if shuffled.n != index.n or shuffled.d != index.d:
                raise ConfigError("shuffled index does not hold the same records")
            self.readers[id(shuffled)] = PageReader.for_index(shuffled, direct_io, io_workers)
        if pq is not None and pq.codes.shape[0] != index.n:
            raise ConfigError(f"PQ codes cover {pq.codes.shape[0]} records, index has {index.n}")

    def active_index(self, cfg: SearchConfig) -> DiskIndex:
        return self.shuffled if cfg.use_shuffled_layout else self.index

    def reader_for(self, index: DiskIndex) -> PageReader:
        return self.readers[id(index)]

    def check(self, cfg: SearchConfig) -> None:
        cfg.validate()
        missing = []
        if cfg.use_pq and self.pq is None:
            missing.append("use_pq needs a PQ model")
        if cfg.use_cache and self.cache is None:
            missing.append("use_cache needs a cache")
        if cfg.use_memgraph and self.memgraph is None:
            missing.append("use_memgraph needs a MemGraph")
        if cfg.use_shuffled_layout and self.shuffled is None:
            missing.append("use_shuffled_layout needs a shuffled index")
        if missing:
            raise ConfigError("; ".join(missing))

    def entries(self, q, cfg: SearchConfig) -> list[int]:
        if cfg.use_memgraph:
            return select_entries(self.memgraph, q, cfg.L_mem, cfg.fanout)
        return [self.index.medoid]

    def search(self, q, cfg: SearchConfig) -> SearchResult:
        self.check(cfg)
        t0 = time.perf_counter()
        st = _Query(self, q, cfg)
        st.offer(self.entries(q, cfg))
        if cfg.pipeline:
            pipeline_search(st)
        else:
            beam_search(st)
        ids, dists = st.results()
        st.stats.latency_s = time.perf_counter() - t0
        return SearchResult(ids, dists, st.stats, st.events or [])

    def close(self) -> None:
        for r in self.readers.values():
            r.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _track_phase(st: _Query, it: int, best_before: float, stall: int, converge_start):
    stall = 0 if st.best < best_before else stall + 1
    if converge_start is None and stall >= st.cfg.patience:
        converge_start = it + 1
    return stall, converge_start


def beam_search(st: _Query) -> None:
    """Read the pages of the ``width`` best unexpanded candidates, then expand them, until none remain."""
    cfg = st.cfg
    it, stall, converge_start = 0, 0, None
    while True:
        width = dynamic_width_schedule(it, converge_start, cfg) if cfg.dynamic_width else cfg.beam
        front = st.frontier(width)
        if not front:
            break
        best_before = st.best
        st.stats.hops += 1
        touched = st.fetch(front)
        for v in front:
            st.expand(v)
        st.page_search(touched)
        stall, converge_start = _track_phase(st, it, best_before, stall, converge_start)
        it += 1


def pipeline_step(st: _Query, batch, waiting: dict, issued: set, limit: int) -> list:
    """Top up in-flight reads to ``limit``, then consume one round of completions.

    Candidates whose record is already in memory are expanded on the spot.
    A completed read expands its requested records only if they are still in
    the candidate list; otherwise they stay read-but-unexpanded.
    """
    while batch.in_flight < limit:
        pick = st.frontier(1, skip=issued)
        if not pick:
            break
        v = pick[0]
        if v not in st.loaded:
            from_cache, to_read = st.plan([v])
            st.take_from_cache(from_cache)
            if to_read:
                issued.add(v)
                page = to_read[0]
                if page not in waiting:
                    waiting[page] = []
                    batch.submit([page])
                waiting[page].append(v)
                continue
            touched = [int(st.layout.page_of[v])] if from_cache else []
        else:
            touched = []
        st.stats.hops += 1
        st.expand(v)
        st.page_search(touched)
    if batch.in_flight == 0:
        return []
    done = batch.poll(block=True)
    order = {p: i for i, p in enumerate(waiting)}
    done.sort(key=lambda pd: order[pd[0]])
    for page, data in done:
        st._install_page(page, data)
        st.stats.pages_read += 1
        for v in waiting.pop(page):
            issued.discard(v)
            if v not in st.expanded and st.in_list(v):
                st.stats.hops += 1
                st.expand(v)
        st.page_search([page])
    return done


def pipeline_search(st: _Query) -> None:
    cfg = st.cfg
    reader_batch = st.reader.batch(max(cfg.depth, cfg.omega_max if cfg.dynamic_width else 1))
    waiting: dict = {}
    issued: set = set()
    rnd, stall, converge_start = 0, 0, None
    while True:
        limit = dynamic_width_schedule(rnd, converge_start, cfg) if cfg.dynamic_width else cfg.depth
        best_before = st.best
        pipeline_step(st, reader_batch, waiting, issued, limit)
        if reader_batch.in_flight == 0 and not st.frontier(1, skip=issued):
            break
        stall, converge_start = _track_phase(st, rnd, best_before, stall, converge_start)
        rnd += 1
    # reads still in flight after termination are loaded but never expanded
    for page, data in reader_batch.drain():
        st._install_page(page, data)
        st.stats.pages_read += 1
