"""Page-granular reads over a DiskIndex with exact I/O accounting.

Reads bypass the OS page cache (``O_DIRECT``) unless disabled. Asynchrony is a
bounded-depth submit/poll contract backed by a small worker pool.
"""

from __future__ import annotations

import logging
import mmap
import os
import queue
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

# bucket b counts reads with latency < 2**b microseconds (b = 0..14), last bucket >= 16 ms
LATENCY_BUCKETS_US = [2 ** b for b in range(15)]


class IOError_(OSError):
    """A page read failed or was out of range."""


@dataclass
class IoStats:
    pages: int = 0
    bytes: int = 0
    elapsed_s: float = 0.0
    read_time_s: float = 0.0
    histogram: list = field(default_factory=lambda: [0] * (len(LATENCY_BUCKETS_US) + 1))

    @property
    def iops(self) -> float:
        return self.pages / self.elapsed_s if self.elapsed_s > 0 else 0.0

    @property
    def bandwidth(self) -> float:
        """Bytes per second over the reader's lifetime."""
        return self.bytes / self.elapsed_s if self.elapsed_s > 0 else 0.0


def _bucket(us: float) -> int:
    for b, edge in enumerate(LATENCY_BUCKETS_US):
        if us < edge:
            return b
    return len(LATENCY_BUCKETS_US)


class PageReader:
    """Reads whole pages of an index file; page ``p`` lives at offset ``P * (1 + p)``."""

    def __init__(self, path, page_size: int, n_pages: int, direct_io: bool = True, workers: int = 4):
        self.path = str(path)
        self.page_size = page_size
        self.n_pages = n_pages
        self.direct_io = direct_io
        flags = os.O_RDONLY
        if direct_io and hasattr(os, "O_DIRECT"):
            try:
                self.fd = os.open(self.path, flags | os.O_DIRECT)
                self._probe()
            except OSError as exc:
                log.warning("direct I/O unavailable for %s (%s); falling back to buffered reads, "
                            "I/O-bound measurements are no longer meaningful", self.path, exc)
                self.direct_io = False
                self.fd = os.open(self.path, flags)
        else:
            if direct_io:
                log.warning("O_DIRECT not supported on this platform; using buffered reads")
            else:
                log.warning("direct I/O disabled: reads go through the page cache and "
                            "I/O-bound measurements are no longer meaningful")
            self.direct_io = False
            self.fd = os.open(self.path, flags)
        self._lock = threading.Lock()
        self._buffers: queue.SimpleQueue = queue.SimpleQueue()
        self._stats = IoStats()
        self._t0 = time.perf_counter()
        self._workers = workers
        self._pool: ThreadPoolExecutor | None = None

    def _probe(self):
        buf = mmap.mmap(-1, self.page_size)
        try:
            os.preadv(self.fd, [buf], 0)
        finally:
            buf.close()

    @classmethod
    def for_index(cls, index, direct_io: bool = True, workers: int = 4) -> "PageReader":
        return cls(index.path, index.page_size, index.n_pages, direct_io, workers)

    def _buffer(self) -> mmap.mmap:
        try:
            return self._buffers.get_nowait()
        except queue.Empty:
            return mmap.mmap(-1, self.page_size)

    def read_page_sync(self, page: int) -> bytes:
        """Exactly one page of bytes; updates the counters."""
        if not 0 <= page < self.n_pages:
            raise IOError_(f"page {page} out of range [0, {self.n_pages})")
        buf = self._buffer()
        t = time.perf_counter()
        try:
            got = os.preadv(self.fd, [buf], self.page_size * (1 + page))
            if got != self.page_size:
                raise IOError_(f"short read of page {page}: {got} of {self.page_size} bytes")
            data = bytes(buf)
        finally:
            self._buffers.put(buf)
        dt = time.perf_counter() - t
        with self._lock:
            self._stats.pages += 1
            self._stats.bytes += self.page_size
            self._stats.read_time_s += dt
            self._stats.histogram[_bucket(dt * 1e6)] += 1
        return data

    def io_stats(self) -> IoStats:
        with self._lock:
            s = self._stats
            return IoStats(s.pages, s.bytes, time.perf_counter() - self._t0, s.read_time_s,
                           list(s.histogram))

    def reset_stats(self) -> None:
        with self._lock:
            self._stats = IoStats()
            self._t0 = time.perf_counter()

    @property
    def pool(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self._workers, thread_name_prefix="pageio")
        return self._pool

    def batch(self, max_depth: int) -> "IoBatch":
        return IoBatch(self, max_depth)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class IoBatch:
    """Bounded set of in-flight page reads owned by one query.

    ``submit`` refuses to exceed ``max_depth``; ``poll`` hands back completed
    ``(page, bytes)`` pairs, each exactly once and in no guaranteed order. A
    failed read raises from ``poll`` for that request only.
    """

    def __init__(self, reader: PageReader, max_depth: int):
        if max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        self.reader = reader
        self.max_depth = max_depth
        self._inflight: deque = deque()
        self._errors: deque = deque()

    @property
    def in_flight(self) -> int:
        return len(self._inflight)

    def submit(self, pages) -> None:
        pages = list(pages)
        if len(self._inflight) + len(pages) > self.max_depth:
            raise ValueError(f"submitting {len(pages)} reads would exceed depth {self.max_depth}")
        for p in pages:
            self._inflight.append((p, self.reader.pool.submit(self.reader.read_page_sync, p)))

    def poll(self, block: bool = True) -> list:
        """Completed reads; with ``block`` waits until at least one is done."""
        if self._errors:
            raise self._errors.popleft()
        if not self._inflight:
            return []
        if block:
            wait([f for _, f in self._inflight], return_when=FIRST_COMPLETED)
        done, pending = [], deque()
        for page, fut in self._inflight:
            (done if fut.done() else pending).append((page, fut))
        self._inflight = pending
        out = []
        for page, fut in done:
            exc = fut.exception()
            if exc is not None:
                self._errors.append(exc)
            else:
                out.append((page, fut.result()))
        # failures surface one per poll once the good completions are handed out
        if not out and self._errors:
            raise self._errors.popleft()
        return out

    def drain(self) -> list:
        out = []
        while self._inflight or self._errors:
            out.extend(self.poll(block=True))
        return out


def read_pages(reader: PageReader, pages, batch: IoBatch | None = None) -> dict:
    """Fetch a set of pages, through ``batch`` when given, as ``{page: bytes}``."""
    pages = list(dict.fromkeys(pages))
    if batch is None:
        return {p: reader.read_page_sync(p) for p in pages}
    out = {}
    todo = deque(pages)
    while todo or batch.in_flight:
        room = batch.max_depth - batch.in_flight
        if todo and room:
            chunk = [todo.popleft() for _ in range(min(room, len(todo)))]
            batch.submit(chunk)
        for page, data in batch.poll(block=True):
            out[page] = data
    return out
