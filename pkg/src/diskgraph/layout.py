"""Page-aligned on-disk index layout, overlap ratio and page shuffling."""

from __future__ import annotations

import heapq
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dataset import (ELEM_CODES, ELEM_DTYPES, ELEM_NAMES, METRIC_CODES, METRIC_NAMES,
                      FormatError, as_dataset)
from .graph import GraphIndex

log = logging.getLogger(__name__)

INDEX_MAGIC = b"ODI1"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIQIBBIIIIB")
LAYOUT_IDENTITY = 0
LAYOUT_MAPPED = 1


class LayoutError(ValueError):
    """A record cannot be placed with the requested page size."""


def record_size(d: int, elem: str, R_max: int) -> int:
    """Bytes per record: vector, neighbor count, R_max neighbor slots."""
    return d * ELEM_DTYPES[elem].itemsize + 4 + 4 * R_max


def records_per_page(page_size: int, s_rec: int) -> int:
    if page_size < 4096 or page_size & (page_size - 1):
        raise LayoutError(f"page size {page_size} must be a power of two >= 4096")
    n_p = page_size // s_rec
    if n_p < 1:
        larger = page_size
        while larger < s_rec:
            larger *= 2
        raise LayoutError(
            f"record of {s_rec} bytes does not fit a {page_size}-byte page; "
            f"use a page size of at least {larger}")
    return n_p


@dataclass
class PageLayout:
    """Bijection between record ids and (page, slot) positions."""

    page_size: int
    record_size: int
    page_of: np.ndarray
    slot_of: np.ndarray
    mapped: bool = False

    def __post_init__(self):
        self.n_p = records_per_page(self.page_size, self.record_size)
        self.n_pages = int(self.page_of.max()) + 1 if len(self.page_of) else 0
        members = np.full((self.n_pages, self.n_p), -1, dtype=np.int64)
        members[self.page_of, self.slot_of] = np.arange(len(self.page_of))
        self.members = members

    @property
    def n(self) -> int:
        return len(self.page_of)

    @classmethod
    def identity(cls, n: int, page_size: int, s_rec: int) -> "PageLayout":
        n_p = records_per_page(page_size, s_rec)
        ids = np.arange(n, dtype=np.int64)
        return cls(page_size, s_rec, ids // n_p, ids % n_p, mapped=False)

    @classmethod
    def from_pages(cls, pages, page_size: int, s_rec: int) -> "PageLayout":
        n = sum(len(p) for p in pages)
        page_of = np.full(n, -1, dtype=np.int64)
        slot_of = np.full(n, -1, dtype=np.int64)
        for p, ids in enumerate(pages):
            for s, v in enumerate(ids):
                page_of[v] = p
                slot_of[v] = s
        layout = cls(page_size, s_rec, page_of, slot_of, mapped=True)
        layout.validate()
        return layout

    def validate(self) -> None:
        if np.any(self.page_of < 0) or np.any(self.slot_of < 0) or np.any(self.slot_of >= self.n_p):
            raise ValueError("layout leaves a record unplaced or out of range")
        flat = self.page_of * self.n_p + self.slot_of
        if len(np.unique(flat)) != self.n:
            raise ValueError("two records share a slot")

    def co_residents(self, u: int) -> np.ndarray:
        row = self.members[self.page_of[u]]
        return row[(row >= 0) & (row != u)]

    def pages(self) -> list[list[int]]:
        return [[int(v) for v in row if v >= 0] for row in self.members]

    def nbytes(self) -> int:
        return self.page_of.nbytes + self.slot_of.nbytes + self.members.nbytes


# --------------------------------------------------------------------------
# overlap ratio and page-read model
# --------------------------------------------------------------------------

def overlap_ratio_vertex(layout: PageLayout, g: GraphIndex, u: int) -> float:
    """Share of the page's other slots occupied by u's out-neighbors."""
    if not 0 <= u < g.n:
        raise IndexError(f"vertex {u} out of range")
    if layout.n_p == 1:
        return 0.0
    nb = g.neighbors(u)
    same = int(np.count_nonzero(layout.page_of[nb] == layout.page_of[u]))
    return same / (layout.n_p - 1)


def colocated_edges(layout: PageLayout, g: GraphIndex) -> int:
    """Directed edges whose endpoints share a page."""
    src = np.repeat(np.arange(g.n), g.deg)
    dst = np.concatenate([g.neighbors(v) for v in range(g.n)]) if g.n else np.zeros(0, int)
    return int(np.count_nonzero(layout.page_of[src] == layout.page_of[dst]))


def overlap_ratio_graph(layout: PageLayout, g: GraphIndex) -> float:
    if layout.n_p == 1:
        return 0.0
    return colocated_edges(layout, g) / ((layout.n_p - 1) * g.n)


def predicted_page_reads(R_bar: float, H: float, OR: float, n_p: int) -> tuple[float, float]:
    """Page-read model without and with in-memory compressed vectors.

    Returns ``(R_bar * H / (OR * n_p), H / (OR * n_p))``.
    """
    if OR <= 0:
        raise ValueError("overlap ratio must be positive for the page-read model")
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    base = H / (OR * n_p)
    return R_bar * base, base


# --------------------------------------------------------------------------
# page shuffle
# --------------------------------------------------------------------------

def _symmetric_csr(g: GraphIndex):
    """Out- plus in-edges of every vertex (a pair linked both ways appears twice)."""
    src = np.repeat(np.arange(g.n, dtype=np.int64), g.deg)
    dst = np.concatenate([g.neighbors(v) for v in range(g.n)]).astype(np.int64)
    a = np.concatenate([src, dst])
    b = np.concatenate([dst, src])
    order = np.argsort(a, kind="stable")
    a, b = a[order], b[order]
    indptr = np.zeros(g.n + 1, dtype=np.int64)
    np.add.at(indptr, a + 1, 1)
    return np.cumsum(indptr), b


@njit(cache=True)
def _grow_pages(indptr, nbrs, n_p):
    n = indptr.shape[0] - 1
    page_of = np.full(n, -1, dtype=np.int64)
    slot_of = np.full(n, -1, dtype=np.int64)
    resid = np.empty(n, dtype=np.int64)
    heap = []
    for v in range(n):
        resid[v] = indptr[v + 1] - indptr[v]
        heap.append((-resid[v], v))
    heapq.heapify(heap)
    cnt = np.zeros(n, dtype=np.int64)
    touched_list = [np.int64(0) for _ in range(0)]
    lowest_free = 0
    page = 0
    placed = 0
    while placed < n:
        seed = -1
        while len(heap) > 0:
            key, v = heapq.heappop(heap)
            if page_of[v] < 0 and -key == resid[v]:
                seed = v
                break
        if seed < 0:
            while page_of[lowest_free] >= 0:
                lowest_free += 1
            seed = lowest_free
        members = 0
        x = seed
        while True:
            page_of[x] = page
            slot_of[x] = members
            members += 1
            placed += 1
            for t in range(indptr[x], indptr[x + 1]):
                y = nbrs[t]
                if page_of[y] < 0:
                    resid[y] -= 1
                    heapq.heappush(heap, (-resid[y], y))
                    if cnt[y] == 0:
                        touched_list.append(y)
                    cnt[y] += 1
            if members == n_p or placed == n:
                break
            best = -1
            best_c = 0
            for y in touched_list:
                if page_of[y] < 0 and (cnt[y] > best_c or (cnt[y] == best_c and best_c > 0 and y < best)):
                    best = y
                    best_c = cnt[y]
            if best < 0:
                while page_of[lowest_free] >= 0:
                    lowest_free += 1
                best = lowest_free
            x = best
        for y in touched_list:
            cnt[y] = 0
        touched_list.clear()
        page += 1
    return page_of, slot_of


@njit(cache=True)
def _weight_into(indptr, nbrs, page_of, x, page, exclude):
    w = 0
    for t in range(indptr[x], indptr[x + 1]):
        y = nbrs[t]
        if y != exclude and page_of[y] == page:
            w += 1
    return w


@njit(cache=True)
def _pair_weight(indptr, nbrs, a, b):
    w = 0
    for t in range(indptr[a], indptr[a + 1]):
        if nbrs[t] == b:
            w += 1
    return w


@njit(cache=True)
def _swap_pass(indptr, nbrs, page_of, slot_of, members):
    """One hill-climbing sweep; returns the objective gain (always >= 0)."""
    n = page_of.shape[0]
    n_pages, n_p = members.shape
    acc = np.zeros(n_pages, dtype=np.int64)
    total_gain = 0
    for u in range(n):
        pu = page_of[u]
        touched = [np.int64(0) for _ in range(0)]
        for t in range(indptr[u], indptr[u + 1]):
            p = page_of[nbrs[t]]
            if acc[p] == 0:
                touched.append(p)
            acc[p] += 1
        own = acc[pu]
        target = -1
        best_acc = 0
        for p in touched:
            if p != pu and (acc[p] > best_acc or (acc[p] == best_acc and p < target)):
                target = p
                best_acc = acc[p]
        for p in touched:
            acc[p] = 0
        if target < 0:
            continue
        best_gain = 0
        best_w = -2
        best_slot = -1
        for s in range(n_p):
            w = members[target, s]
            if w < 0:
                gain = best_acc - own
                if gain > best_gain:
                    best_gain, best_w, best_slot = gain, -1, s
                continue
            uw = _pair_weight(indptr, nbrs, u, w)
            w_pu = _weight_into(indptr, nbrs, page_of, w, pu, -1)
            w_own = _weight_into(indptr, nbrs, page_of, w, target, w)
            gain = (best_acc - uw) - own + (w_pu - uw) - w_own
            if gain > best_gain:
                best_gain, best_w, best_slot = gain, w, s
        if best_gain <= 0:
            continue
        su = slot_of[u]
        if best_w >= 0:
            page_of[best_w] = pu
            slot_of[best_w] = su
            members[pu, su] = best_w
        else:
            members[pu, su] = -1
        page_of[u] = target
        slot_of[u] = best_slot
        members[target, best_slot] = u
        total_gain += best_gain
    return total_gain


@dataclass
class ShuffleResult:
    layout: PageLayout
    objective_history: list
    identity_objective: int


def shuffle_pages(g: GraphIndex, page_size: int, s_rec: int, passes: int = 2, seed: int = 0,
                  return_history: bool = False):
    """Reassign records to pages so graph neighbors share pages.

    Greedy seed-and-grow packing (seed = unassigned vertex of maximal residual
    degree, grow by most edges into the page, ties to the lowest id) followed
    by ``passes`` sweeps of record swaps accepted only on strict improvement of
    the co-located edge count. The result never scores below the identity
    layout. ``seed`` is accepted for interface stability; the procedure is
    deterministic.
    """
    n_p = records_per_page(page_size, s_rec)
    identity = PageLayout.identity(g.n, page_size, s_rec)
    id_obj = colocated_edges(identity, g)
    if n_p == 1:
        log.warning("each %d-byte page holds a single record; page shuffle is a no-op", page_size)
        res = ShuffleResult(identity, [id_obj], id_obj)
        return res if return_history else identity
    indptr, nbrs = _symmetric_csr(g)
    page_of, slot_of = _grow_pages(indptr, nbrs, n_p)
    layout = PageLayout(page_size, s_rec, page_of, slot_of, mapped=True)
    history = [colocated_edges(layout, g)]
    members = layout.members.copy()
    for _ in range(passes):
        _swap_pass(indptr, nbrs, page_of, slot_of, members)
        history.append(colocated_edges(PageLayout(page_size, s_rec, page_of.copy(), slot_of.copy()), g))
    layout = PageLayout(page_size, s_rec, page_of, slot_of, mapped=True)
    layout.validate()
    if history[-1] < id_obj:
        layout = PageLayout(page_size, s_rec, identity.page_of.copy(), identity.slot_of.copy(), mapped=True)
        history.append(id_obj)
    res = ShuffleResult(layout, history, id_obj)
    return res if return_history else layout


# --------------------------------------------------------------------------
# on-disk index
# --------------------------------------------------------------------------

def record_dtype(d: int, elem: str, R_max: int) -> np.dtype:
    return np.dtype([("vec", ELEM_DTYPES[elem], (d,)), ("cnt", "<u4"), ("nbrs", "<u4", (R_max,))])


class DiskIndex:
    """Page-aligned record store: a header page followed by data pages."""

    def __init__(self, path, n, d, elem, metric, R_max, page_size, medoid, layout: PageLayout):
        self.path = str(path)
        self.n, self.d, self.elem, self.metric = n, d, elem, metric
        self.R_max, self.page_size, self.medoid = R_max, page_size, medoid
        self.layout = layout
        self.record_size = record_size(d, elem, R_max)
        self.n_p = layout.n_p
        self.dtype = record_dtype(d, elem, R_max)

    @property
    def n_pages(self) -> int:
        return self.layout.n_pages

    @property
    def map_path(self) -> str:
        return self.path + ".map"

    def page_offset(self, page: int) -> int:
        return self.page_size * (1 + page)

    def decode_page(self, buf) -> np.ndarray:
        """Structured view (n_p,) of the records in a page buffer."""
        return np.frombuffer(buf, self.dtype, count=self.n_p)

    def file_size(self) -> int:
        return self.page_size * (1 + self.n_pages)

    def read_all(self) -> tuple[np.ndarray, GraphIndex]:
        """Decode every record (vectors, graph); bypasses the I/O counters."""
        vecs = np.zeros((self.n, self.d), dtype=ELEM_DTYPES[self.elem])
        adj = np.zeros((self.n, self.R_max), dtype=np.int32)
        deg = np.zeros(self.n, dtype=np.int32)
        with open(self.path, "rb") as f:
            f.seek(self.page_size)
            for p in range(self.n_pages):
                recs = self.decode_page(f.read(self.page_size))
                for s, v in enumerate(self.layout.members[p]):
                    if v < 0:
                        continue
                    vecs[v] = recs["vec"][s]
                    deg[v] = recs["cnt"][s]
                    adj[v] = recs["nbrs"][s]
        return vecs, GraphIndex(adj, deg, self.medoid, self.R_max)

    @classmethod
    def open(cls, path) -> "DiskIndex":
        path = str(path)
        with open(path, "rb") as f:
            head = f.read(_INDEX_HEADER.size)
        if len(head) < _INDEX_HEADER.size:
            raise FormatError(f"{path}: truncated index header")
        magic, version, n, d, elem, metric, R_max, P, n_p, medoid, flag = _INDEX_HEADER.unpack(head)
        if magic != INDEX_MAGIC:
            raise FormatError(f"{path}: bad index magic {magic!r}")
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        elem_name = ELEM_NAMES[elem]
        s_rec = record_size(d, elem_name, R_max)
        if flag == LAYOUT_MAPPED:
            layout = _load_map(path + ".map", n, P, s_rec)
        else:
            layout = PageLayout.identity(n, P, s_rec)
        if layout.n_p != n_p:
            raise FormatError(f"{path}: header n_p={n_p} disagrees with record size")
        idx = cls(path, n, d, elem_name, METRIC_NAMES[metric], R_max, P, medoid, layout)
        if os.path.getsize(path) != idx.file_size():
            raise FormatError(f"{path}: file length does not match header")
        return idx


def _save_map(layout: PageLayout, path) -> None:
    with open(path, "wb") as f:
        f.write(layout.page_of.astype("<u4").tobytes())
        f.write(layout.slot_of.astype("<u2").tobytes())


def _load_map(path, n, page_size, s_rec) -> PageLayout:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) != 6 * n:
        raise FormatError(f"{path}: expected {6 * n} bytes of layout map")
    page_of = np.frombuffer(buf, "<u4", count=n).astype(np.int64)
    slot_of = np.frombuffer(buf, "<u2", count=n, offset=4 * n).astype(np.int64)
    layout = PageLayout(page_size, s_rec, page_of, slot_of, mapped=True)
    layout.validate()
    return layout


def pack(base, g: GraphIndex, page_size: int, path, layout: PageLayout | None = None) -> DiskIndex:
    """Write records ``[vector | count | neighbor ids]`` into page-aligned storage."""
    base = as_dataset(base)
    if base.n != g.n:
        raise ValueError(f"dataset has {base.n} vectors, graph has {g.n} vertices")
    if base.elem not in ELEM_DTYPES:
        raise ValueError(f"cannot pack element type {base.elem}")
    s_rec = record_size(base.d, base.elem, g.R_max)
    if layout is None:
        layout = PageLayout.identity(base.n, page_size, s_rec)
    elif layout.page_size != page_size or layout.record_size != s_rec:
        raise ValueError("layout was computed for a different page or record size")
    dt = record_dtype(base.d, base.elem, g.R_max)
    recs = np.zeros(base.n, dtype=dt)
    recs["vec"] = base.data
    recs["cnt"] = g.deg
    recs["nbrs"] = g.adj
    n_p = layout.n_p
    pages = np.zeros((layout.n_pages, page_size), dtype=np.uint8)
    body = pages[:, :n_p * s_rec].reshape(layout.n_pages, n_p, s_rec)
    body[layout.page_of, layout.slot_of] = recs.view(np.uint8).reshape(base.n, s_rec)
    pages[:, :n_p * s_rec] = body.reshape(layout.n_pages, -1)
    header = bytearray(page_size)
    _INDEX_HEADER.pack_into(header, 0, INDEX_MAGIC, INDEX_VERSION, base.n, base.d,
                            ELEM_CODES[base.elem], METRIC_CODES[base.metric], g.R_max,
                            page_size, n_p, g.medoid,
                            LAYOUT_MAPPED if layout.mapped else LAYOUT_IDENTITY)
    path = str(path)
    with open(path, "wb") as f:
        f.write(header)
        f.write(pages.tobytes())
    if layout.mapped:
        _save_map(layout, path + ".map")
    elif os.path.exists(path + ".map"):
        os.remove(path + ".map")
    return DiskIndex(path, base.n, base.d, base.elem, base.metric, g.R_max, page_size, g.medoid, layout)
