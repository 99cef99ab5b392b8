"""Vamana proximity graph: construction, alpha-pruning and in-memory beam search."""

from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dataset import FormatError, as_dataset

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"OVG1"
_GRAPH_HEADER = struct.Struct("<4sIII")


@dataclass
class GraphIndex:
    """Out-degree bounded adjacency with a medoid entry vertex.

    ``adj`` is an (n, R_max) int32 block; only the first ``deg[v]`` entries of
    row v are meaningful.
    """

    adj: np.ndarray
    deg: np.ndarray
    medoid: int
    R_max: int
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def neighbors(self, v: int) -> np.ndarray:
        return self.adj[v, :self.deg[v]]

    def adjacency(self) -> list[list[int]]:
        return [self.neighbors(v).tolist() for v in range(self.n)]

    @classmethod
    def from_lists(cls, lists, medoid: int = 0, R_max: int | None = None) -> "GraphIndex":
        R = R_max if R_max is not None else max((len(x) for x in lists), default=0)
        R = max(R, 1)
        adj = np.zeros((len(lists), R), dtype=np.int32)
        deg = np.zeros(len(lists), dtype=np.int32)
        for v, nb in enumerate(lists):
            if len(nb) > R:
                raise ValueError(f"vertex {v} has {len(nb)} neighbors > R_max={R}")
            adj[v, :len(nb)] = nb
            deg[v] = len(nb)
        g = cls(adj, deg, int(medoid), R)
        g.validate()
        return g

    def validate(self) -> None:
        if not 0 <= self.medoid < self.n:
            raise ValueError(f"medoid {self.medoid} out of range")
        for v in range(self.n):
            nb = self.neighbors(v)
            if len(nb) > self.R_max:
                raise ValueError(f"vertex {v}: degree {len(nb)} > R_max")
            if np.any(nb == v):
                raise ValueError(f"vertex {v}: self loop")
            if len(np.unique(nb)) != len(nb):
                raise ValueError(f"vertex {v}: duplicate neighbors")
            if len(nb) and (nb.min() < 0 or nb.max() >= self.n):
                raise ValueError(f"vertex {v}: neighbor id out of range")

    def nbytes(self) -> int:
        return self.adj.nbytes + self.deg.nbytes


@dataclass
class SearchTrace:
    visited: list
    ids: np.ndarray
    distances: np.ndarray
    hops: int


def mean_out_degree(g: GraphIndex) -> float:
    return float(g.deg.sum()) / g.n


def reachable_from(g: GraphIndex, start: int) -> np.ndarray:
    """Boolean mask of vertices reachable from ``start`` (BFS)."""
    seen = np.zeros(g.n, dtype=bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = []
        for v in frontier:
            for u in g.neighbors(v):
                if not seen[u]:
                    seen[u] = True
                    nxt.append(int(u))
        frontier = nxt
    return seen


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def sqdist(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        t = float(a[i]) - float(b[i])
        s += t * t
    return s


@njit(cache=True)
def rows_sqdist(q, rows):
    out = np.empty(rows.shape[0])
    for r in range(rows.shape[0]):
        out[r] = sqdist(q, rows[r])
    return out


@njit(cache=True)
def _insert(cd, ci, ce, size, cap, d, v):
    """Insert (d, v) into the sorted bounded list; returns the new size."""
    if size == cap and (d > cd[size - 1] or (d == cd[size - 1] and v > ci[size - 1])):
        return size
    pos = size if size < cap else cap - 1
    while pos > 0 and (cd[pos - 1] > d or (cd[pos - 1] == d and ci[pos - 1] > v)):
        if pos < cap:
            cd[pos] = cd[pos - 1]
            ci[pos] = ci[pos - 1]
            ce[pos] = ce[pos - 1]
        pos -= 1
    cd[pos] = d
    ci[pos] = v
    ce[pos] = False
    return size + 1 if size < cap else cap


@njit(cache=True)
def _beam_search(data, adj, deg, q, entries, L, mark, stamp):
    cd = np.full(L, np.inf)
    ci = np.full(L, -1, dtype=np.int64)
    ce = np.zeros(L, dtype=np.bool_)
    size = 0
    for e in entries:
        if mark[e] != stamp:
            mark[e] = stamp
            size = _insert(cd, ci, ce, size, L, sqdist(q, data[e]), e)
    visited = [np.int64(0) for _ in range(0)]
    hops = 0
    while True:
        pos = -1
        for i in range(size):
            if not ce[i]:
                pos = i
                break
        if pos < 0:
            break
        ce[pos] = True
        v = ci[pos]
        visited.append(v)
        hops += 1
        for j in range(deg[v]):
            u = adj[v, j]
            if mark[u] == stamp:
                continue
            mark[u] = stamp
            size = _insert(cd, ci, ce, size, L, sqdist(q, data[u]), u)
    vis = np.empty(len(visited), dtype=np.int64)
    for i in range(len(visited)):
        vis[i] = visited[i]
    return ci[:size].copy(), cd[:size].copy(), vis, hops


@njit(cache=True)
def _robust_prune(data, p, cand, alpha, R, out):
    s = np.sort(cand)
    ids = np.empty(s.shape[0], dtype=np.int64)
    ds = np.empty(s.shape[0])
    c = 0
    prev = -1
    for x in s:
        if x == p or x == prev:
            continue
        prev = x
        ids[c] = x
        ds[c] = sqdist(data[p], data[x])
        c += 1
    ids = ids[:c]
    ds = ds[:c]
    order = np.argsort(ds, kind="mergesort")
    alive = np.ones(c, dtype=np.bool_)
    k = 0
    for a in range(c):
        ia = order[a]
        if not alive[ia]:
            continue
        out[k] = ids[ia]
        k += 1
        if k == R:
            break
        for b in range(a + 1, c):
            ib = order[b]
            if alive[ib] and alpha * sqdist(data[ids[ia]], data[ids[ib]]) <= ds[ib]:
                alive[ib] = False
    return k


@njit(cache=True)
def _vamana_pass(data, adj, deg, medoid, R, L, alpha, mark, stamp):
    n = data.shape[0]
    entries = np.array([medoid], dtype=np.int64)
    tmp = np.empty(R, dtype=np.int64)
    for p in range(n):
        stamp += 1
        _, _, vis, _ = _beam_search(data, adj, deg, data[p], entries, L, mark, stamp)
        cand = np.empty(vis.shape[0] + deg[p], dtype=np.int64)
        cand[:vis.shape[0]] = vis
        for j in range(deg[p]):
            cand[vis.shape[0] + j] = adj[p, j]
        k = _robust_prune(data, p, cand, alpha, R, tmp)
        for j in range(k):
            adj[p, j] = tmp[j]
        deg[p] = k
        for jj in range(k):
            nb = adj[p, jj]
            found = False
            for t in range(deg[nb]):
                if adj[nb, t] == p:
                    found = True
                    break
            if found:
                continue
            if deg[nb] < R:
                adj[nb, deg[nb]] = p
                deg[nb] += 1
            else:
                cand2 = np.empty(deg[nb] + 1, dtype=np.int64)
                for t in range(deg[nb]):
                    cand2[t] = adj[nb, t]
                cand2[deg[nb]] = p
                tmp2 = np.empty(R, dtype=np.int64)
                k2 = _robust_prune(data, nb, cand2, alpha, R, tmp2)
                for t in range(k2):
                    adj[nb, t] = tmp2[t]
                deg[nb] = k2
    return stamp


def _extend_reach(adj, deg, mask, start) -> None:
    stack = [start]
    mask[start] = True
    while stack:
        v = stack.pop()
        for u in adj[v, :deg[v]]:
            if not mask[u]:
                mask[u] = True
                stack.append(int(u))


def _reach_tree(adj, deg, parent, frontier) -> None:
    """BFS from ``frontier`` over unvisited vertices (parent == -2), recording parents."""
    queue = deque(frontier)
    while queue:
        u = queue.popleft()
        for w in adj[u, :deg[u]]:
            if parent[w] == -2:
                parent[w] = u
                queue.append(int(w))


def _repair_connectivity(data, adj, deg, medoid) -> int:
    """Give every vertex unreachable from the medoid an in-edge; returns edges added.

    The new edge comes from the closest reachable vertex that still has spare
    degree. When none has, the closest vertex with an edge outside the BFS tree
    from the medoid gives that edge up, so nothing already reachable is lost.
    """
    n, R = adj.shape
    mask = np.zeros(n, dtype=bool)
    _extend_reach(adj, deg, mask, medoid)
    if mask.all():
        return 0
    parent = np.full(n, -2, dtype=np.int64)
    parent[medoid] = -1
    _reach_tree(adj, deg, parent, [medoid])
    added = 0
    for v in range(n):
        if parent[v] != -2:
            continue
        hosts = np.flatnonzero(parent != -2)
        d = rows_sqdist(data[v].astype(np.float64), np.ascontiguousarray(data[hosts]))
        order = hosts[np.lexsort((hosts, d))]
        spare = order[deg[order] < R]
        if spare.size:
            u = int(spare[0])
        else:
            for u in order:
                nb = adj[u, :deg[u]]
                loose = np.flatnonzero(parent[nb] != u)
                if loose.size:
                    break
            else:
                raise RuntimeError("could not connect the graph")
            u = int(u)
            drop = int(loose[-1])
            adj[u, drop:deg[u] - 1] = adj[u, drop + 1:deg[u]].copy()
            deg[u] -= 1
        adj[u, deg[u]] = v
        deg[u] += 1
        parent[v] = u
        added += 1
        _reach_tree(adj, deg, parent, [v])
    return added


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def metric_view(data: np.ndarray, metric: str) -> np.ndarray:
    """Vectors as seen by the squared-L2 kernels (unit-normalised for cosine)."""
    if metric == "cosine":
        x = np.asarray(data, dtype=np.float32)
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.ascontiguousarray(x / np.maximum(norms, 1e-30))
    return np.ascontiguousarray(data)


def kernel_distance_scale(metric: str) -> float:
    # |a - b|^2 = 2 (1 - cos) for unit vectors
    return 0.5 if metric == "cosine" else 1.0


def greedy_search(g: GraphIndex, base, q, entries, L: int) -> SearchTrace:
    """Best-first search over full-precision distances with an L-bounded list."""
    base = as_dataset(base)
    if L < 1:
        raise ValueError("L must be >= 1")
    entries = np.asarray(list(entries), dtype=np.int64)
    if entries.size == 0:
        raise ValueError("empty entry list")
    if entries.min() < 0 or entries.max() >= g.n:
        raise ValueError("entry id out of range")
    data = metric_view(base.data, base.metric)
    qv = metric_view(np.asarray(q).reshape(1, -1), base.metric)[0].astype(np.float64)
    mark = np.zeros(g.n, dtype=np.int64)
    ids, dists, vis, hops = _beam_search(data, g.adj, g.deg, qv, entries, L, mark, 1)
    scale = kernel_distance_scale(base.metric)
    return SearchTrace(vis.tolist(), ids, dists * scale, int(hops))


def robust_prune(base, p: int, candidates, alpha: float, R: int) -> list[int]:
    """Greedy alpha-pruning of a candidate set around vertex p."""
    base = as_dataset(base)
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    cand = np.asarray([c for c in candidates if c != p], dtype=np.int64)
    if cand.size == 0 or R < 1:
        return []
    data = metric_view(base.data, base.metric)
    out = np.empty(R, dtype=np.int64)
    k = _robust_prune(data, p, cand, float(alpha), R, out)
    return out[:k].tolist()


def find_medoid(data: np.ndarray) -> int:
    """Vertex closest to the dataset centroid; ties go to the lowest id."""
    x = np.asarray(data, dtype=np.float64)
    centroid = x.mean(0)
    d = rows_sqdist(centroid, np.ascontiguousarray(data))
    return int(np.flatnonzero(d == d.min())[0])


def random_init(n: int, R: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    adj = np.empty((n, R), dtype=np.int32)
    for v in range(n):
        s = rng.choice(n - 1, size=R, replace=False)
        s[s >= v] += 1
        adj[v] = s
    return adj, np.full(n, R, dtype=np.int32)


def build_vamana(base, R: int = 64, L_build: int = 125, alpha: float = 1.2, seed: int = 0,
                 passes: tuple = None) -> GraphIndex:
    """Two-pass Vamana build (alpha = 1, then the requested alpha).

    Vertices are inserted in ascending id order; the seed only drives the
    random R-regular initial graph. Vertices left unreachable from the medoid
    afterwards are reattached.
    """
    base = as_dataset(base)
    n = base.n
    if n < 2:
        raise ValueError("need at least two vectors to build a graph")
    if R >= n:
        log.warning("R=%d >= n=%d; clamping out-degree to n-1", R, n)
        R = n - 1
    if R < 1 or L_build < 1:
        raise ValueError("R and L_build must be positive")
    data = metric_view(base.data, base.metric)
    medoid = find_medoid(data)
    adj, deg = random_init(n, R, np.random.default_rng(seed))
    mark = np.zeros(n, dtype=np.int64)
    stamp = 0
    for a in passes or (1.0, alpha):
        stamp = _vamana_pass(data, adj, deg, medoid, R, L_build, float(a), mark, stamp)
    added = _repair_connectivity(data, adj, deg, medoid)
    if added:
        log.info("reattached %d vertices unreachable from the medoid", added)
    return GraphIndex(adj, deg, medoid, R, {"R": R, "L_build": L_build, "alpha": alpha, "seed": seed})


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def graph_to_bytes(g: GraphIndex) -> bytes:
    parts = [_GRAPH_HEADER.pack(GRAPH_MAGIC, g.n, g.R_max, g.medoid)]
    for v in range(g.n):
        nb = g.neighbors(v)
        parts.append(struct.pack("<I", len(nb)))
        parts.append(np.ascontiguousarray(nb, "<u4").tobytes())
    return b"".join(parts)


def graph_from_bytes(buf: bytes, offset: int = 0) -> tuple[GraphIndex, int]:
    if len(buf) - offset < _GRAPH_HEADER.size:
        raise FormatError("truncated graph header")
    magic, n, R_max, medoid = _GRAPH_HEADER.unpack_from(buf, offset)
    if magic != GRAPH_MAGIC:
        raise FormatError(f"bad graph magic {magic!r}")
    pos = offset + _GRAPH_HEADER.size
    adj = np.zeros((n, max(R_max, 1)), dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    for v in range(n):
        if pos + 4 > len(buf):
            raise FormatError("truncated graph body")
        (cnt,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if cnt > R_max or pos + 4 * cnt > len(buf):
            raise FormatError(f"vertex {v}: bad neighbor count {cnt}")
        adj[v, :cnt] = np.frombuffer(buf, "<u4", count=cnt, offset=pos)
        deg[v] = cnt
        pos += 4 * cnt
    return GraphIndex(adj, deg, int(medoid), int(R_max)), pos


def save_graph(g: GraphIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(graph_to_bytes(g))


def load_graph(path) -> GraphIndex:
    with open(path, "rb") as f:
        buf = f.read()
    g, end = graph_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after graph body")
    return g
