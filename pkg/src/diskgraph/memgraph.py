"""Small in-memory navigation graph over a uniform sample of the base set.

Query-time use is a short greedy search on the sample whose best hits seed
the disk search.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .dataset import (ELEM_CODES, ELEM_DTYPES, ELEM_NAMES, METRIC_CODES, METRIC_NAMES,
                      FormatError, VectorDataset, as_dataset)
from .graph import GraphIndex, build_vamana, graph_from_bytes, graph_to_bytes, greedy_search

MEMGRAPH_MAGIC = b"OMG1"
_HEADER = struct.Struct("<4sQdIBB")


@dataclass
class MemGraph:
    ids: np.ndarray          # sorted base ids of the samples
    graph: GraphIndex        # over sample indices 0..len(ids)-1
    vectors: VectorDataset   # sampled vectors, row i is base row ids[i]
    ratio: float

    @property
    def size(self) -> int:
        return len(self.ids)

    def nbytes(self) -> int:
        return self.ids.nbytes + self.graph.nbytes() + self.vectors.data.nbytes


def sample_size(n: int, ratio: float) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"sample ratio {ratio} must be in (0, 1]")
    return max(1, math.ceil(ratio * n - 1e-9))


def build_memgraph(base, ratio: float, R: int = 48, L: int = 128, seed: int = 0) -> MemGraph:
    base = as_dataset(base)
    count = sample_size(base.n, ratio)
    rng = np.random.default_rng(seed)
    ids = np.arange(base.n) if count == base.n else np.sort(rng.choice(base.n, count, replace=False))
    ids = ids.astype(np.int64)
    vecs = base.subset(ids)
    if count == 1:
        g = GraphIndex(np.zeros((1, 1), np.int32), np.zeros(1, np.int32), 0, 1)
    else:
        g = build_vamana(vecs, R=min(R, count - 1), L_build=L, seed=seed)
    return MemGraph(ids, g, vecs, ratio)


def select_entries(mg: MemGraph, q, L_mem: int = 10, fanout: int = 1) -> list[int]:
    """Base ids of the ``fanout`` best samples found by greedy search on the sample graph."""
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    trace = greedy_search(mg.graph, mg.vectors, q, [mg.graph.medoid], max(L_mem, fanout))
    return [int(mg.ids[i]) for i in trace.ids[:fanout]]


def save_memgraph(mg: MemGraph, path) -> None:
    v = mg.vectors
    header = _HEADER.pack(MEMGRAPH_MAGIC, mg.size, mg.ratio, v.d,
                          ELEM_CODES[v.elem], METRIC_CODES[v.metric])
    with open(path, "wb") as f:
        f.write(header)
        f.write(graph_to_bytes(mg.graph))
        f.write(np.ascontiguousarray(v.data).tobytes())
        f.write(mg.ids.astype("<u4").tobytes())


def load_memgraph(path) -> MemGraph:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated memgraph header")
    magic, count, ratio, d, elem, metric = _HEADER.unpack_from(buf)
    if magic != MEMGRAPH_MAGIC:
        raise FormatError(f"{path}: bad memgraph magic {magic!r}")
    g, pos = graph_from_bytes(buf, _HEADER.size)
    if g.n != count:
        raise FormatError(f"{path}: graph has {g.n} vertices, header says {count}")
    dtype = ELEM_DTYPES[ELEM_NAMES[elem]]
    vec_bytes = count * d * dtype.itemsize
    if len(buf) != pos + vec_bytes + 4 * count:
        raise FormatError(f"{path}: memgraph size does not match header")
    data = np.frombuffer(buf, dtype, count=count * d, offset=pos).reshape(count, d).copy()
    ids = np.frombuffer(buf, "<u4", count=count, offset=pos + vec_bytes).astype(np.int64)
    if np.any(np.diff(ids) <= 0):
        raise FormatError(f"{path}: sample ids not strictly increasing")
    return MemGraph(ids, g, VectorDataset(data, METRIC_NAMES[metric]), float(ratio))
