"""Vector datasets: file formats, brute-force ground truth and recall."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ELEM_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int8": np.dtype("i1"),
}
ELEM_CODES = {"float32": 0, "uint8": 1, "int8": 2}
ELEM_NAMES = {v: k for k, v in ELEM_CODES.items()}

METRICS = ("euclidean", "cosine")
METRIC_CODES = {"euclidean": 0, "cosine": 1}
METRIC_NAMES = {v: k for k, v in METRIC_CODES.items()}

FORMATS = ("fvecs", "bvecs", "ivecs", "raw")


class FormatError(ValueError):
    """A vector file does not follow its format grammar."""


@dataclass(frozen=True)
class VectorDataset:
    """n vectors of dimension d stored row-major.

    ``metric`` is ``"euclidean"`` (squared Euclidean distances) or ``"cosine"``
    (``1 - cos``).
    """

    data: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError("data must be a 2-D array")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("dataset needs n >= 1 and d >= 1")
        if self.data.dtype not in ELEM_DTYPES.values() and self.data.dtype != np.int32:
            raise ValueError(f"unsupported element type {self.data.dtype}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        self.data.flags.writeable = False

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def elem(self) -> str:
        if self.data.dtype == np.int32:
            return "int32"
        return self.data.dtype.name

    def __len__(self) -> int:
        return self.n

    def subset(self, ids) -> "VectorDataset":
        return VectorDataset(np.ascontiguousarray(self.data[np.asarray(ids)]), self.metric)


@dataclass(frozen=True)
class GroundTruth:
    """Per-query nearest-neighbor ids (ascending distance) and their distances."""

    ids: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]


def as_dataset(x, metric: str = "euclidean") -> VectorDataset:
    if isinstance(x, VectorDataset):
        return x
    arr = np.asarray(x)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    return VectorDataset(np.ascontiguousarray(arr), metric)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

_VECS_DTYPES = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}


def _scan_vecs(buf: bytes, value_size: int) -> str:
    """Walk records one by one to name the defect in a malformed file."""
    pos, first = 0, None
    while pos < len(buf):
        if pos + 4 > len(buf):
            return "truncated file: partial dimension header"
        d = int.from_bytes(buf[pos:pos + 4], "little", signed=True)
        if d <= 0:
            return f"invalid dimension {d} at byte {pos}"
        if first is None:
            first = d
        elif d != first:
            return f"inconsistent per-record dimension: {d} != {first} at byte {pos}"
        pos += 4 + d * value_size
        if pos > len(buf):
            return "truncated file: partial record"
    return "malformed file"


def _read_vecs(path, fmt: str) -> np.ndarray:
    dtype = _VECS_DTYPES[fmt]
    with open(path, "rb") as f:
        buf = f.read()
    if not buf:
        raise FormatError(f"{path}: no records")
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated file")
    d = int(np.frombuffer(buf, "<i4", count=1)[0])
    if d <= 0:
        raise FormatError(f"{path}: invalid dimension {d}")
    rec = 4 + d * dtype.itemsize
    if len(buf) % rec:
        raise FormatError(f"{path}: {_scan_vecs(buf, dtype.itemsize)}")
    n = len(buf) // rec
    raw = np.frombuffer(buf, np.uint8).reshape(n, rec)
    dims = raw[:, :4].copy().view("<i4").ravel()
    if np.any(dims != d):
        bad = int(np.argmax(dims != d))
        raise FormatError(f"{path}: inconsistent per-record dimension at record {bad}")
    return np.ascontiguousarray(raw[:, 4:]).view(dtype).reshape(n, d)


def _read_raw(path, elem: str) -> np.ndarray:
    dtype = ELEM_DTYPES[elem]
    with open(path, "rb") as f:
        buf = f.read()
    if not buf:
        raise FormatError(f"{path}: no records")
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header")
    n, d = (int(v) for v in np.frombuffer(buf, "<u4", count=2))
    if n == 0:
        raise FormatError(f"{path}: no records")
    if d == 0:
        raise FormatError(f"{path}: invalid dimension 0")
    expected = 8 + n * d * dtype.itemsize
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated file ({len(buf)} < {expected} bytes)")
    if len(buf) > expected:
        raise FormatError(f"{path}: trailing bytes after {n} records")
    return np.frombuffer(buf, dtype, offset=8).reshape(n, d).copy()


def load_vectors(path, format: str, *, elem: str = "float32", metric: str = "euclidean") -> VectorDataset:
    """Load a vector file.

    ``fvecs``/``bvecs``/``ivecs`` records are a little-endian int32 dimension
    followed by that many values. ``raw`` is a u32 count, a u32 dimension and
    a flat block of ``elem`` values.
    """
    if format in _VECS_DTYPES:
        data = _read_vecs(path, format)
    elif format == "raw":
        data = _read_raw(path, elem)
    else:
        raise FormatError(f"unknown format tag {format!r}")
    return VectorDataset(data, metric)


def save_vectors(data, path, format: str) -> None:
    arr = data.data if isinstance(data, VectorDataset) else np.asarray(data)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array")
    n, d = arr.shape
    if format in _VECS_DTYPES:
        body = np.ascontiguousarray(arr, dtype=_VECS_DTYPES[format])
        header = np.full((n, 1), d, dtype="<i4")
        out = np.hstack([header.view(np.uint8), body.view(np.uint8).reshape(n, -1)])
        payload = out.tobytes()
    elif format == "raw":
        payload = np.array([n, d], "<u4").tobytes() + np.ascontiguousarray(arr).tobytes()
    else:
        raise FormatError(f"unknown format tag {format!r}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_ground_truth(gt: GroundTruth, ids_path, dist_path) -> None:
    save_vectors(gt.ids.astype("<i4"), ids_path, "ivecs")
    save_vectors(gt.distances.astype("<f4"), dist_path, "fvecs")


def load_ground_truth(ids_path, dist_path) -> GroundTruth:
    ids = load_vectors(ids_path, "ivecs").data
    dists = load_vectors(dist_path, "fvecs").data
    if ids.shape != dists.shape:
        raise FormatError("ground-truth id and distance files disagree in shape")
    return GroundTruth(ids.astype(np.int64), dists.astype(np.float64))


# --------------------------------------------------------------------------
# distances and exact search
# --------------------------------------------------------------------------

def pairwise_distances(queries: np.ndarray, base: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Distance matrix (nq, n) in float64; integer inputs stay exact."""
    q = np.asarray(queries, dtype=np.float64)
    x = np.asarray(base, dtype=np.float64)
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-30)
        xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-30)
        return 1.0 - qn @ xn.T
    out = (q * q).sum(1)[:, None] - 2.0 * (q @ x.T) + (x * x).sum(1)[None, :]
    np.maximum(out, 0.0, out=out)
    return out


def _topk_with_ties(dist_row: np.ndarray, k: int) -> np.ndarray:
    n = dist_row.shape[0]
    if k < n:
        kth = np.partition(dist_row, k - 1)[k - 1]
        pool = np.flatnonzero(dist_row <= kth)
    else:
        pool = np.arange(n)
    order = np.lexsort((pool, dist_row[pool]))
    return pool[order[:k]]


def brute_force_knn(base: VectorDataset, queries: VectorDataset, k: int, block: int = 256) -> GroundTruth:
    """Exact k nearest neighbors, ties broken by ascending id."""
    base, queries = as_dataset(base), as_dataset(queries, base.metric if isinstance(base, VectorDataset) else "euclidean")
    if base.d != queries.d:
        raise ValueError(f"dimension mismatch: base d={base.d}, queries d={queries.d}")
    if k < 1 or k > base.n:
        raise ValueError(f"k={k} must be in [1, n={base.n}]")
    ids = np.empty((queries.n, k), dtype=np.int64)
    dists = np.empty((queries.n, k), dtype=np.float64)
    for start in range(0, queries.n, block):
        dm = pairwise_distances(queries.data[start:start + block], base.data, base.metric)
        for r, row in enumerate(dm):
            top = _topk_with_ties(row, k)
            ids[start + r] = top
            dists[start + r] = row[top]
    return GroundTruth(ids, dists)


def recall_at_k(result: Sequence[Sequence[int]], truth, k: int) -> float:
    """Mean over queries of |S ∩ S*| / k with S the first k returned ids."""
    truth_ids = truth.ids if isinstance(truth, GroundTruth) else np.asarray(truth)
    if len(result) != len(truth_ids):
        raise ValueError(f"{len(result)} result lists for {len(truth_ids)} queries")
    if truth_ids.ndim != 2 or truth_ids.shape[1] < k:
        raise ValueError(f"ground truth holds fewer than k={k} ids per query")
    total = 0
    for qi, res in enumerate(result):
        if len(res) < k:
            raise ValueError(f"query {qi}: result has {len(res)} ids, fewer than k={k}")
        total += len(set(int(i) for i in list(res)[:k]) & set(int(i) for i in truth_ids[qi, :k]))
    return total / (k * len(result))


def gaussian_mixture(n: int, d: int, *, clusters: int = 64, spread: float = 1.0,
                     center_scale: float = 4.0, seed: int = 0) -> np.ndarray:
    """Synthetic float32 vectors drawn from an isotropic Gaussian mixture."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(clusters, d))
    labels = rng.integers(0, clusters, size=n)
    return (centers[labels] + rng.normal(0.0, spread, size=(n, d))).astype(np.float32)
