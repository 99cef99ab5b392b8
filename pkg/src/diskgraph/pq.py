"""Product quantization with asymmetric (query-to-code) distance tables."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dataset import (ELEM_CODES, ELEM_NAMES, METRIC_CODES, METRIC_NAMES,
                      FormatError, VectorDataset, as_dataset)

CODEBOOK_MAGIC = b"OPQ1"
CODES_MAGIC = b"OPC1"
_CB_HEADER = struct.Struct("<4sIIIBB")
_CODES_HEADER = struct.Struct("<4sQI")


def subspace_dims(d: int, m: int) -> list[int]:
    """Split d dimensions into m contiguous blocks; trailing blocks may be one shorter."""
    if m < 1 or m > d:
        raise ValueError(f"subspace count m={m} must be in [1, d={d}]")
    base, extra = divmod(d, m)
    return [base + 1 if s < extra else base for s in range(m)]


def m_from_budget(budget_bytes: int, n: int) -> int:
    """Subspace count that fits one code byte per subspace into the budget."""
    return max(1, budget_bytes // n)


def _prepare(x: np.ndarray, metric: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        x = x / np.maximum(norms, 1e-30)
    return x


@njit(cache=True)
def _assign(x, c):
    """Nearest centre of each row (lowest index on ties) and its squared distance."""
    n, k = x.shape[0], c.shape[0]
    assign = np.empty(n, dtype=np.int64)
    err = np.empty(n)
    for i in range(n):
        best, arg = np.inf, 0
        for j in range(k):
            s = 0.0
            for t in range(x.shape[1]):
                diff = x[i, t] - c[j, t]
                s += diff * diff
            if s < best:
                best, arg = s, j
        assign[i] = arg
        err[i] = best
    return assign, err


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(x.shape[0])
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, x.shape[0] - 1)
        centers[j] = x[idx]
        np.minimum(closest, ((x - centers[j]) ** 2).sum(1), out=closest)
    return centers


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd iterations from k-means++ seeds.

    Empty clusters are reseeded at the point farthest from its centroid.
    Returns ``(centers, errors)`` where ``errors[t]`` is the mean squared
    reconstruction error after iteration t (``errors[0]`` is the seeding).
    """
    centers = _kmeanspp(x, k, rng)
    assign, err = _assign(x, centers)
    errors = [float(err.mean())]
    for _ in range(iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            diff = x - centers[assign]
            point_err = np.einsum("nd,nd->n", diff, diff)
            # farthest points from their (updated) centres seed the empty clusters
            far = np.argsort(-point_err, kind="stable")[:empty.size]
            centers[empty] = x[far]
        assign, err = _assign(x, centers)
        errors.append(float(err.mean()))
    return centers, errors


@dataclass
class PQCodebook:
    """Per-subspace centroids; ``centroids[s]`` has shape (k_c, dims[s])."""

    d: int
    k_c: int
    centroids: list
    metric: str = "euclidean"
    elem: str = "float32"
    errors: list = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return len(self.centroids)

    @property
    def dims(self) -> list[int]:
        return [c.shape[1] for c in self.centroids]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)])

    def nbytes(self) -> int:
        return self.k_c * self.d * 4


def train_codebook(sample, m: int, k_c: int = 256, iters: int = 12, seed: int = 0) -> PQCodebook:
    sample = as_dataset(sample)
    if not 1 <= k_c <= 256:
        raise ValueError("k_c must be in [1, 256] so codes fit one byte")
    if k_c > sample.n:
        raise ValueError(f"k_c={k_c} exceeds sample size {sample.n}")
    dims = subspace_dims(sample.d, m)
    x = _prepare(sample.data, sample.metric)
    rng = np.random.default_rng(seed)
    centroids, errors, lo = [], np.zeros(iters + 1), 0
    for sd in dims:
        c, err = kmeans(np.ascontiguousarray(x[:, lo:lo + sd]), k_c, iters, rng)
        centroids.append(c.astype(np.float32))
        errors += np.asarray(err)
        lo += sd
    # per-vector error summed over subspaces
    return PQCodebook(sample.d, k_c, centroids, sample.metric, sample.elem, list(errors))


def training_sample(base: VectorDataset, k_c: int = 256, seed: int = 0) -> VectorDataset:
    """Uniform sample of min(n, 256 * k_c) rows."""
    size = min(base.n, 256 * k_c)
    if size == base.n:
        return base
    ids = np.sort(np.random.default_rng(seed).choice(base.n, size=size, replace=False))
    return base.subset(ids)


def _check_dim(cb: PQCodebook, v: np.ndarray):
    if v.shape[-1] != cb.d:
        raise ValueError(f"dimension mismatch: vector d={v.shape[-1]}, codebook d={cb.d}")


def encode(cb: PQCodebook, v) -> np.ndarray:
    """Nearest-centroid index per subspace (ties go to the lowest index)."""
    v = np.asarray(v)
    _check_dim(cb, v)
    return encode_batch(cb, v.reshape(1, -1))[0]


def encode_batch(cb: PQCodebook, x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, VectorDataset) else x)
    _check_dim(cb, x)
    x = _prepare(x, cb.metric)
    codes = np.empty((x.shape[0], cb.m), dtype=np.uint8)
    off = cb.offsets
    for s, c in enumerate(cb.centroids):
        codes[:, s] = _assign(np.ascontiguousarray(x[:, off[s]:off[s + 1]]), c.astype(np.float64))[0]
    return codes


def reconstruct(cb: PQCodebook, code) -> np.ndarray:
    code = np.asarray(code)
    return np.concatenate([cb.centroids[s][code[s]] for s in range(cb.m)]).astype(np.float64)


def build_distance_table(cb: PQCodebook, q) -> np.ndarray:
    """(m, k_c) table of squared distances from each query subvector to each centroid."""
    q = np.asarray(q)
    _check_dim(cb, q)
    q = _prepare(q, cb.metric)
    off = cb.offsets
    table = np.empty((cb.m, cb.k_c))
    for s, c in enumerate(cb.centroids):
        diff = c.astype(np.float64) - q[off[s]:off[s + 1]]
        table[s] = (diff * diff).sum(1)
    return table


def approx_distance(table: np.ndarray, code) -> float:
    code = np.asarray(code)
    if code.shape[-1] != table.shape[0]:
        raise ValueError(f"code has {code.shape[-1]} bytes, table has {table.shape[0]} subspaces")
    if np.any(code >= table.shape[1]):
        raise ValueError(f"code byte >= k_c={table.shape[1]}")
    return float(table[np.arange(table.shape[0]), code].sum())


def approx_distances(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Vectorised ADC for a block of codes (no range check)."""
    return table[np.arange(table.shape[0]), codes].sum(axis=-1)


@dataclass
class PQModel:
    """Codebook plus the codes of every base record."""

    codebook: PQCodebook
    codes: np.ndarray

    def table(self, q) -> np.ndarray:
        return build_distance_table(self.codebook, q)

    def nbytes(self) -> int:
        return self.codes.nbytes + self.codebook.nbytes()


def build_pq(base: VectorDataset, m: int, k_c: int = 256, iters: int = 12, seed: int = 0) -> PQModel:
    cb = train_codebook(training_sample(base, k_c, seed), m, k_c, iters, seed)
    return PQModel(cb, encode_batch(cb, base))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_codebook(cb: PQCodebook, path) -> None:
    header = _CB_HEADER.pack(CODEBOOK_MAGIC, cb.m, cb.k_c, cb.d,
                             ELEM_CODES.get(cb.elem, 0), METRIC_CODES[cb.metric])
    body = b"".join(np.ascontiguousarray(c, "<f4").tobytes() for c in cb.centroids)
    with open(path, "wb") as f:
        f.write(header + body)


def load_codebook(path) -> PQCodebook:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _CB_HEADER.size:
        raise FormatError(f"{path}: truncated codebook header")
    magic, m, k_c, d, elem, metric = _CB_HEADER.unpack_from(buf)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad codebook magic {magic!r}")
    if len(buf) != _CB_HEADER.size + 4 * k_c * d:
        raise FormatError(f"{path}: codebook size does not match header")
    flat = np.frombuffer(buf, "<f4", offset=_CB_HEADER.size)
    centroids, pos = [], 0
    for sd in subspace_dims(d, m):
        centroids.append(flat[pos:pos + k_c * sd].reshape(k_c, sd).copy())
        pos += k_c * sd
    return PQCodebook(d, k_c, centroids, METRIC_NAMES[metric], ELEM_NAMES[elem])


def save_codes(codes: np.ndarray, path) -> None:
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(_CODES_HEADER.pack(CODES_MAGIC, codes.shape[0], codes.shape[1]) + codes.tobytes())


def load_codes(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _CODES_HEADER.size:
        raise FormatError(f"{path}: truncated codes header")
    magic, n, m = _CODES_HEADER.unpack_from(buf)
    if magic != CODES_MAGIC:
        raise FormatError(f"{path}: bad codes magic {magic!r}")
    if len(buf) != _CODES_HEADER.size + n * m:
        raise FormatError(f"{path}: codes size does not match header")
    return np.frombuffer(buf, np.uint8, offset=_CODES_HEADER.size).reshape(n, m).copy()
