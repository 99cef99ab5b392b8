import numpy as np
import pytest

from diskgraph.cache import bfs_order, build_sssp_cache, cache_lookup, CacheSet
from diskgraph.dataset import VectorDataset
from diskgraph.graph import GraphIndex
from diskgraph.layout import pack


@pytest.fixture
def star(tmp_path):
    n = 6
    g = GraphIndex.from_lists([[5, 3, 1, 4, 2]] + [[0]] * (n - 1))
    base = VectorDataset(np.arange(n * 2, dtype=np.float32).reshape(n, 2))
    return g, pack(base, g, 4096, tmp_path / "s.odi"), base


def test_star_budget_three(star):
    g, idx, _ = star
    assert sorted(build_sssp_cache(g, idx, 0, 3).records) == [0, 1, 2]
    assert bfs_order(g, 0, 3) == [0, 1, 2]


def test_budget_zero_and_full(star, small_world):
    g, idx, _ = star
    assert len(build_sssp_cache(g, idx, 0, 0)) == 0
    w = small_world
    full = build_sssp_cache(w.graph, w.index, w.graph.medoid, 10 ** 6)
    assert len(full) == w.base.n


def test_lookup_hit_equals_disk_record(small_world):
    w = small_world
    cache = build_sssp_cache(w.graph, w.shuffled, w.graph.medoid, 50)
    vecs, g = w.shuffled.read_all()
    for v in cache.records:
        vec, nbrs = cache_lookup(cache, v)
        np.testing.assert_array_equal(vec, vecs[v])
        assert nbrs.tolist() == g.neighbors(v).tolist()
    missing = next(v for v in range(w.base.n) if v not in cache)
    assert cache_lookup(cache, missing) is None
    assert cache_lookup(CacheSet(0), 0) is None


def test_bfs_prefix_is_nested(small_world):
    g = small_world.graph
    big = bfs_order(g, g.medoid, 300)
    assert bfs_order(g, g.medoid, 100) == big[:100]


def test_invalid_entry(star):
    g, idx, _ = star
    with pytest.raises(ValueError):
        build_sssp_cache(g, idx, 99, 2)
