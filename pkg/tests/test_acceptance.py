"""End-to-end acceptance checks; each test records one pass/fail line per criterion."""

import logging
import time
from dataclasses import dataclass

import numpy as np
import pytest

from diskgraph.bench.cli import main
from diskgraph.bench.runner import LATENCY_FIELDS, LogWriter, read_log, run_queries, summarize
from diskgraph.cache import budget_records, build_sssp_cache
from diskgraph.dataset import (VectorDataset, brute_force_knn, gaussian_mixture, load_vectors,
                               recall_at_k, save_vectors)
from diskgraph.graph import GraphIndex, build_vamana, graph_to_bytes, load_graph, save_graph
from diskgraph.iobackend import PageReader
from diskgraph.layout import (DiskIndex, LayoutError, PageLayout, overlap_ratio_graph,
                              overlap_ratio_vertex, pack, record_size, shuffle_pages)
from diskgraph.memgraph import build_memgraph, load_memgraph, save_memgraph
from diskgraph.pq import build_pq, load_codebook, load_codes, save_codebook, save_codes
from diskgraph.search import SearchConfig, SearchEngine

pytestmark = pytest.mark.slow

N, D, NQ = 100_000, 32, 100
SWEEP = (10, 20, 50, 100)


@dataclass
class Hundred:
    base: VectorDataset
    queries: VectorDataset
    graph: GraphIndex
    index: DiskIndex
    shuffled: DiskIndex
    engine: SearchEngine
    truth: object
    recall_pq: float
    recall_full: float
    seconds: float


@pytest.fixture(scope="module")
def hundred(tmp_path_factory):
    """100K x 32-d mixture: graph, both layouts, PQ, MemGraph and ground truth."""
    root = tmp_path_factory.mktemp("hundred")
    x = gaussian_mixture(N + NQ, D, center_scale=1.5, seed=7)
    base, queries = VectorDataset(x[:N]), VectorDataset(x[N:])
    t0 = time.perf_counter()
    g = build_vamana(base, R=32, L_build=64, seed=0)
    idx = pack(base, g, 4096, root / "id.odi")
    pq = build_pq(base, 16, 256, seed=0)
    truth = brute_force_knn(base, queries, 10)
    with SearchEngine(idx, pq) as eng:
        res = [eng.search(q, SearchConfig(L=100, beam=8)) for q in queries.data]
        full = [eng.search(q, SearchConfig(L=100, beam=8, use_pq=False)) for q in queries.data]
    seconds = time.perf_counter() - t0
    sh = pack(base, g, 4096, root / "sh.odi", layout=shuffle_pages(g, 4096, idx.record_size))
    mg = build_memgraph(base, 0.01, seed=0)
    engine = SearchEngine(idx, pq, mg, None, sh)
    yield Hundred(base, queries, g, idx, sh, engine, truth,
                  recall_at_k([r.ids for r in res], truth, 10),
                  recall_at_k([r.ids for r in full], truth, 10), seconds)
    engine.close()


def run_all(engine, queries, **kw):
    cfg = SearchConfig(**kw)
    return [engine.search(q, cfg) for q in queries.data]


def measure(h, **kw):
    res = run_all(h.engine, h.queries, **kw)
    pages = np.array([r.stats.pages_read for r in res], dtype=float)
    hops = np.array([r.stats.hops for r in res], dtype=float)
    return recall_at_k([r.ids for r in res], h.truth, 10), pages, hops


def test_criterion_1_oracle_recall(hundred, acceptance_log):
    h = hundred
    ok = h.recall_pq >= 0.90 and h.recall_full >= 0.95 and h.seconds < 300
    acceptance_log(1, ok, f"recall PQ {h.recall_pq:.3f}, full precision {h.recall_full:.3f}, "
                          f"build+PQ+search {h.seconds:.0f} s")
    assert h.recall_pq >= 0.90
    assert h.recall_full >= 0.95
    assert h.seconds < 300


def recount_or(pages, adj, n_p):
    page = {v: p for p, ids in enumerate(pages) for v in ids}
    hits = sum(1 for u, nbrs in enumerate(adj) for w in nbrs if page[w] == page[u])
    return hits / ((n_p - 1) * len(adj))


def test_criterion_2_overlap_ratio(acceptance_log):
    g = GraphIndex.from_lists([[1, 2, 20]] + [[] for _ in range(31)], R_max=4)
    or_u = overlap_ratio_vertex(PageLayout.identity(32, 4096, 256), g, 0)
    vertex_ok = or_u == 2 / 15
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(20, 200))
        n_p = int(rng.integers(2, 17))
        lists = [rng.choice(np.delete(np.arange(n), v), size=int(rng.integers(0, 9)),
                            replace=False).tolist() for v in range(n)]
        g = GraphIndex.from_lists(lists, R_max=8)
        perm = rng.permutation(n)
        pages = [perm[i:i + n_p].tolist() for i in range(0, n, n_p)]
        lay = PageLayout.from_pages(pages, 4096, 4096 // n_p)
        mismatches += overlap_ratio_graph(lay, g) != recount_or(pages, g.adjacency(), lay.n_p)
    acceptance_log(2, vertex_ok and mismatches == 0,
                   f"OR(u)={or_u:.4f}, "
                   f"{mismatches}/50 recount mismatches")
    assert vertex_ok
    assert mismatches == 0


def test_criterion_3_shuffle_efficacy(hundred, acceptance_log):
    h = hundred
    or_id = overlap_ratio_graph(h.index.layout, h.graph)
    or_sh = overlap_ratio_graph(h.shuffled.layout, h.graph)
    _, p_id, _ = measure(h, L=100)
    _, p_sh, _ = measure(h, L=100, use_shuffled_layout=True)
    lower = float(np.mean(p_sh < p_id))
    ok = h.index.n_p >= 8 and or_sh >= 3 * or_id and lower >= 0.8
    acceptance_log(3, ok, f"n_p={h.index.n_p}, OR(G) {or_id:.5f} -> {or_sh:.4f}, pages "
                          f"{p_id.mean():.1f} -> {p_sh.mean():.1f}, lower on {lower:.0%} of queries")
    assert h.index.n_p >= 8
    assert or_sh >= 3 * or_id
    assert lower >= 0.8


def test_criterion_4_memgraph_efficacy(hundred, acceptance_log):
    _, p0, h0 = measure(hundred, L=10)
    _, p1, h1 = measure(hundred, L=10, use_memgraph=True)
    dh, dp = 1 - h1.mean() / h0.mean(), 1 - p1.mean() / p0.mean()
    ok = dh >= 0.10 and dp >= 0.10
    acceptance_log(4, ok, f"hops -{dh:.0%}, pages -{dp:.0%} at L=10")
    assert dh >= 0.10 and dp >= 0.10


def test_criterion_5_dynamic_width(hundred, acceptance_log):
    r_dw, p_dw, _ = measure(hundred, L=10, dynamic_width=True)
    r_32, p_32, _ = measure(hundred, L=10, beam=32)
    ok = p_dw.mean() <= p_32.mean() and abs(r_dw - r_32) <= 0.05
    acceptance_log(5, ok, f"pages {p_dw.mean():.1f} vs {p_32.mean():.1f} at fixed width 32 "
                          f"({1 - p_dw.mean() / p_32.mean():.0%} fewer), recall {r_dw:.3f} vs {r_32:.3f}")
    assert p_dw.mean() <= p_32.mean()
    assert abs(r_dw - r_32) <= 0.05


def test_criterion_6_pipeline_direction(hundred, acceptance_log):
    r_seq, p_seq, _ = measure(hundred, L=10)
    r_pipe, p_pipe, _ = measure(hundred, L=10, pipeline=True, depth=8)
    share = float(np.mean(p_pipe >= p_seq))
    ok = share >= 0.8 and abs(r_pipe - r_seq) <= 0.05
    acceptance_log(6, ok, f"pages >= sequential on {share:.0%} of queries, "
                          f"recall {r_pipe:.3f} vs {r_seq:.3f}")
    assert share >= 0.8
    assert abs(r_pipe - r_seq) <= 0.05


def test_criterion_7_c1_synergy(hundred, acceptance_log):
    r0, _, _ = measure(hundred, L=10)
    r1, _, _ = measure(hundred, L=10, use_shuffled_layout=True, page_search=True)
    acceptance_log(7, r1 > r0, f"recall {r0:.3f} -> {r1:.3f} ({r1 - r0:+.3f})")
    assert r1 > r0


def test_criterion_8_c5_dominates_baseline(hundred, acceptance_log):
    c5 = {"use_memgraph": True, "use_shuffled_layout": True, "page_search": True,
          "dynamic_width": True}
    base = [(r, p.mean()) for r, p, _ in (measure(hundred, L=L) for L in SWEEP)]
    front = [(r, p.mean()) for r, p, _ in (measure(hundred, L=L, **c5) for L in SWEEP)]
    weak = strict = 0
    for rb, pb in base:
        better = [(rc, pc) for rc, pc in front if rc >= rb and pc <= pb]
        weak += bool(better)
        strict += any(rc > rb or pc < pb for rc, pc in better)
    ok = weak == len(base) and strict >= 2
    pts = ", ".join(f"({r:.3f}, {p:.1f}) vs ({rc:.3f}, {pc:.1f})"
                    for (r, p), (rc, pc) in zip(base, front))
    acceptance_log(8, ok, f"dominated {weak}/{len(base)}, strictly {strict}; "
                          f"(recall, pages) Baseline vs C5: {pts}")
    assert weak == len(base)
    assert strict >= 2


def test_criterion_9_io_accounting(hundred, tmp_path, acceptance_log):
    h = hundred
    arms = {"Baseline": {}, "C1": {"use_shuffled_layout": True, "page_search": True},
            "C2": {"pipeline": True, "dynamic_width": True},
            "C5": {"use_memgraph": True, "use_shuffled_layout": True, "page_search": True,
                   "dynamic_width": True}}
    bad = recount_bad = 0
    records = []
    for name, toggles in arms.items():
        path = tmp_path / f"{name}.jsonl"
        cfg = SearchConfig(L=20, **toggles)
        with LogWriter(path) as w:
            run_queries(h.engine, h.queries.data, cfg, name=name, writer=w, truth=h.truth)
        recs = read_log(path)
        records += recs
        bad += sum(r["n_read"] != r["n_eff"] + r["n_rbu"] for r in recs)
        traced = SearchConfig(L=20, trace=True, **toggles)
        for q in h.queries.data[:20]:
            r = h.engine.search(q, traced)
            loads = sum(1 for e in r.events if e[0] == "load")
            expands = sum(1 for e in r.events if e[0] == "expand")
            recount_bad += (loads, expands) != (r.stats.n_read, r.stats.n_eff)
    rows = {r["config"]: r for r in summarize(records)}
    uio_bad = 0
    for name in arms:
        recs = [r for r in records if r["config"] == name]
        uio_bad += rows[name]["u_io"] != sum(r["n_eff"] for r in recs) / sum(r["n_read"] for r in recs)
    ok = bad == 0 and recount_bad == 0 and uio_bad == 0
    uio = ", ".join(f"{n} {rows[n]['u_io']:.3f}" for n in arms)
    acceptance_log(9, ok, f"{bad} identity violations over {len(records)} queries, "
                          f"{recount_bad} trace mismatches, {uio_bad} U_io mismatches; U_io {uio}")
    assert bad == 0 and recount_bad == 0 and uio_bad == 0


def test_criterion_10_cache_neutrality(hundred, acceptance_log):
    h = hundred
    ref = run_all(h.engine, h.queries, L=20)
    rates, identical = [], True
    for frac in (0.0, 0.001, 0.01, 0.1):
        cache = build_sssp_cache(h.graph, h.index, h.index.medoid, budget_records(N, frac))
        with SearchEngine(h.index, h.engine.pq, cache=cache) as eng:
            res = [eng.search(q, SearchConfig(L=20, use_cache=True)) for q in h.queries.data]
        identical &= all(np.array_equal(a.ids, b.ids) and np.array_equal(a.distances, b.distances)
                         for a, b in zip(ref, res))
        rates.append(sum(r.stats.cache_hits for r in res) / sum(r.stats.n_read for r in res))
    monotone = all(b >= a for a, b in zip(rates, rates[1:]))
    acceptance_log(10, identical and monotone,
                   "results identical: " + str(identical) + ", hit rate by budget "
                   + ", ".join(f"{f}: {r:.4f}" for f, r in zip(("0", "0.1%", "1%", "10%"), rates)))
    assert identical
    assert monotone


def test_criterion_11_page_size_tradeoff(tmp_path, caplog, acceptance_log):
    x = gaussian_mixture(200, 960, clusters=4, seed=5)
    base = VectorDataset(x)
    g = build_vamana(base, R=64, L_build=80, seed=0)
    s_rec = record_size(960, "float32", 64)
    try:
        pack(base, g, 4096, tmp_path / "p4k.odi")
        errored = False
    except LayoutError:
        errored = True
    idx = pack(base, g, 8192, tmp_path / "p8k.odi")
    with caplog.at_level(logging.WARNING, logger="diskgraph"):
        lay = shuffle_pages(g, 8192, idx.record_size)
    warned = any("single record" in m for m in caplog.messages)
    identity = np.array_equal(lay.page_of, np.arange(200))
    ok = errored and idx.n_p == 1 and warned and identity
    acceptance_log(11, ok, f"record {s_rec} B: P=4096 rejected, P=8192 gives n_p={idx.n_p}, "
                           f"shuffle identity={identity}, warned={warned}")
    assert errored
    assert idx.n_p == 1 and warned and identity


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    """Two independent build -> pq -> shuffle -> search runs over the same 10K vectors."""
    root = tmp_path_factory.mktemp("cli")
    x = gaussian_mixture(10_050, 32, center_scale=1.5, seed=9)
    save_vectors(x[:10_000], root / "base.fvecs", "fvecs")
    save_vectors(x[10_000:], root / "queries.fvecs", "fvecs")
    dirs = []
    for run in ("a", "b"):
        out = root / run
        args = ["--out", str(out), "--data", str(root / "base.fvecs"),
                "--queries", str(root / "queries.fvecs"), "--seed", "0", "--R", "32",
                "--L-build", "64", "--threads", "1"]
        for cmd in ("build", "pq", "shuffle", "gt"):
            assert main([cmd, *args]) == 0
        assert main(["search", *args, "--config-name", "Baseline,C1,DynamicWidth",
                     "--L", "10,50"]) == 0
        dirs.append(out)
    return root, dirs


def roundtrip_bytes(path, load, save, tmp_path):
    again = tmp_path / ("again_" + path.name)
    save(load(path), again)
    return again.read_bytes() == path.read_bytes()


def test_criterion_12_format_fidelity(cli_runs, tmp_path, acceptance_log):
    root, (a, _) = cli_runs
    rng = np.random.default_rng(4)
    checks = {}
    for fmt, arr in (("fvecs", rng.normal(size=(50, 12)).astype(np.float32)),
                     ("bvecs", rng.integers(0, 256, size=(50, 12)).astype(np.uint8)),
                     ("ivecs", rng.integers(-5, 10**6, size=(50, 12)).astype(np.int32))):
        p = tmp_path / f"v.{fmt}"
        save_vectors(arr, p, fmt)
        checks[fmt] = roundtrip_bytes(p, lambda q, f=fmt: load_vectors(q, f).data,
                                      lambda d, q, f=fmt: save_vectors(d, q, f), tmp_path)
    checks["base.fvecs"] = roundtrip_bytes(root / "base.fvecs", lambda q: load_vectors(q, "fvecs").data,
                                           lambda d, q: save_vectors(d, q, "fvecs"), tmp_path)
    checks["graph"] = roundtrip_bytes(a / "graph.ovg", load_graph, save_graph, tmp_path)
    checks["codebook"] = roundtrip_bytes(a / "pq.codebook", load_codebook, save_codebook, tmp_path)
    checks["codes"] = roundtrip_bytes(a / "pq.codes", load_codes, save_codes, tmp_path)
    for name in ("index.odi", "index_shuffled.odi"):
        idx = DiskIndex.open(a / name)
        vecs, g = idx.read_all()
        copy = pack(VectorDataset(vecs), g, idx.page_size, tmp_path / name,
                    layout=idx.layout if name != "index.odi" else None)
        checks[name] = (tmp_path / name).read_bytes() == (a / name).read_bytes()
        if name != "index.odi":
            checks[name + ".map"] = (open(copy.map_path, "rb").read()
                                     == open(idx.map_path, "rb").read())
        checks[name + " graph"] = graph_to_bytes(g) == (a / "graph.ovg").read_bytes()
    mg = build_memgraph(load_vectors(root / "base.fvecs", "fvecs"), 0.01, seed=0)
    save_memgraph(mg, tmp_path / "m.omg")
    checks["memgraph"] = roundtrip_bytes(tmp_path / "m.omg", load_memgraph, save_memgraph, tmp_path)

    idx = DiskIndex.open(a / "index.odi")
    with PageReader.for_index(idx, workers=4) as reader:
        sync = [reader.read_page_sync(p) for p in range(idx.n_pages)]
        batch = reader.batch(8)
        got, todo = {}, list(range(idx.n_pages))
        while todo or batch.in_flight:
            room = batch.max_depth - batch.in_flight
            if todo and room:
                batch.submit([todo.pop() for _ in range(min(room, len(todo)))])
            got.update(batch.poll(block=True))
    checks["async pages"] = all(got[p] == sync[p] for p in range(idx.n_pages))
    failed = [k for k, v in checks.items() if not v]
    acceptance_log(12, not failed, f"{len(checks) - len(failed)}/{len(checks)} byte-exact "
                                   f"({idx.n_pages} pages read async and sync)"
                                   + (f"; failed: {failed}" if failed else ""))
    assert not failed


def test_criterion_13_determinism(cli_runs, acceptance_log):
    _, dirs = cli_runs
    same, total = True, 0
    for name in ("Baseline", "C1", "DynamicWidth"):
        logs = [read_log(d / "runs" / f"{name}.jsonl") for d in dirs]
        strip = [[{k: v for k, v in r.items() if k not in LATENCY_FIELDS} for r in log] for log in logs]
        same &= strip[0] == strip[1]
        total += len(strip[0])
    artifacts = all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()
                    for f in ("graph.ovg", "index.odi", "index_shuffled.odi", "pq.codes"))
    acceptance_log(13, same and artifacts,
                   f"{total} log records identical modulo latency: {same}; artifacts identical: {artifacts}")
    assert same and artifacts

