"""``diskgraph`` command line: build artifacts, run ablations, render reports."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

from ..cache import budget_records, build_sssp_cache
from ..dataset import (VectorDataset, brute_force_knn, gaussian_mixture, load_ground_truth,
                       load_vectors, save_ground_truth, save_vectors)
from ..graph import build_vamana, load_graph, save_graph
from ..layout import DiskIndex, LayoutError, pack, record_size, records_per_page, shuffle_pages
from ..memgraph import build_memgraph, load_memgraph, save_memgraph
from ..pq import PQModel, build_pq, load_codebook, load_codes, save_codebook, save_codes
from ..search import SearchEngine
from .config import BenchConfig, load_config, named_config
from .report import make_report, write_csv
from .runner import BuildCost, LogWriter, run_queries, summarize

log = logging.getLogger("diskgraph")


class MissingArtifact(RuntimeError):
    pass


class Artifacts:
    """File names of every artifact under the output directory."""

    def __init__(self, out: str):
        self.out = out
        self.graph = os.path.join(out, "graph.ovg")
        self.index = os.path.join(out, "index.odi")
        self.shuffled = os.path.join(out, "index_shuffled.odi")
        self.codebook = os.path.join(out, "pq.codebook")
        self.codes = os.path.join(out, "pq.codes")
        self.memgraph = os.path.join(out, "memgraph.omg")
        self.cache_ids = os.path.join(out, "cache_ids.txt")
        self.gt_ids = os.path.join(out, "gt.ivecs")
        self.gt_dists = os.path.join(out, "gt.fvecs")
        self.build_report = os.path.join(out, "build_report.csv")
        self.runs = os.path.join(out, "runs")
        self.report = os.path.join(out, "report")

    def require(self, *paths) -> None:
        for p in paths:
            if not os.path.exists(p):
                raise MissingArtifact(f"missing prerequisite {p}; run the command that builds it first")


def _file_bytes(*paths) -> int:
    return sum(os.path.getsize(p) for p in paths if os.path.exists(p))


def _append_build_row(art: Artifacts, cost: BuildCost) -> None:
    new = not os.path.exists(art.build_report)
    row = cost.row()
    with open(art.build_report, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(row), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)
    print(",".join(str(v) for v in row.values()))


def _load_base(cfg: BenchConfig) -> VectorDataset:
    if not cfg.data:
        raise MissingArtifact("--data is required")
    return load_vectors(cfg.data, cfg.format, elem=cfg.elem, metric=cfg.metric)


def _load_queries(cfg: BenchConfig) -> VectorDataset:
    if not cfg.queries:
        raise MissingArtifact("--queries is required")
    return load_vectors(cfg.queries, cfg.format, elem=cfg.elem, metric=cfg.metric)


# --------------------------------------------------------------------------
# build steps
# --------------------------------------------------------------------------

def cmd_build(cfg: BenchConfig, art: Artifacts) -> None:
    base = _load_base(cfg)
    # fail before the expensive build when a record cannot fit a page
    records_per_page(cfg.page_size, record_size(base.d, base.elem, min(cfg.R, base.n - 1)))
    t = time.perf_counter()
    g = build_vamana(base, R=cfg.R, L_build=cfg.L_build, alpha=cfg.alpha, seed=cfg.seed)
    save_graph(g, art.graph)
    idx = pack(base, g, cfg.page_size, art.index)
    dt = time.perf_counter() - t
    peak = base.data.nbytes + g.nbytes() + 8 * base.n + idx.layout.nbytes()
    _append_build_row(art, BuildCost("build", dt, peak, _file_bytes(art.graph, art.index), 0))


def cmd_pq(cfg: BenchConfig, art: Artifacts) -> None:
    base = _load_base(cfg)
    t = time.perf_counter()
    model = build_pq(base, cfg.pq_m, cfg.pq_k, seed=cfg.seed)
    save_codebook(model.codebook, art.codebook)
    save_codes(model.codes, art.codes)
    dt = time.perf_counter() - t
    _append_build_row(art, BuildCost("pq", dt, base.data.nbytes + model.nbytes(),
                                     _file_bytes(art.codebook, art.codes), model.nbytes()))


def cmd_shuffle(cfg: BenchConfig, art: Artifacts) -> None:
    art.require(art.graph)
    base = _load_base(cfg)
    g = load_graph(art.graph)
    t = time.perf_counter()
    s_rec = record_size(base.d, base.elem, g.R_max)
    layout = shuffle_pages(g, cfg.page_size, s_rec, passes=cfg.shuffle_passes, seed=cfg.seed)
    pack(base, g, cfg.page_size, art.shuffled, layout=layout)
    dt = time.perf_counter() - t
    # symmetric adjacency (CSR) plus page/slot maps and the page table
    peak = 8 * int(g.deg.sum()) + 4 * (g.n + 1) + layout.nbytes()
    _append_build_row(art, BuildCost("shuffle", dt, peak,
                                     _file_bytes(art.shuffled, art.shuffled + ".map"), 0))


def cmd_memgraph(cfg: BenchConfig, art: Artifacts) -> None:
    base = _load_base(cfg)
    t = time.perf_counter()
    mg = build_memgraph(base, cfg.mem_ratio, R=cfg.mem_R, L=cfg.mem_L, seed=cfg.seed)
    save_memgraph(mg, art.memgraph)
    dt = time.perf_counter() - t
    _append_build_row(art, BuildCost("memgraph", dt, mg.nbytes() + 8 * mg.size,
                                     _file_bytes(art.memgraph), mg.nbytes()))


def _build_cache(cfg: BenchConfig, art: Artifacts, idx: DiskIndex):
    art.require(art.graph)
    g = load_graph(art.graph)
    return build_sssp_cache(g, idx, g.medoid, budget_records(g.n, cfg.cache_budget))


def cmd_cache(cfg: BenchConfig, art: Artifacts) -> None:
    art.require(art.index)
    idx = DiskIndex.open(art.index)
    t = time.perf_counter()
    cache = _build_cache(cfg, art, idx)
    dt = time.perf_counter() - t
    # the cache itself is rebuilt at engine start; the id list is kept for inspection
    with open(art.cache_ids, "w") as f:
        f.write("\n".join(str(v) for v in cache.records) + ("\n" if cache.records else ""))
    _append_build_row(art, BuildCost("cache", dt, cache.nbytes(), 0, cache.nbytes()))


def cmd_gt(cfg: BenchConfig, art: Artifacts) -> None:
    base, queries = _load_base(cfg), _load_queries(cfg)
    gt = brute_force_knn(base, queries, cfg.k)
    save_ground_truth(gt, art.gt_ids, art.gt_dists)
    print(f"ground truth: {len(gt)} queries, k={gt.k}")


def cmd_synth(cfg: BenchConfig, args) -> None:
    x = gaussian_mixture(args.n + args.nq, args.d, clusters=args.clusters,
                         center_scale=args.center_scale, seed=cfg.seed)
    save_vectors(x[:args.n], cfg.data, "fvecs")
    save_vectors(x[args.n:], cfg.queries, "fvecs")
    print(f"wrote {args.n} base and {args.nq} query vectors of dimension {args.d}")


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------

def open_engine(cfg: BenchConfig, art: Artifacts, names) -> SearchEngine:
    art.require(art.index)
    need = {t for name in names for t, on in named_config(name).items() if on}
    idx = DiskIndex.open(art.index)
    pq = shuffled = mg = cache = None
    if "use_pq" in need:
        art.require(art.codebook, art.codes)
        pq = PQModel(load_codebook(art.codebook), load_codes(art.codes))
    if "use_shuffled_layout" in need:
        art.require(art.shuffled)
        shuffled = DiskIndex.open(art.shuffled)
    if "use_memgraph" in need:
        art.require(art.memgraph)
        mg = load_memgraph(art.memgraph)
    if "use_cache" in need:
        cache = _build_cache(cfg, art, idx)
    return SearchEngine(idx, pq, mg, cache, shuffled, direct_io=cfg.direct_io)


def run_search(cfg: BenchConfig, art: Artifacts, names) -> list[dict]:
    art.require(art.gt_ids, art.gt_dists)
    queries = _load_queries(cfg)
    truth = load_ground_truth(art.gt_ids, art.gt_dists)
    if len(truth) != queries.n:
        raise MissingArtifact("ground truth does not match the query file; rerun gt")
    os.makedirs(art.runs, exist_ok=True)
    rows = []
    with open_engine(cfg, art, names) as engine:
        for name in names:
            records = []
            with LogWriter(os.path.join(art.runs, f"{name}.jsonl")) as writer:
                for L in cfg.L:
                    scfg = cfg.search_config(name, L)
                    for rep in range(cfg.reps):
                        records += run_queries(engine, queries.data, scfg, name=name, rep=rep,
                                               threads=cfg.threads, writer=writer, truth=truth)
            block = summarize(records, cfg.k)
            write_csv(block, os.path.join(art.out, f"search_{name}.csv"))
            rows += block
    cols = ["config", "L", "reps", "queries", "recall", "qps", "latency_mean_ms",
            "latency_p99_ms", "pages", "hops", "u_io", "cache_hit_rate"]
    writer = csv.DictWriter(sys.stdout, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def cmd_search(cfg: BenchConfig, art: Artifacts) -> None:
    run_search(cfg, art, cfg.config_name)


def cmd_sweep(cfg: BenchConfig, art: Artifacts) -> None:
    run_search(cfg, art, cfg.config_name)
    cmd_report(cfg, art)


def cmd_report(cfg: BenchConfig, art: Artifacts, logs=None) -> None:
    if not logs:
        if not os.path.isdir(art.runs):
            raise MissingArtifact(f"no run logs under {art.runs}")
        logs = sorted(os.path.join(art.runs, f) for f in os.listdir(art.runs) if f.endswith(".jsonl"))
    rows = make_report(logs, art.report, cfg.k)
    print(f"report: {len(rows)} rows written to {art.report}")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

COMMANDS = ("build", "pq", "shuffle", "memgraph", "cache", "gt", "search", "sweep", "report", "synth")

_FLAGS = {
    "--data": "data", "--format": "format", "--elem": "elem", "--metric": "metric",
    "--queries": "queries", "--R": "R", "--L-build": "L_build", "--alpha": "alpha",
    "--page-size": "page_size", "--pq-m": "pq_m", "--pq-k": "pq_k", "--mem-ratio": "mem_ratio",
    "--cache-budget": "cache_budget", "--L": "L", "--beam": "beam", "--depth": "depth",
    "--config-name": "config_name", "--threads": "threads", "--reps": "reps", "--seed": "seed",
    "--out": "out", "--k": "k", "--direct-io": "direct_io",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diskgraph", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("logs", nargs="*", help="run logs for the report command")
    p.add_argument("--config", help="INI file; command-line flags override its keys")
    for flag, dest in _FLAGS.items():
        p.add_argument(flag, dest=dest, default=None)
    p.add_argument("--n", type=int, default=10000, help="synth: base vectors")
    p.add_argument("--nq", type=int, default=100, help="synth: query vectors")
    p.add_argument("--d", type=int, default=32, help="synth: dimension")
    p.add_argument("--clusters", type=int, default=64)
    p.add_argument("--center-scale", type=float, default=1.5)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> BenchConfig:
    cfg = load_config(args.config) if args.config else BenchConfig()
    cfg.update({dest: getattr(args, dest) for dest in _FLAGS.values()})
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        art = Artifacts(cfg.out)
        if args.command == "synth":
            cmd_synth(cfg, args)
        elif args.command == "report":
            cmd_report(cfg, art, args.logs)
        else:
            globals()[f"cmd_{args.command}"](cfg, art)
    except (MissingArtifact, LayoutError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"diskgraph {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
