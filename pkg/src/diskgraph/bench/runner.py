"""Closed-loop query runner and the summaries derived from its per-query log."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..dataset import GroundTruth
from ..search import SearchConfig, SearchEngine

LATENCY_FIELDS = ("latency_s", "start", "end")


class LogWriter:
    """Serialises JSON lines from many query threads into one file."""

    def __init__(self, path):
        self._f = open(path, "w")
        self._lock = threading.Lock()

    def write(self, rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True)
        with self._lock:
            self._f.write(line + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_queries(engine: SearchEngine, queries: np.ndarray, cfg: SearchConfig, *, name: str,
                rep: int = 0, threads: int = 1, writer: LogWriter | None = None,
                truth: GroundTruth | None = None) -> list[dict]:
    """Run every query once with ``threads`` closed-loop workers; one record per query."""
    engine.check(cfg)
    records = [None] * len(queries)
    cursor = iter(range(len(queries)))
    take = threading.Lock()
    t0 = time.perf_counter()

    def worker(tid: int):
        while True:
            with take:
                qi = next(cursor, None)
            if qi is None:
                return
            start = time.perf_counter() - t0
            res = engine.search(queries[qi], cfg)
            end = time.perf_counter() - t0
            rec = {"config": name, "L": cfg.L, "rep": rep, "query": qi, "thread": tid,
                   "ids": res.ids.tolist(), "distances": [round(float(d), 6) for d in res.distances],
                   "start": start, "end": end, **res.stats.as_dict()}
            if truth is not None:
                rec["truth"] = truth.ids[qi, :cfg.k].tolist()
            records[qi] = rec
            if writer is not None:
                writer.write(rec)

    if threads == 1:
        worker(0)
    else:
        pool = [threading.Thread(target=worker, args=(t,)) for t in range(threads)]
        for t in pool:
            t.start()
        for t in pool:
            t.join()
    return records


def read_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def recall_of(rec: dict, k: int) -> float:
    return len(set(rec["ids"][:k]) & set(rec["truth"][:k])) / k


def summarize_rep(recs: list[dict], k: int = 10) -> dict:
    """Metrics of one repetition of one (configuration, L) cell."""
    lat = np.array([r["latency_s"] for r in recs])
    wall = max(r["end"] for r in recs) - min(r["start"] for r in recs)
    n_read = sum(r["n_read"] for r in recs)
    n_eff = sum(r["n_eff"] for r in recs)
    hits = sum(r["cache_hits"] for r in recs)
    row = {
        "queries": len(recs),
        "qps": len(recs) / wall if wall > 0 else float("inf"),
        "latency_mean_ms": float(lat.mean() * 1e3),
        "latency_p50_ms": float(np.percentile(lat, 50) * 1e3),
        "latency_p99_ms": float(np.percentile(lat, 99) * 1e3),
        "pages": float(np.mean([r["pages_read"] for r in recs])),
        "hops": float(np.mean([r["hops"] for r in recs])),
        "u_io": n_eff / n_read if n_read else float("nan"),
        "cache_hit_rate": hits / n_read if n_read else 0.0,
    }
    if all("truth" in r for r in recs):
        row["recall"] = float(np.mean([recall_of(r, k) for r in recs]))
    return row


METRICS = ("recall", "qps", "latency_mean_ms", "latency_p50_ms", "latency_p99_ms",
           "pages", "hops", "u_io", "cache_hit_rate")


def summarize(records: list[dict], k: int = 10) -> list[dict]:
    """One row per (configuration, L): mean and std over repetitions."""
    cells: dict = {}
    for r in records:
        cells.setdefault((r["config"], r["L"]), {}).setdefault(r["rep"], []).append(r)
    rows = []
    for (name, L), reps in cells.items():
        per_rep = [summarize_rep(reps[rep], k) for rep in sorted(reps)]
        row = {"config": name, "L": L, "reps": len(per_rep), "queries": per_rep[0]["queries"]}
        for m in METRICS:
            if m in per_rep[0]:
                vals = np.array([p[m] for p in per_rep])
                row[m] = float(vals.mean())
                row[m + "_std"] = float(vals.std())
        rows.append(row)
    return rows


@dataclass
class BuildCost:
    step: str
    seconds: float
    peak_bytes: int
    disk_bytes: int
    mem_bytes: int

    def row(self) -> dict:
        return {"step": self.step, "BT_s": round(self.seconds, 3), "MaxM_bytes": self.peak_bytes,
                "Disk_bytes": self.disk_bytes, "Mem_bytes": self.mem_bytes}
