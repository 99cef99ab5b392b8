"""Tables and vector-graphic plots built from per-query run logs."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runner import read_log, summarize

BREAKDOWN_CHAIN = ("Baseline", "MemGraph", "C3", "C5")

SERIES = {
    "recall_qps": ("qps", "Queries per second"),
    "recall_latency": ("latency_mean_ms", "Mean latency (ms)"),
    "recall_pages": ("pages", "Pages read per query"),
}


def write_csv(rows: list[dict], path, columns=None) -> None:
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def load_runs(paths) -> list[dict]:
    records = []
    for p in paths:
        records.extend(read_log(p))
    if not records:
        raise ValueError("no run records found")
    return records


def check_query_counts(rows: list[dict]) -> None:
    counts = {r["queries"] for r in rows}
    if len(counts) > 1:
        raise ValueError(f"inconsistent query counts across runs: {sorted(counts)}")


def series_rows(rows: list[dict], metric: str) -> list[dict]:
    out = []
    for r in sorted(rows, key=lambda r: (r["config"], r["L"])):
        out.append({"config": r["config"], "L": r["L"], "recall": r.get("recall"), metric: r[metric]})
    return out


def breakdown_rows(rows: list[dict], metric: str = "pages") -> list[dict]:
    """Cumulative per-step change of ``metric`` along the configuration chain, per L.

    The deltas of each L telescope to the chain's last value minus its first.
    """
    by = {(r["config"], r["L"]): r for r in rows}
    out = []
    for L in sorted({r["L"] for r in rows}):
        chain = [c for c in BREAKDOWN_CHAIN if (c, L) in by]
        prev = None
        for c in chain:
            val = by[(c, L)][metric]
            out.append({"L": L, "step": c, metric: val,
                        "delta": 0.0 if prev is None else val - prev,
                        "cumulative": 0.0 if prev is None else val - by[(chain[0], L)][metric]})
            prev = val
    return out


def plot_series(series: list[dict], metric: str, ylabel: str, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for name in dict.fromkeys(r["config"] for r in series):
        pts = sorted((r["recall"], r[metric]) for r in series if r["config"] == name)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("Recall@10")
    ax.set_ylabel(ylabel)
    if metric == "qps":
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_breakdown(rows: list[dict], metric: str, path) -> None:
    Ls = sorted({r["L"] for r in rows})
    fig, axes = plt.subplots(1, len(Ls), figsize=(3.0 * len(Ls), 3.2), squeeze=False)
    for ax, L in zip(axes[0], Ls):
        sub = [r for r in rows if r["L"] == L]
        ax.bar([r["step"] for r in sub], [r[metric] for r in sub], color="0.55")
        ax.set_title(f"L={L}", fontsize=9)
        ax.tick_params(axis="x", labelsize=7, rotation=30)
    axes[0][0].set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def make_report(log_paths, out_dir, k: int = 10) -> list[dict]:
    """Write summary.csv, one CSV and SVG per recall series, and the breakdown."""
    os.makedirs(out_dir, exist_ok=True)
    rows = summarize(load_runs(log_paths), k)
    check_query_counts(rows)
    rows.sort(key=lambda r: (r["config"], r["L"]))
    write_csv(rows, os.path.join(out_dir, "summary.csv"))
    have_recall = all("recall" in r for r in rows)
    if have_recall:
        for stem, (metric, ylabel) in SERIES.items():
            data = series_rows(rows, metric)
            write_csv(data, os.path.join(out_dir, f"{stem}.csv"))
            plot_series(data, metric, ylabel, os.path.join(out_dir, f"{stem}.svg"))
    bd = breakdown_rows(rows)
    if bd:
        write_csv(bd, os.path.join(out_dir, "breakdown.csv"))
        plot_breakdown(bd, "pages", os.path.join(out_dir, "breakdown.svg"))
    return rows
