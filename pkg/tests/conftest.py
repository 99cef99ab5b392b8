from dataclasses import dataclass

import numpy as np
import pytest

from diskgraph.dataset import VectorDataset, brute_force_knn, gaussian_mixture
from diskgraph.graph import build_vamana
from diskgraph.layout import pack, shuffle_pages
from diskgraph.memgraph import build_memgraph
from diskgraph.pq import build_pq

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


@dataclass
class World:
    base: VectorDataset
    queries: VectorDataset
    graph: object
    index: object
    shuffled: object
    pq: object
    memgraph: object
    truth: object


@pytest.fixture(scope="session")
def small_world(tmp_path_factory) -> World:
    """2,000 x 16-d mixture with every artifact the engine can use."""
    root = tmp_path_factory.mktemp("small")
    x = gaussian_mixture(2100, 16, clusters=16, center_scale=1.5, seed=3)
    base, queries = VectorDataset(x[:2000]), VectorDataset(x[2000:])
    g = build_vamana(base, R=16, L_build=40, seed=0)
    idx = pack(base, g, 4096, root / "id.odi")
    sh = pack(base, g, 4096, root / "sh.odi", layout=shuffle_pages(g, 4096, idx.record_size))
    pq = build_pq(base, 8, 64, seed=0)
    mg = build_memgraph(base, 0.05, R=12, L=24, seed=0)
    return World(base, queries, g, idx, sh, pq, mg, brute_force_knn(base, queries, 10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
