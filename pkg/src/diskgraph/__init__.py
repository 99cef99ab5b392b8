"""Disk-resident proximity-graph search with page-level I/O optimizations."""

from .dataset import (GroundTruth, VectorDataset, brute_force_knn, load_vectors,
                      recall_at_k, save_vectors)
from .graph import GraphIndex, build_vamana, greedy_search
from .layout import DiskIndex, PageLayout, pack, shuffle_pages
from .pq import PQModel, build_pq

__all__ = [
    "DiskIndex", "GraphIndex", "GroundTruth", "PQModel", "PageLayout", "VectorDataset",
    "brute_force_knn", "build_pq", "build_vamana", "greedy_search", "load_vectors",
    "pack", "recall_at_k", "save_vectors", "shuffle_pages",
]
