"""Experiment configuration: INI file sections flattened onto one dataclass."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from ..search import TOGGLES, SearchConfig


@dataclass
class BenchConfig:
    data: str = ""
    format: str = "fvecs"
    elem: str = "float32"
    metric: str = "euclidean"
    queries: str = ""
    out: str = "out"
    # graph build
    R: int = 64
    L_build: int = 125
    alpha: float = 1.2
    seed: int = 0
    # quantization
    pq_m: int = 16
    pq_k: int = 256
    # layout
    page_size: int = 4096
    shuffle_passes: int = 2
    # navigation graph and cache
    mem_ratio: float = 0.001
    mem_R: int = 48
    mem_L: int = 128
    cache_budget: float = 0.001
    # search
    k: int = 10
    L: list = field(default_factory=lambda: [10, 20, 50, 100])
    beam: int = 8
    omega_min: int = 8
    omega_max: int = 32
    patience: int = 2
    depth: int = 8
    L_mem: int = 10
    fanout: int = 1
    config_name: list = field(default_factory=lambda: ["Baseline"])
    threads: int = 1
    reps: int = 1
    direct_io: bool = True

    def validate(self) -> None:
        if self.reps < 1:
            raise ValueError("repetitions must be >= 1")
        if self.threads < 1:
            raise ValueError("thread count must be >= 1")
        for name in self.config_name:
            named_config(name)

    def search_config(self, name: str, L: int) -> SearchConfig:
        cfg = SearchConfig(k=self.k, L=L, beam=self.beam, omega_min=self.omega_min,
                           omega_max=self.omega_max, patience=self.patience, depth=self.depth,
                           L_mem=self.L_mem, fanout=self.fanout)
        for key, on in named_config(name).items():
            setattr(cfg, key, on)
        return cfg

    def update(self, values: dict) -> None:
        """Apply string or typed overrides, coercing to each field's type."""
        types = {f.name: f for f in dataclasses.fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown configuration key {key!r}")
            if raw is None:
                continue
            setattr(self, key, _coerce(getattr(self, key), raw))


def _coerce(current, raw):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected on/off, got {raw!r}")
    if isinstance(current, list):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return [int(s) for s in items] if current and isinstance(current[0], int) else items
    return type(current)(raw)


def load_config(path) -> BenchConfig:
    """Read ``[section] key = value`` lines; section names are for readability only."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(path)
    cfg = BenchConfig()
    for section in parser.sections():
        cfg.update(dict(parser[section]))
    return cfg


_BASE = {"use_pq": True}

NAMED_CONFIGS = {
    "Baseline": {},
    "Cache": {"use_cache": True},
    "MemGraph": {"use_memgraph": True},
    "PageShuffle": {"use_shuffled_layout": True},
    "Pipeline": {"pipeline": True},
    "DynamicWidth": {"dynamic_width": True},
    "PageSearch": {"page_search": True},
    "C1": {"use_shuffled_layout": True, "page_search": True},
    "C2": {"pipeline": True, "dynamic_width": True},
    "C3": {"use_memgraph": True, "use_shuffled_layout": True, "page_search": True},
    "C4": {"use_memgraph": True, "pipeline": True, "dynamic_width": True},
    "C5": {"use_memgraph": True, "use_shuffled_layout": True, "page_search": True,
           "dynamic_width": True},
}
NAMED_CONFIGS["OctopusANN"] = NAMED_CONFIGS["C5"]


def named_config(name: str) -> dict:
    """Full toggle assignment for a named ablation arm."""
    if name not in NAMED_CONFIGS:
        raise KeyError(f"unknown configuration {name!r}; known: {', '.join(NAMED_CONFIGS)}")
    toggles = {t: False for t in TOGGLES}
    toggles.update(_BASE)
    toggles.update(NAMED_CONFIGS[name])
    return toggles
