"""Enumerate and prune the architecture space into representative paths.

A path at depth d pairs a width tuple (h_1..h_d) with a block-kind tuple
(m_1..m_d).  Width tuples are restricted to non-decreasing sequences, thinned
by a greedy log-distance filter and then by k-means; kind tuples go through
k-means over their one-hot encodings.  The two reduced lists are zipped into
exactly ``k_d`` paths per depth.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
import pathlib

import numpy as np

from .blocks import BlockKind


@dataclass(frozen=True)
class Path:
    path_id: str
    types: tuple[BlockKind, ...]
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(BlockKind(t) for t in self.types))
        object.__setattr__(self, "dims", tuple(int(h) for h in self.dims))
        if len(self.types) != len(self.dims) or not self.types:
            raise ValueError(f"{self.path_id}: {len(self.types)} types vs {len(self.dims)} dims")

    @property
    def depth(self) -> int:
        return len(self.types)

    def layers(self, h0: int) -> list[tuple[BlockKind, int, int]]:
        """(kind, dim_in, dim_out) per layer, chaining from the embedding width."""
        ins = (h0,) + self.dims[:-1]
        return list(zip(self.types, ins, self.dims))

    def is_monotone(self, h0: int) -> bool:
        full = (h0,) + self.dims
        return all(b >= a for a, b in zip(full, full[1:]))

    def describe(self) -> str:
        return " -> ".join(f"{t.value}({h})" for t, h in zip(self.types, self.dims))

    def to_json(self) -> dict:
        return {"path_id": self.path_id, "depth": self.depth,
                "types": [t.value for t in self.types], "dims": list(self.dims)}

    @classmethod
    def from_json(cls, d: dict) -> Path:
        return cls(d["path_id"], tuple(d["types"]), tuple(d["dims"]))


PAPER_DEPTH_TARGETS = {3: 60, 4: 100, 5: 100, 6: 100}


@dataclass
class SpaceConfig:
    depths: tuple[int, ...] = (3, 4, 5, 6)
    widths: tuple[int, ...] = (64, 128, 256, 512)
    modules: tuple[BlockKind, ...] = tuple(BlockKind)
    h0: int = 64
    targets: dict[int, int] = field(default_factory=lambda: dict(PAPER_DEPTH_TARGETS))
    tau_dist: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(sorted(int(d) for d in self.depths))
        self.widths = tuple(sorted(int(h) for h in self.widths))
        self.modules = tuple(BlockKind(m) for m in self.modules)
        self.targets = {int(k): int(v) for k, v in self.targets.items()}
        if not (self.h0 <= min(self.widths) or self.h0 in self.widths):
            raise ValueError(f"h0={self.h0} must be <= min(widths) or one of the widths")
        if self.tau_dist <= 0:
            raise ValueError("tau_dist must be positive")
        for d in self.depths:
            if self.targets.get(d, 0) < 1:
                raise ValueError(f"missing or non-positive target k_d for depth {d}")

    def to_json(self) -> dict:
        return {"depths": list(self.depths), "widths": list(self.widths),
                "modules": [m.value for m in self.modules], "h0": self.h0,
                "targets": {str(k): v for k, v in sorted(self.targets.items())},
                "tau_dist": self.tau_dist, "seed": self.seed}


def enum_dim_paths(cfg: SpaceConfig, d: int) -> list[tuple[int, ...]]:
    """All non-decreasing width tuples of length d starting at or above h0, sorted."""
    eligible = [h for h in cfg.widths if h >= cfg.h0]
    return list(itertools.combinations_with_replacement(eligible, d))


def log_distance(ha, hb, h0: int) -> float:
    if len(ha) != len(hb):
        raise ValueError(f"paths of different depth: {len(ha)} vs {len(hb)}")
    a = np.array((h0, *ha), dtype=float)
    b = np.array((h0, *hb), dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("dimensions must be positive")
    return float(np.sqrt(np.sum((np.log2(a) - np.log2(b)) ** 2)))


def greedy_select(paths, tau_dist: float, h0: int) -> list[tuple[int, ...]]:
    """Keep a path iff it sits at least ``tau_dist`` from everything kept so far."""
    kept: list[tuple[int, ...]] = []
    for p in sorted(set(map(tuple, paths))):
        if all(log_distance(p, q, h0) >= tau_dist for q in kept):
            kept.append(p)
    return kept


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100,
           tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding then Lloyd iterations; returns (centroids, labels)."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    prev = math.inf
    for _ in range(max_iter):
        d = _sqdist(x, centers)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # re-seat an empty cluster on the worst-served point
                far = int(d[np.arange(len(x)), labels].argmax())
                centers[j] = x[far]
        if prev - inertia < tol:
            break
        prev = inertia
    labels = _sqdist(x, centers).argmin(axis=1)
    return centers, labels


def kmeans_reduce(items: np.ndarray, k: int, seed: int) -> list[int]:
    """Indices of k representative items, one per cluster: the real item nearest its centroid.

    Clusters are visited in centroid order; ties go to the lowest index and
    an item already chosen by an earlier cluster is skipped.
    """
    items = np.asarray(items, dtype=float)
    n_distinct = len(np.unique(items, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct items")
    if k == len(items):
        return list(range(len(items)))
    centers, _ = kmeans(items, k, seed)
    d = _sqdist(items, centers)
    chosen: list[int] = []
    taken = set()
    for j in range(k):
        for idx in np.argsort(d[:, j], kind="stable"):
            if int(idx) not in taken:
                chosen.append(int(idx))
                taken.add(int(idx))
                break
    return chosen


def one_hot_types(type_paths: list[tuple[BlockKind, ...]], modules) -> np.ndarray:
    pos = {m: i for i, m in enumerate(modules)}
    d = len(type_paths[0])
    out = np.zeros((len(type_paths), d * len(modules)))
    for r, tp in enumerate(type_paths):
        for i, m in enumerate(tp):
            out[r, i * len(modules) + pos[m]] = 1.0
    return out


def log_dims(dim_paths: list[tuple[int, ...]]) -> np.ndarray:
    return np.log2(np.array(dim_paths, dtype=float))


def reduced_dims(cfg: SpaceConfig, d: int) -> list[tuple[int, ...]]:
    dims = greedy_select(enum_dim_paths(cfg, d), cfg.tau_dist, cfg.h0)
    k = min(cfg.targets[d], len(dims))
    return [dims[i] for i in kmeans_reduce(log_dims(dims), k, cfg.seed)]


def reduced_types(cfg: SpaceConfig, d: int) -> list[tuple[BlockKind, ...]]:
    types = list(itertools.product(cfg.modules, repeat=d))
    k = min(cfg.targets[d], len(types))
    return [types[i] for i in kmeans_reduce(one_hot_types(types, cfg.modules), k, cfg.seed)]


def compose_space(cfg: SpaceConfig) -> list[Path]:
    """Exactly ``targets[d]`` distinct monotone paths per depth, ids ``d{d}-p{i}``."""
    paths: list[Path] = []
    for d in cfg.depths:
        k_d = cfg.targets[d]
        dims = reduced_dims(cfg, d)
        types = reduced_types(cfg, d)
        all_dims = enum_dim_paths(cfg, d)
        n_types_total = len(cfg.modules) ** d
        if k_d > len(all_dims) * n_types_total:
            raise ValueError(f"depth {d}: target {k_d} exceeds "
                             f"{len(all_dims) * n_types_total} available combinations")
        pairs: list[tuple[tuple[int, ...], tuple[BlockKind, ...]]] = []
        used = set()
        for i in range(k_d):
            pair = (dims[i % len(dims)], types[i % len(types)])
            if pair in used:
                pair = _next_unused(used, dims, types, cfg, d)
            used.add(pair)
            pairs.append(pair)
        for i, (h, m) in enumerate(pairs):
            paths.append(Path(f"d{d}-p{i}", m, h))
    return paths


def _next_unused(used, dims, types, cfg: SpaceConfig, d: int):
    """First unused (dims, types) pair, reduced lists first, then the unreduced ones."""
    for h, m in itertools.product(dims, types):
        if (h, m) not in used:
            return h, m
    for h, m in itertools.product(enum_dim_paths(cfg, d), itertools.product(cfg.modules, repeat=d)):
        if (h, m) not in used:
            return h, m
    raise ValueError(f"depth {d}: no unused combination left")


def unpruned_size(cfg: SpaceConfig) -> int:
    return sum(len(enum_dim_paths(cfg, d)) * len(cfg.modules) ** d for d in cfg.depths)


def space_stats(paths: list[Path], h0: int) -> dict:
    by_depth: dict[int, int] = {}
    kinds: dict[str, int] = {}
    keys = set()
    for p in paths:
        by_depth[p.depth] = by_depth.get(p.depth, 0) + 1
        for kind, din, dout in p.layers(h0):
            kinds[kind.value] = kinds.get(kind.value, 0) + 1
            keys.add((kind, din, dout))
    return {"paths": len(paths), "by_depth": dict(sorted(by_depth.items())),
            "layer_kinds": dict(sorted(kinds.items())), "unique_blocks": len(keys),
            "total_layers": sum(p.depth for p in paths)}


def save_space(paths: list[Path], path: str | pathlib.Path) -> None:
    pathlib.Path(path).write_text(json.dumps([p.to_json() for p in paths], indent=1))


def load_space(path: str | pathlib.Path) -> list[Path]:
    return [Path.from_json(d) for d in json.loads(pathlib.Path(path).read_text())]
