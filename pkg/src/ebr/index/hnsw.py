"""HNSW approximate nearest neighbor index under cosine similarity.

The graph lives in flat numpy arrays (one adjacency matrix and one degree
array per level) so the traversal kernels can run either as compiled Cython
(ebr.index._kernels) or pure Python (ebr.index._kernels_py). The compiled
backend is picked at import when present; set EBR_PURE_KERNELS=1 to force
the fallback. Builds are deterministic for a fixed (entries, params) and
backend: all level draws come from the seeded generator.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vectors import IndexEntry, _validate_query, validate_entries


def _load_kernels():
    if not os.environ.get("EBR_PURE_KERNELS"):
        try:
            from . import _kernels

            return _kernels
        except ImportError:
            pass
    from . import _kernels_py

    return _kernels_py


KERNELS = _load_kernels()


def kernel_backend() -> str:
    """Name of the kernel backend selected at import ("compiled" or "python")."""
    return KERNELS.BACKEND


@dataclass
class HnswParams:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.ef_construction < self.m:
            raise ValueError("ef_construction must be >= m")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "ef_construction": self.ef_construction,
            "ef_search": self.ef_search,
            "rng_seed": self.rng_seed,
        }


class HnswIndex:
    """Immutable multi-layer graph over unit vectors.

    ``neighbors[l]`` is an int32 [n, max_degree(l)] adjacency matrix padded
    with -1 and ``counts[l]`` the per-node degrees; nodes appear at every
    level up to their drawn level. Layer 0 allows 2*m neighbors, upper
    layers m.
    """

    def __init__(
        self,
        skus: list[str],
        matrix: np.ndarray,
        params: HnswParams,
        levels: np.ndarray,
        neighbors: list[np.ndarray],
        counts: list[np.ndarray],
        entry_point: int,
        kernels=None,
    ):
        self.skus = skus
        self.matrix = matrix
        self.params = params
        self.levels = levels
        self.neighbors = neighbors
        self.counts = counts
        self.entry_point = entry_point
        self.kernels = kernels or KERNELS

    def __len__(self) -> int:
        return len(self.skus)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def max_level(self) -> int:
        return len(self.neighbors) - 1

    def search(self, query: np.ndarray, k: int, ef_search: int | None = None) -> list[tuple[str, float]]:
        """Approximate top-k by cosine score, (score desc, sku asc) order."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _validate_query(query, self.dim)
        entries = np.array([self.entry_point], dtype=np.int32)
        for level in range(self.max_level, 0, -1):
            ids, _ = self.kernels.search_layer(
                self.matrix, self.neighbors[level], self.counts[level], q, entries, 1
            )
            entries = ids
        ef = max(ef_search if ef_search is not None else self.params.ef_search, k)
        ids, dists = self.kernels.search_layer(
            self.matrix, self.neighbors[0], self.counts[0], q, entries, ef
        )
        ranked = sorted(
            zip(ids.tolist(), (-dists).tolist()),
            key=lambda pair: (-pair[1], self.skus[pair[0]]),
        )
        return [(self.skus[i], float(score)) for i, score in ranked[:k]]


def _max_degree(level: int, m: int) -> int:
    return 2 * m if level == 0 else m


def build_hnsw(entries: Sequence[IndexEntry], params: HnswParams, kernels=None) -> HnswIndex:
    """Insert entries one by one; the classic descend-then-link construction."""
    kernels = kernels or KERNELS
    skus, matrix = validate_entries(entries)
    n = len(skus)
    rng = np.random.default_rng(params.rng_seed)
    # P(level >= l) = (1/m)^l, drawn up front for determinism
    ml = 1.0 / math.log(params.m)
    levels = np.floor(-np.log(1.0 - rng.random(n)) * ml).astype(np.int32)

    neighbors: list[np.ndarray] = []
    counts: list[np.ndarray] = []

    def ensure_level(level: int) -> None:
        while len(neighbors) <= level:
            degree = _max_degree(len(neighbors), params.m)
            neighbors.append(np.full((n, degree), -1, dtype=np.int32))
            counts.append(np.zeros(n, dtype=np.int32))

    ensure_level(int(levels[0]))
    entry_point = 0
    max_level = int(levels[0])

    for node in range(1, n):
        level = int(levels[node])
        ensure_level(level)
        query = matrix[node]
        eps = np.array([entry_point], dtype=np.int32)
        for lc in range(max_level, level, -1):
            ids, _ = kernels.search_layer(matrix, neighbors[lc], counts[lc], query, eps, 1)
            eps = ids
        for lc in range(min(level, max_level), -1, -1):
            ids, dists = kernels.search_layer(
                matrix, neighbors[lc], counts[lc], query, eps, params.ef_construction
            )
            degree = _max_degree(lc, params.m)
            selected = kernels.select_neighbors(matrix, ids, dists, degree)
            count = len(selected)
            neighbors[lc][node, :count] = selected
            counts[lc][node] = count
            for nb in selected.tolist():
                nb_count = int(counts[lc][nb])
                if nb_count < degree:
                    neighbors[lc][nb, nb_count] = node
                    counts[lc][nb] = nb_count + 1
                else:
                    cand = np.append(neighbors[lc][nb, :nb_count], np.int32(node)).astype(np.int32)
                    cand_d = -(matrix[cand] @ matrix[nb]).astype(np.float64)
                    order = np.lexsort((cand, cand_d))
                    keep = kernels.select_neighbors(matrix, cand[order], cand_d[order], degree)
                    neighbors[lc][nb, : len(keep)] = keep
                    neighbors[lc][nb, len(keep) :] = -1
                    counts[lc][nb] = len(keep)
            eps = ids
        if level > max_level:
            entry_point = node
            max_level = level

    return HnswIndex(skus, matrix, params, levels, neighbors, counts, entry_point, kernels)
