"""Pure-Python HNSW traversal kernels (fallback backend).

Semantics match the compiled kernels in _kernels.pyx: distances are
negated dot products of float32 vectors, candidate ordering breaks ties by
ascending node id, and best-list admission is strict (a candidate must beat
the current worst retained distance).
"""

from __future__ import annotations

import heapq

import numpy as np

BACKEND = "python"


def search_layer(
    vectors: np.ndarray,  # float32 [n, d]
    neigh: np.ndarray,  # int32 [n, m_level]
    counts: np.ndarray,  # int32 [n]
    query: np.ndarray,  # float32 [d]
    entry_ids: np.ndarray,  # int32
    ef: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Best-first search of one graph layer from the given entry points.

    Returns up to ``ef`` (ids, distances) sorted by (distance, id).
    """
    visited = np.zeros(vectors.shape[0], dtype=bool)
    candidates: list[tuple[float, int]] = []  # min-heap
    best: list[tuple[float, int]] = []  # max-heap via negated distance
    for eid in entry_ids:
        eid = int(eid)
        if visited[eid]:
            continue
        visited[eid] = True
        d = -float(vectors[eid] @ query)
        heapq.heappush(candidates, (d, eid))
        heapq.heappush(best, (-d, eid))
    while len(best) > ef:
        heapq.heappop(best)

    while candidates:
        d, current = heapq.heappop(candidates)
        if len(best) >= ef and d > -best[0][0]:
            break
        row = neigh[current, : counts[current]]
        fresh = row[~visited[row]]
        if fresh.size == 0:
            continue
        visited[fresh] = True
        dists = -(vectors[fresh] @ query)
        for nid, nd in zip(fresh.tolist(), dists.tolist()):
            if len(best) < ef:
                heapq.heappush(candidates, (nd, nid))
                heapq.heappush(best, (-nd, nid))
            elif nd < -best[0][0]:
                heapq.heappush(candidates, (nd, nid))
                heapq.heapreplace(best, (-nd, nid))

    ordered = sorted((-nd, nid) for nd, nid in best)
    ids = np.array([nid for _, nid in ordered], dtype=np.int32)
    out_dists = np.array([nd for nd, _ in ordered], dtype=np.float64)
    return ids, out_dists


def select_neighbors(
    vectors: np.ndarray,
    ids: np.ndarray,
    dists: np.ndarray,
    m: int,
) -> np.ndarray:
    """Diversity-aware neighbor selection over (distance, id)-sorted
    candidates: keep a candidate only when it is closer to the query than
    to every already-kept neighbor, then fill leftover slots from the
    discarded list in distance order."""
    if len(ids) <= m:
        return np.asarray(ids, dtype=np.int32)
    selected: list[int] = []
    discarded: list[int] = []
    for e, de in zip(ids.tolist(), dists.tolist()):
        if len(selected) == m:
            break
        if not selected:
            selected.append(e)
            continue
        to_selected = -(vectors[selected] @ vectors[e])
        if de < float(to_selected.min()):
            selected.append(e)
        else:
            discarded.append(e)
    for e in discarded:
        if len(selected) == m:
            break
        selected.append(e)
    return np.asarray(selected, dtype=np.int32)
