"""Index entries and the exact (full-scan) baseline index."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Entries are validated against this; unit vectors survive a float32
# round-trip well inside it.
NORM_TOLERANCE = 1e-4


@dataclass
class IndexEntry:
    sku: str
    vector: np.ndarray


def validate_entries(entries: Sequence[IndexEntry]) -> tuple[list[str], np.ndarray]:
    """Check uniqueness and unit norms; return (skus, float32 matrix)."""
    if not entries:
        raise ValueError("index needs at least one entry")
    seen: set[str] = set()
    for entry in entries:
        if not entry.sku:
            raise ValueError("index entry sku must be nonempty")
        if entry.sku in seen:
            raise ValueError(f"duplicate sku {entry.sku!r} in index entries")
        seen.add(entry.sku)
    matrix = np.ascontiguousarray([e.vector for e in entries], dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError("index vectors must share one dimension")
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)[0]
    if bad.size:
        raise ValueError(
            f"entry {entries[int(bad[0])].sku!r} is not unit norm (|v| = {norms[int(bad[0])]:.6f})"
        )
    return [e.sku for e in entries], matrix


def _validate_query(query: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise ValueError(f"query has dim {q.shape[0]}, index has dim {dim}")
    if abs(float(np.linalg.norm(q)) - 1.0) > NORM_TOLERANCE:
        raise ValueError("query vector must be unit norm")
    return q.astype(np.float32)


class ExactIndex:
    """Brute-force cosine search; the correctness oracle for the ANN index.

    Entries are stored sorted by sku so a stable sort on descending score
    yields the documented (score desc, sku asc) result order.
    """

    def __init__(self, skus: list[str], matrix: np.ndarray):
        order = sorted(range(len(skus)), key=lambda i: skus[i])
        self.skus = [skus[i] for i in order]
        self.matrix = np.ascontiguousarray(matrix[order])

    def __len__(self) -> int:
        return len(self.skus)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _validate_query(query, self.dim)
        scores = self.matrix @ q
        order = np.argsort(-scores, kind="stable")[:k]
        return [(self.skus[int(i)], float(scores[int(i)])) for i in order]


def build_exact(entries: Sequence[IndexEntry]) -> ExactIndex:
    skus, matrix = validate_entries(entries)
    return ExactIndex(skus, matrix)
