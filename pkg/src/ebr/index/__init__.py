"""Vector indexes over product embeddings: exact full scan and HNSW."""

from __future__ import annotations

from typing import Iterable

from ..corpus import ProductRecord
from ..encoder import EncoderCheckpoint, embed_product
from .hnsw import HnswIndex, HnswParams, build_hnsw, kernel_backend
from .io import IndexFileError, load_index, save_index
from .vectors import ExactIndex, IndexEntry, build_exact

__all__ = [
    "ExactIndex",
    "HnswIndex",
    "HnswParams",
    "IndexEntry",
    "IndexFileError",
    "build_exact",
    "build_hnsw",
    "embed_catalog",
    "kernel_backend",
    "load_index",
    "save_index",
]


def embed_catalog(ckpt: EncoderCheckpoint, products: Iterable[ProductRecord]) -> list[IndexEntry]:
    """Product-tower embeddings for every catalog product, as index entries."""
    return [IndexEntry(sku=p.sku, vector=embed_product(ckpt, p)) for p in products]
