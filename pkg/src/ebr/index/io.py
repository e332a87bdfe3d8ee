"""Binary persistence for both index kinds.

Layout (all integers little-endian): magic "EBRI", u32 version, u32 dim,
u32 entry count, then per entry a u16-length-prefixed sku and dim float32
values. A u32 level count follows: 0 means an exact index and ends the
file; otherwise the HNSW block holds a u32-length-prefixed params JSON,
the u32 entry-point id, one u8 level per node, and per level the neighbor
lists (u32 count + count u32 ids) of every node present at that level in
ascending id order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .hnsw import HnswIndex, HnswParams, _max_degree
from .vectors import ExactIndex

MAGIC = b"EBRI"
VERSION = 1


class IndexFileError(ValueError):
    """Unreadable or internally inconsistent index file."""


def save_index(index: ExactIndex | HnswIndex, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    n, dim = index.matrix.shape
    buf.write(struct.pack("<II", dim, n))
    for i in range(n):
        sku_bytes = index.skus[i].encode("utf-8")
        buf.write(struct.pack("<H", len(sku_bytes)))
        buf.write(sku_bytes)
        buf.write(np.ascontiguousarray(index.matrix[i], dtype="<f4").tobytes())
    if isinstance(index, ExactIndex):
        buf.write(struct.pack("<I", 0))
    else:
        buf.write(struct.pack("<I", index.max_level + 1))
        params_bytes = json.dumps(index.params.to_json_dict(), sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(params_bytes)))
        buf.write(params_bytes)
        buf.write(struct.pack("<I", index.entry_point))
        buf.write(np.ascontiguousarray(index.levels, dtype=np.uint8).tobytes())
        for level in range(index.max_level + 1):
            for node in range(n):
                if index.levels[node] < level:
                    continue
                count = int(index.counts[level][node])
                buf.write(struct.pack("<I", count))
                buf.write(
                    np.ascontiguousarray(index.neighbors[level][node, :count], dtype="<u4").tobytes()
                )
    Path(path).write_bytes(buf.getvalue())


def _read(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IndexFileError(f"truncated index file while reading {what}")
    return data


def load_index(path: str | Path, kernels=None) -> ExactIndex | HnswIndex:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise IndexFileError(f"{path}: not an index file (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise IndexFileError(f"{path}: unsupported index version {version}")
        dim, n = struct.unpack("<II", _read(fh, 8, "dims"))
        skus: list[str] = []
        matrix = np.empty((n, dim), dtype=np.float32)
        for i in range(n):
            (sku_len,) = struct.unpack("<H", _read(fh, 2, "sku length"))
            skus.append(_read(fh, sku_len, "sku").decode("utf-8"))
            matrix[i] = np.frombuffer(_read(fh, dim * 4, "vector"), dtype="<f4")
        (level_count,) = struct.unpack("<I", _read(fh, 4, "level count"))
        if level_count == 0:
            return ExactIndex(skus, matrix)
        (params_len,) = struct.unpack("<I", _read(fh, 4, "params length"))
        try:
            params = HnswParams(**json.loads(_read(fh, params_len, "params").decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise IndexFileError(f"{path}: bad params block: {exc}") from exc
        (entry_point,) = struct.unpack("<I", _read(fh, 4, "entry point"))
        levels = np.frombuffer(_read(fh, n, "levels"), dtype=np.uint8).astype(np.int32)
        neighbors: list[np.ndarray] = []
        counts: list[np.ndarray] = []
        for level in range(level_count):
            degree = _max_degree(level, params.m)
            adj = np.full((n, degree), -1, dtype=np.int32)
            cnt = np.zeros(n, dtype=np.int32)
            for node in range(n):
                if levels[node] < level:
                    continue
                (count,) = struct.unpack("<I", _read(fh, 4, "neighbor count"))
                if count > degree:
                    raise IndexFileError(f"{path}: node {node} level {level} exceeds max degree")
                ids = np.frombuffer(_read(fh, count * 4, "neighbor ids"), dtype="<u4")
                adj[node, :count] = ids.astype(np.int32)
                cnt[node] = count
            neighbors.append(adj)
            counts.append(cnt)
        if fh.read(1):
            raise IndexFileError(f"{path}: trailing bytes")
    return HnswIndex(skus, matrix, params, levels, neighbors, counts, int(entry_point), kernels)
