"""Desk-scale Siamese text encoder and its checkpoint format.

The feature encoder is a hashed embedding bag: every word unigram and every
character n-gram of each "#"-padded word is hashed (FNV-1a, 64-bit) into one
of V buckets, the bucket embeddings are mean-pooled, passed through a single
tanh projection, and unit-normalized. The product tower embeds each
configured product field with the same feature encoder and mean-pools the
field vectors (fusion), renormalizing the result.

Checkpoints are stored in a bit-exact little-endian binary format (magic
"EBRC", version 1) so that save/load round-trips are identities and merged
models can be compared entry-by-entry.

FNV-1a (64-bit), applied to the token's UTF-8 bytes:

    h = 14695981039346656037
    for byte in data:  h = ((h XOR byte) * 1099511628211) mod 2**64

Token ids are ``h mod vocab_buckets``. Bucket 0 doubles as the reserved
fallback token for empty text, keeping the towers total at serving time.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ProductRecord, normalize_query

MAGIC = b"EBRC"
VERSION = 1

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_U64_MASK = (1 << 64) - 1


class CheckpointError(ValueError):
    """Base class for checkpoint validation and IO failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated data, or otherwise unparseable bytes."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this code."""


class CheckpointShapeError(CheckpointError):
    """Tensor names/shapes inconsistent with the embedded config."""


class CheckpointDataError(CheckpointError):
    """Tensor values are not all finite."""


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64_MASK
    return h


@dataclass
class EncoderConfig:
    vocab_buckets: int = 2**16
    embedding_dim: int = 64
    ngram_orders: tuple[int, ...] = (3,)
    product_fields: tuple[str, ...] = ("title", "category", "description")
    shared_towers: bool = True

    def __post_init__(self):
        self.ngram_orders = tuple(sorted(set(int(n) for n in self.ngram_orders)))
        self.product_fields = tuple(self.product_fields)
        if self.vocab_buckets < 2:
            raise ValueError("vocab_buckets must be >= 2")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if any(n < 2 for n in self.ngram_orders):
            raise ValueError("ngram orders must be >= 2")
        if not self.product_fields:
            raise ValueError("product_fields must be nonempty")

    def to_json_dict(self) -> dict:
        return {
            "vocab_buckets": self.vocab_buckets,
            "embedding_dim": self.embedding_dim,
            "ngram_orders": list(self.ngram_orders),
            "product_fields": list(self.product_fields),
            "shared_towers": self.shared_towers,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(
            vocab_buckets=int(obj["vocab_buckets"]),
            embedding_dim=int(obj["embedding_dim"]),
            ngram_orders=tuple(obj["ngram_orders"]),
            product_fields=tuple(obj["product_fields"]),
            shared_towers=bool(obj["shared_towers"]),
        )


def tokenize(text: str, config: EncoderConfig) -> list[int]:
    """Hash a normalized text into token ids in [0, vocab_buckets).

    Emits, per whitespace-separated word: the word itself, then every
    character n-gram of the "#"-padded word for each configured order.
    Empty text yields an empty list.
    """
    v = config.vocab_buckets
    ids: list[int] = []
    for word in text.split():
        ids.append(fnv1a_64(word.encode("utf-8")) % v)
        padded = f"#{word}#"
        for n in config.ngram_orders:
            for i in range(len(padded) - n + 1):
                ids.append(fnv1a_64(padded[i : i + n].encode("utf-8")) % v)
    return ids


def tower_tensor_names(config: EncoderConfig) -> dict[str, dict[str, str]]:
    """Map tower -> role -> tensor name for this config."""
    if config.shared_towers:
        shared = {"token_embedding": "token_embedding", "proj_w": "proj_w", "proj_b": "proj_b"}
        return {"query": shared, "product": shared}
    return {
        "query": {
            "token_embedding": "qtower_token_embedding",
            "proj_w": "qtower_proj_w",
            "proj_b": "qtower_proj_b",
        },
        "product": {
            "token_embedding": "ptower_token_embedding",
            "proj_w": "ptower_proj_w",
            "proj_b": "ptower_proj_b",
        },
    }


def expected_tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    v, d = config.vocab_buckets, config.embedding_dim
    shapes: dict[str, tuple[int, ...]] = {}
    towers = tower_tensor_names(config)
    for names in towers.values():
        shapes[names["token_embedding"]] = (v, d)
        shapes[names["proj_w"]] = (d, d)
        shapes[names["proj_b"]] = (d,)
    return shapes


@dataclass
class EncoderCheckpoint:
    """Named parameter tensors plus encoder configuration.

    Tensors are float32 in memory, matching the serialized format; numeric
    work upcasts to float64 and writes back float32.
    """

    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    model_id: str = "init"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        expected = expected_tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            raise CheckpointShapeError(
                f"tensor names {sorted(self.tensors)} != expected {sorted(expected)}"
            )
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise CheckpointShapeError(f"tensor {name!r} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise CheckpointDataError(f"tensor {name!r} contains non-finite values")

    def copy(self, model_id: str | None = None) -> "EncoderCheckpoint":
        return EncoderCheckpoint(
            config=self.config,
            tensors={name: t.copy() for name, t in self.tensors.items()},
            model_id=self.model_id if model_id is None else model_id,
        )


def init_checkpoint(config: EncoderConfig, seed: int = 0, model_id: str = "init") -> EncoderCheckpoint:
    """Random initial checkpoint (the stand-in for the pretrained base)."""
    rng = np.random.default_rng(seed)
    d = config.embedding_dim
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_tensor_shapes(config).items():
        if name.endswith("token_embedding"):
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape).astype(np.float32)
        elif name.endswith("proj_w"):
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return EncoderCheckpoint(config=config, tensors=tensors, model_id=model_id)


def _normalize_vector(h: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(h))
    if norm < 1e-30:
        # Degenerate activation; fall back to a fixed unit vector so the
        # tower stays total.
        h = np.ones_like(h)
        norm = float(np.linalg.norm(h))
    return h / norm


def embed_text(ckpt: EncoderCheckpoint, text: str, tower: str = "query") -> np.ndarray:
    """Embed one normalized text: mean token embedding -> tanh projection ->
    unit normalization. Empty token lists use reserved bucket 0."""
    names = tower_tensor_names(ckpt.config)[tower]
    emb = ckpt.tensors[names["token_embedding"]]
    w = ckpt.tensors[names["proj_w"]].astype(np.float64)
    b = ckpt.tensors[names["proj_b"]].astype(np.float64)
    ids = tokenize(text, ckpt.config) or [0]
    v = emb[ids].astype(np.float64).mean(axis=0)
    h = np.tanh(w @ v + b)
    return _normalize_vector(h)


def embed_product(ckpt: EncoderCheckpoint, product: ProductRecord) -> np.ndarray:
    """Mean-pool the per-field embeddings of the configured product fields
    (normalized, missing/empty fields skipped) and renormalize."""
    vectors = []
    for name in ckpt.config.product_fields:
        value = product.fields.get(name, "")
        text = normalize_query(value)
        if text:
            vectors.append(embed_text(ckpt, text, tower="product"))
    if not vectors:
        raise ValueError(f"product {product.sku!r} has none of the configured fields {ckpt.config.product_fields}")
    pooled = np.mean(vectors, axis=0)
    return _normalize_vector(pooled)


def _config_json_bytes(ckpt: EncoderCheckpoint) -> bytes:
    obj = ckpt.config.to_json_dict()
    obj["model_id"] = ckpt.model_id
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: EncoderCheckpoint, path: str | Path) -> None:
    ckpt.validate()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    config_bytes = _config_json_bytes(ckpt)
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        tensor = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(tensor.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> EncoderCheckpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config_obj = json.loads(_read_exact(fh, config_len, "config").decode("utf-8"))
            config = EncoderConfig.from_json_dict(config_obj)
        except (ValueError, KeyError) as exc:
            raise CheckpointFormatError(f"{path}: bad config block: {exc}") from exc
        model_id = str(config_obj.get("model_id", ""))
        (tensor_count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(tensor_count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dim of {name}"))[0] for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, count * 4, f"data of {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointFormatError(f"{path}: trailing bytes after last tensor")
    return EncoderCheckpoint(config=config, tensors=tensors, model_id=model_id)
