"""Contrastive training of the two-tower encoder, and checkpoint merging.

The loss is a scaled multi-class cross entropy over in-batch negatives: for
a batch of B positive pairs, logits[i][j] = s * (left_i . right_j) and item
i's target class is j = i, so every other right-side vector in the batch
serves as a negative. Gradients are exact analytic derivatives chained
through dot product, unit normalization, the tanh projection, mean pooling,
and the embedding lookup; everything accumulates in float64 and checkpoints
store float32.

Staged finetuning composes: training a "q2q" checkpoint further on the q2p
objective yields model_id "q2q_q2p". Finetuned checkpoints sharing one
ancestor can be merged by weighted-averaging their tensors.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ProductRecord, normalize_query
from .curation import TrainingPair
from .encoder import (
    EncoderCheckpoint,
    EncoderConfig,
    fnv1a_64,
    load_checkpoint,
    tokenize,
    tower_tensor_names,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_STAGE_CHAIN = re.compile(r"^(q2q|q2p)(_(q2q|q2p))*$")


@dataclass
class TrainingConfig:
    batch_size: int = 32
    scale: float = 20.0
    learning_rate: float = 0.05
    epochs: int = 5
    optimizer: str = "sgd"
    rng_seed: int = 0
    stage: str = "q2p"
    dedup_right_in_batch: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.stage not in ("q2q", "q2p"):
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class BatchLossReport:
    mean_loss: float
    per_item_losses: np.ndarray


@dataclass
class EpochStats:
    stage: str
    epoch: int
    mean_loss: float
    pairs: int

    def to_json_dict(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "mean_loss": self.mean_loss, "pairs": self.pairs}


@dataclass
class MergeSpec:
    """Checkpoints to average and their weights (nonnegative, summing to 1)."""

    components: list[tuple[EncoderCheckpoint, float]]

    def __post_init__(self):
        if len(self.components) < 2:
            raise ValueError("merge needs at least 2 components")
        weights = [w for _, w in self.components]
        if any(w < 0 for w in weights):
            raise ValueError("merge weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"merge weights must sum to 1 (got {sum(weights)!r})")


# ---------------------------------------------------------------------------
# Forward pass with cached activations
# ---------------------------------------------------------------------------


@dataclass
class TextActivation:
    tower: str
    ids: list[int]
    v: np.ndarray  # mean token embedding
    h: np.ndarray  # tanh projection output
    hnorm: float
    u: np.ndarray  # unit output


@dataclass
class ProductActivation:
    fields: list[TextActivation]
    p: np.ndarray  # mean of field unit vectors
    pnorm: float
    u: np.ndarray


@dataclass
class BatchForward:
    """Unit output vectors for a batch, plus the activations needed by
    the backward pass (None when encoded without caching)."""

    left: np.ndarray  # [B, d]
    right: np.ndarray  # [B, d]
    left_acts: list[TextActivation] | None = None
    right_acts: list[TextActivation | ProductActivation] | None = None


def _as_float64(ckpt: EncoderCheckpoint) -> dict[str, np.ndarray]:
    return {name: t.astype(np.float64) for name, t in ckpt.tensors.items()}


def _encode_text(
    tensors: dict[str, np.ndarray],
    config: EncoderConfig,
    text: str,
    tower: str,
    ids: list[int] | None = None,
) -> TextActivation:
    names = tower_tensor_names(config)[tower]
    if ids is None:
        ids = tokenize(text, config) or [0]
    v = tensors[names["token_embedding"]][ids].mean(axis=0)
    h = np.tanh(tensors[names["proj_w"]] @ v + tensors[names["proj_b"]])
    hnorm = float(np.linalg.norm(h))
    if hnorm < 1e-30:
        h = np.ones_like(h)
        hnorm = float(np.linalg.norm(h))
    return TextActivation(tower=tower, ids=ids, v=v, h=h, hnorm=hnorm, u=h / hnorm)


def _encode_product(
    tensors: dict[str, np.ndarray],
    config: EncoderConfig,
    product: ProductRecord,
    token_cache: dict[str, list[int]] | None = None,
) -> ProductActivation:
    fields = []
    for name in config.product_fields:
        text = normalize_query(product.fields.get(name, ""))
        if not text:
            continue
        ids = None
        if token_cache is not None:
            ids = token_cache.get(text)
            if ids is None:
                ids = tokenize(text, config) or [0]
                token_cache[text] = ids
        fields.append(_encode_text(tensors, config, text, "product", ids=ids))
    if not fields:
        raise ValueError(f"product {product.sku!r} has none of the configured fields")
    p = np.mean([f.u for f in fields], axis=0)
    pnorm = float(np.linalg.norm(p))
    if pnorm < 1e-30:
        p = np.ones_like(p)
        pnorm = float(np.linalg.norm(p))
    return ProductActivation(fields=fields, p=p, pnorm=pnorm, u=p / pnorm)


def forward_batch(
    tensors: dict[str, np.ndarray],
    config: EncoderConfig,
    pairs: Sequence[TrainingPair],
    catalog: dict[str, ProductRecord] | None = None,
    token_cache: dict[str, list[int]] | None = None,
) -> BatchForward:
    """Encode a batch of pairs with cached activations.

    Left sides always use the query tower. q2q right sides use the query
    tower too; q2p right sides are full product encodings via ``catalog``.
    """
    left_acts: list[TextActivation] = []
    right_acts: list[TextActivation | ProductActivation] = []
    for pair in pairs:
        ids = token_cache.get(pair.left) if token_cache is not None else None
        if token_cache is not None and ids is None:
            ids = tokenize(pair.left, config) or [0]
            token_cache[pair.left] = ids
        left_acts.append(_encode_text(tensors, config, pair.left, "query", ids=ids))
        if pair.kind == "q2q":
            right_acts.append(_encode_text(tensors, config, pair.right, "query"))
        else:
            if catalog is None:
                raise ValueError("q2p pairs need a catalog for the product side")
            product = catalog.get(pair.right_sku or "")
            if product is None:
                raise KeyError(f"sku {pair.right_sku!r} not found in catalog")
            right_acts.append(_encode_product(tensors, config, product, token_cache=token_cache))
    return BatchForward(
        left=np.stack([a.u for a in left_acts]),
        right=np.stack([a.u for a in right_acts]),
        left_acts=left_acts,
        right_acts=right_acts,
    )


def encode_pairs(
    ckpt: EncoderCheckpoint,
    pairs: Sequence[TrainingPair],
    catalog: dict[str, ProductRecord] | None = None,
    cache: bool = True,
) -> BatchForward:
    """Checkpoint-level convenience wrapper around :func:`forward_batch`."""
    out = forward_batch(_as_float64(ckpt), ckpt.config, pairs, catalog)
    if not cache:
        out.left_acts = None
        out.right_acts = None
    return out


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def mccel_loss(left_vecs: np.ndarray, right_vecs: np.ndarray, s: float) -> BatchLossReport:
    """Scaled multi-class cross entropy with in-batch negatives.

    logits[i][j] = s * (left_i . right_j); item i's positive class is i.
    Stabilized by row-max subtraction before exponentiation.
    """
    left = np.asarray(left_vecs, dtype=np.float64)
    right = np.asarray(right_vecs, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError(f"left/right shapes differ: {left.shape} vs {right.shape}")
    if left.ndim != 2 or left.shape[0] < 1:
        raise ValueError("expected [B, d] batches with B >= 1")
    for name, batch in (("left", left), ("right", right)):
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError(f"{name} vectors must be unit norm (worst |norm-1| = {np.abs(norms - 1).max():.3g})")
    logits = s * (left @ right.T)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    per_item = log_z - np.diag(shifted)
    # -log p can come out at -0.0 for B=1; clamp the sign away
    per_item = np.maximum(per_item, 0.0)
    return BatchLossReport(mean_loss=float(per_item.mean()), per_item_losses=per_item)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _backprop_unit_norm(grad_u: np.ndarray, u: np.ndarray, norm: float) -> np.ndarray:
    return (grad_u - float(grad_u @ u) * u) / norm


def _backprop_text(
    act: TextActivation,
    grad_u: np.ndarray,
    tensors: dict[str, np.ndarray],
    config: EncoderConfig,
    grads: dict[str, np.ndarray],
) -> None:
    names = tower_tensor_names(config)[act.tower]
    grad_h = _backprop_unit_norm(grad_u, act.u, act.hnorm)
    grad_z = grad_h * (1.0 - act.h * act.h)
    grads[names["proj_w"]] += np.outer(grad_z, act.v)
    grads[names["proj_b"]] += grad_z
    grad_v = tensors[names["proj_w"]].T @ grad_z
    np.add.at(grads[names["token_embedding"]], act.ids, grad_v / len(act.ids))


def mccel_backward(
    batch: BatchForward,
    tensors: dict[str, np.ndarray],
    config: EncoderConfig,
    s: float,
) -> dict[str, np.ndarray]:
    """Exact gradients of the batch mean loss w.r.t. every encoder tensor."""
    if batch.left_acts is None or batch.right_acts is None:
        raise ValueError("batch was encoded without cached activations")
    b = batch.left.shape[0]
    logits = s * (batch.left @ batch.right.T)
    g = _softmax_rows(logits)
    g[np.arange(b), np.arange(b)] -= 1.0
    g /= b
    grad_left = s * (g @ batch.right)  # [B, d]
    grad_right = s * (g.T @ batch.left)

    grads = {name: np.zeros_like(t, dtype=np.float64) for name, t in tensors.items()}
    for i in range(b):
        _backprop_text(batch.left_acts[i], grad_left[i], tensors, config, grads)
        act = batch.right_acts[i]
        if isinstance(act, ProductActivation):
            grad_p = _backprop_unit_norm(grad_right[i], act.u, act.pnorm)
            per_field = grad_p / len(act.fields)
            for fact in act.fields:
                _backprop_text(fact, per_field, tensors, config, grads)
        else:
            _backprop_text(act, grad_right[i], tensors, config, grads)
    return grads


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


class _Adam:
    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            m_hat = m / (1 - ADAM_BETA1**self.t)
            v_hat = v / (1 - ADAM_BETA2**self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _make_optimizer(config: TrainingConfig):
    return _Adam(config.learning_rate) if config.optimizer == "adam" else _Sgd(config.learning_rate)


# ---------------------------------------------------------------------------
# Staged finetuning
# ---------------------------------------------------------------------------


def compose_model_id(init_id: str, stage: str) -> str:
    """"q2q" + q2p -> "q2q_q2p"; anything that is not a stage chain resets."""
    if init_id and _STAGE_CHAIN.match(init_id):
        return f"{init_id}_{stage}"
    return stage


def train_stage(
    dataset: Sequence[TrainingPair],
    init: EncoderCheckpoint,
    config: TrainingConfig,
    catalog: dict[str, ProductRecord] | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> EncoderCheckpoint:
    """Run one finetuning stage and return the updated checkpoint.

    Single-threaded and bit-reproducible for a fixed (dataset, init,
    config): epoch shuffles, batch slicing, and optimizer state all derive
    from config.rng_seed.
    """
    bad_kind = [p.kind for p in dataset if p.kind != config.stage]
    if bad_kind:
        raise ValueError(f"dataset contains {bad_kind[0]!r} pairs but stage is {config.stage!r}")
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset has {len(dataset)} pairs, need at least one batch of {config.batch_size}")
    if config.stage == "q2p":
        if catalog is None:
            raise ValueError("q2p training requires a catalog")
        for pair in dataset:
            if pair.right_sku not in catalog:
                raise KeyError(f"sku {pair.right_sku!r} not found in catalog")

    tensors = _as_float64(init)
    optimizer = _make_optimizer(config)
    rng = np.random.default_rng(config.rng_seed)
    token_cache: dict[str, list[int]] = {}

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        item_count = 0
        for start in range(0, len(order), config.batch_size):
            batch_pairs = [dataset[i] for i in order[start : start + config.batch_size]]
            if config.dedup_right_in_batch and config.stage == "q2p":
                seen_skus: set[str] = set()
                deduped = []
                for pair in batch_pairs:
                    if pair.right_sku in seen_skus:
                        continue
                    seen_skus.add(pair.right_sku or "")
                    deduped.append(pair)
                batch_pairs = deduped
            batch = forward_batch(tensors, init.config, batch_pairs, catalog, token_cache)
            report = mccel_loss(batch.left, batch.right, config.scale)
            if not np.isfinite(report.mean_loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(per-item: {report.per_item_losses!r})"
                )
            loss_sum += float(report.per_item_losses.sum())
            item_count += len(batch_pairs)
            if len(batch_pairs) >= 2:
                grads = mccel_backward(batch, tensors, init.config, config.scale)
                optimizer.step(tensors, grads)
        stats = EpochStats(
            stage=config.stage,
            epoch=epoch,
            mean_loss=loss_sum / max(item_count, 1),
            pairs=len(dataset),
        )
        if on_epoch is not None:
            on_epoch(stats)

    return EncoderCheckpoint(
        config=init.config,
        tensors={name: t.astype(np.float32) for name, t in tensors.items()},
        model_id=compose_model_id(init.model_id, config.stage),
    )


# ---------------------------------------------------------------------------
# Domain pretraining (skip-gram with negative sampling)
# ---------------------------------------------------------------------------


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def pretrain_embeddings(
    corpus_texts: Sequence[str],
    init: EncoderCheckpoint,
    config: TrainingConfig,
    window: int = 2,
    negatives: int = 5,
) -> EncoderCheckpoint:
    """Word-level skip-gram with negative sampling over catalog/query text.

    Only token-embedding tensors are updated (identically for both towers
    when they are separate); projection tensors are untouched. Negatives
    are drawn from the observed unigram distribution raised to 0.75.
    """
    if not corpus_texts:
        raise ValueError("pretraining corpus is empty")
    v = init.config.vocab_buckets
    word_id_seqs: list[list[int]] = []
    counts = np.zeros(v, dtype=np.float64)
    for text in corpus_texts:
        ids = [fnv1a_64(w.encode("utf-8")) % v for w in normalize_query(text).split()]
        if len(ids) >= 2:
            word_id_seqs.append(ids)
            for i in ids:
                counts[i] += 1
    if not word_id_seqs:
        raise ValueError("pretraining corpus has no multi-word texts")

    noise_cdf = np.cumsum(counts**0.75)
    noise_cdf /= noise_cdf[-1]

    table_names = sorted(
        {names["token_embedding"] for names in tower_tensor_names(init.config).values()}
    )
    emb = init.tensors[table_names[0]].astype(np.float64)
    rng = np.random.default_rng(config.rng_seed)
    lr = config.learning_rate

    for _ in range(config.epochs):
        order = rng.permutation(len(word_id_seqs))
        for seq_idx in order:
            ids = word_id_seqs[seq_idx]
            for i, center in enumerate(ids):
                lo = max(0, i - window)
                hi = min(len(ids), i + window + 1)
                for j in range(lo, hi):
                    if j == i:
                        continue
                    context = ids[j]
                    neg_ids = np.searchsorted(noise_cdf, rng.random(negatives))
                    c_vec = emb[center].copy()
                    g = lr * (1.0 - _sigmoid(float(c_vec @ emb[context])))
                    emb[center] += g * emb[context]
                    emb[context] += g * c_vec
                    for neg in neg_ids:
                        if neg == context:
                            continue
                        g = lr * _sigmoid(float(emb[center] @ emb[neg]))
                        n_vec = emb[neg].copy()
                        emb[neg] -= g * emb[center]
                        emb[center] -= g * n_vec

    out = init.copy()
    if config.epochs > 0:
        emb32 = emb.astype(np.float32)
        for name in table_names:
            out.tensors[name] = emb32.copy()
    return out


# ---------------------------------------------------------------------------
# Model-soup style checkpoint merging
# ---------------------------------------------------------------------------


def merge_checkpoints(spec: MergeSpec) -> EncoderCheckpoint:
    """Entrywise weighted sum of same-architecture checkpoints.

    Accumulates in float64 and stores float32; output model_id is "merged".
    """
    first, _ = spec.components[0]
    first_config = first.config.to_json_dict()
    shapes = {name: tuple(t.shape) for name, t in first.tensors.items()}
    for ckpt, _ in spec.components[1:]:
        if ckpt.config.to_json_dict() != first_config:
            raise ValueError("merge components have differing encoder configs")
        if set(ckpt.tensors) != set(shapes):
            missing = set(shapes) ^ set(ckpt.tensors)
            raise ValueError(f"merge components disagree on tensor set (mismatch: {sorted(missing)})")
        for name, shape in shapes.items():
            if tuple(ckpt.tensors[name].shape) != shape:
                raise ValueError(f"tensor {name!r} has mismatched shapes across components")

    merged: dict[str, np.ndarray] = {}
    for name in first.tensors:
        acc = np.zeros(shapes[name], dtype=np.float64)
        for ckpt, weight in spec.components:
            acc += weight * ckpt.tensors[name].astype(np.float64)
        merged[name] = acc.astype(np.float32)
    return EncoderCheckpoint(config=first.config, tensors=merged, model_id="merged")


def load_merge_spec(path: str | Path) -> MergeSpec:
    """Read a merge spec JSON file: {"components": [{"path", "weight"}, ...]}."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    base = Path(path).parent
    components = []
    for comp in obj["components"]:
        ckpt_path = Path(comp["path"])
        if not ckpt_path.is_absolute():
            ckpt_path = base / ckpt_path
        components.append((load_checkpoint(ckpt_path), float(comp["weight"])))
    return MergeSpec(components=components)
