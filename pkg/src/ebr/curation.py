"""Training-dataset construction.

Two-stage positive filtering (minimum distinct visitors, then per-category
stratified sampling), template-based synthetic query generation with an
import path for externally generated queries, query-to-product pair
assembly, and query-to-query co-conversion pairs.

Every sampling step derives its randomness from ``random.Random`` seeded
with a string of the form ``"<seed>|<group key>"``, so results are
deterministic for a fixed seed and independent of input ordering.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import (
    CorpusFileError,
    EngagementAggregate,
    ProductRecord,
    iter_jsonl,
    normalize_query,
)

PAIR_KINDS = ("q2p", "q2q")
PAIR_SOURCES = ("engagement", "synthetic")

# A generator yields candidate query strings for a product; the wrapper
# normalizes, deduplicates, and enforces the requested count.
SyntheticGenerator = Callable[[ProductRecord, int, int], Sequence[str]]


class DegenerateProductError(ValueError):
    """The generator could not produce enough distinct queries."""

    def __init__(self, sku: str, wanted: int, possible: int):
        super().__init__(
            f"product {sku!r}: only {possible} distinct synthetic queries possible, {wanted} requested"
        )
        self.possible = possible


@dataclass
class TrainingPair:
    """One positive pair. ``left`` is always a query; ``right`` is a query
    for q2q pairs and a product text rendering (the title) for q2p pairs,
    with the product resolvable through ``right_sku``."""

    left: str
    right: str
    kind: str
    source: str
    right_sku: str | None = None

    def __post_init__(self):
        if not self.left or not self.right:
            raise ValueError("training pair sides must be nonempty")
        if self.kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")
        if self.source not in PAIR_SOURCES:
            raise ValueError(f"unknown pair source {self.source!r}")
        if self.kind == "q2p" and not self.right_sku:
            raise ValueError("q2p pairs require right_sku")


@dataclass
class CurationConfig:
    min_unique_visitors: int = 2
    per_category_cap: int = 1000
    synthetic_queries_per_product: int = 10
    q2q_max_pairs_per_product: int = 400
    rng_seed: int = 0

    def __post_init__(self):
        if self.min_unique_visitors < 1:
            raise ValueError("min_unique_visitors must be >= 1")
        for name in ("per_category_cap", "synthetic_queries_per_product", "q2q_max_pairs_per_product"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def filter_min_visitors(
    aggs: Sequence[EngagementAggregate], threshold: int
) -> list[EngagementAggregate]:
    """Stage-1 filter: keep pairs engaged by at least ``threshold`` distinct
    visitors, preserving input order."""
    if threshold < 1:
        raise ValueError("visitor threshold must be >= 1")
    return [agg for agg in aggs if agg.unique_visitors >= threshold]


def stratified_sample(
    aggs: Sequence[EngagementAggregate],
    catalog: dict[str, ProductRecord],
    cap: int,
    seed: int,
) -> list[EngagementAggregate]:
    """Stage-2 filter: cap each top-level product category at ``cap`` pairs.

    Pairs are grouped by the first segment of the product's "category"
    field (products without one fall into the "" group); each group keeps
    min(cap, group size) pairs sampled uniformly without replacement.
    Output preserves the original input order of the kept pairs.
    """
    if cap < 1:
        raise ValueError("per-category cap must be >= 1")
    groups: dict[str, list[int]] = {}
    for i, agg in enumerate(aggs):
        product = catalog.get(agg.sku)
        if product is None:
            raise KeyError(f"sku {agg.sku!r} not found in catalog")
        groups.setdefault(product.top_category(), []).append(i)
    keep: set[int] = set()
    for category, indices in groups.items():
        if len(indices) <= cap:
            keep.update(indices)
        else:
            rng = random.Random(f"{seed}|{category}")
            keep.update(rng.sample(indices, cap))
    return [aggs[i] for i in sorted(keep)]


class TemplateQueryGenerator:
    """Deterministic stand-in for an LLM query generator.

    Derives candidate queries from the product's own text: the full title,
    the title minus its leading brand token, the last category segment,
    brand + category, spec value + category, then seeded token-dropout
    variants of the title until enough distinct candidates exist.
    """

    def __init__(self, max_attempts_per_query: int = 60):
        self.max_attempts_per_query = max_attempts_per_query

    def __call__(self, product: ProductRecord, n: int, seed: int) -> list[str]:
        title = normalize_query(product.title)
        tokens = title.split()
        category = product.fields.get("category", "")
        last_segment = normalize_query(category.split(">")[-1]) if category else ""
        brand = tokens[0] if tokens else ""

        candidates = [title]
        if len(tokens) > 1:
            candidates.append(" ".join(tokens[1:]))
        if last_segment:
            candidates.append(last_segment)
            if brand:
                candidates.append(f"{brand} {last_segment}")
            for name, value in product.fields.items():
                if name.startswith("spec:") and value.strip():
                    candidates.append(f"{normalize_query(value)} {last_segment}")

        rng = random.Random(f"{seed}|{product.sku}")
        seen = {normalize_query(c) for c in candidates}
        attempts = self.max_attempts_per_query * n
        while len(seen) < n and attempts > 0 and len(tokens) > 1:
            attempts -= 1
            size = rng.randint(1, len(tokens) - 1)
            picked = sorted(rng.sample(range(len(tokens)), size))
            variant = " ".join(tokens[i] for i in picked)
            candidates.append(variant)
            seen.add(variant)
        return candidates


def generate_synthetic_queries(
    product: ProductRecord,
    n: int,
    generator: SyntheticGenerator | None = None,
    seed: int = 0,
) -> list[str]:
    """Produce exactly ``n`` distinct normalized queries for a product."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not product.title.strip():
        raise ValueError(f"product {product.sku!r} has no title")
    generator = generator or TemplateQueryGenerator()
    out: list[str] = []
    seen: set[str] = set()
    for candidate in generator(product, n, seed):
        query = normalize_query(candidate)
        if query and query not in seen:
            seen.add(query)
            out.append(query)
        if len(out) == n:
            return out
    raise DegenerateProductError(product.sku, wanted=n, possible=len(out))


def import_synthetic_queries(
    path: str | Path, catalog: dict[str, ProductRecord]
) -> list[TrainingPair]:
    """Read externally generated {"sku", "query"} JSONL rows as q2p pairs."""
    pairs: list[TrainingPair] = []
    for lineno, obj in iter_jsonl(path):
        try:
            sku = str(obj["sku"])
            query = normalize_query(str(obj["query"]))
        except KeyError as exc:
            raise CorpusFileError(f"{path}: line {lineno} missing key {exc}") from exc
        product = catalog.get(sku)
        if product is None:
            raise CorpusFileError(f"{path}: line {lineno}: unknown sku {sku!r}")
        if not query:
            raise CorpusFileError(f"{path}: line {lineno}: query is empty after normalization")
        pairs.append(
            TrainingPair(left=query, right=product.title, kind="q2p", source="synthetic", right_sku=sku)
        )
    return pairs


def build_q2p_dataset(
    positives: Sequence[EngagementAggregate],
    synthetics: Sequence[TrainingPair],
    catalog: dict[str, ProductRecord],
) -> list[TrainingPair]:
    """Combine engagement positives with synthetic pairs.

    Exact duplicate (query, sku) pairs are deduplicated with the
    engagement-sourced pair winning.
    """
    if any(p.kind != "q2p" for p in synthetics):
        raise ValueError("synthetic pairs must all be q2p")
    pairs: list[TrainingPair] = []
    seen: set[tuple[str, str]] = set()
    for agg in positives:
        product = catalog.get(agg.sku)
        if product is None:
            raise KeyError(f"sku {agg.sku!r} not found in catalog")
        key = (agg.query, agg.sku)
        if key in seen:
            continue
        seen.add(key)
        pairs.append(
            TrainingPair(
                left=agg.query, right=product.title, kind="q2p", source="engagement", right_sku=agg.sku
            )
        )
    for pair in synthetics:
        key = (pair.left, pair.right_sku or "")
        if key in seen:
            continue
        seen.add(key)
        pairs.append(pair)
    return pairs


def build_q2q_dataset(
    positives: Sequence[EngagementAggregate],
    max_pairs_per_product: int,
    seed: int,
) -> list[TrainingPair]:
    """Co-conversion query pairs: for each product, all unordered 2-subsets
    of its converting queries, capped per product by seeded uniform sampling
    without replacement. Pairs are canonically ordered (lexicographic) and
    deduplicated globally."""
    if max_pairs_per_product < 1:
        raise ValueError("max_pairs_per_product must be >= 1")
    queries_by_sku: dict[str, set[str]] = {}
    for agg in positives:
        if agg.query:
            queries_by_sku.setdefault(agg.sku, set()).add(agg.query)

    pairs: list[TrainingPair] = []
    seen: set[tuple[str, str]] = set()
    for sku in sorted(queries_by_sku):
        queries = sorted(queries_by_sku[sku])
        if len(queries) < 2:
            continue
        candidates = list(combinations(queries, 2))
        if len(candidates) > max_pairs_per_product:
            rng = random.Random(f"{seed}|{sku}")
            candidates = rng.sample(candidates, max_pairs_per_product)
        for a, b in candidates:
            if (a, b) in seen:
                continue
            seen.add((a, b))
            pairs.append(TrainingPair(left=a, right=b, kind="q2q", source="engagement"))
    return pairs


def save_pairs(pairs: Iterable[TrainingPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            obj = {"left": pair.left, "right": pair.right, "kind": pair.kind, "source": pair.source}
            if pair.right_sku is not None:
                obj["right_sku"] = pair.right_sku
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_pairs(path: str | Path) -> list[TrainingPair]:
    pairs = []
    for lineno, obj in iter_jsonl(path):
        try:
            pairs.append(
                TrainingPair(
                    left=str(obj["left"]),
                    right=str(obj["right"]),
                    kind=str(obj["kind"]),
                    source=str(obj["source"]),
                    right_sku=str(obj["right_sku"]) if obj.get("right_sku") is not None else None,
                )
            )
        except (KeyError, ValueError) as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
    return pairs
