"""Evaluation-set curation and recall@K scoring.

Queries are sampled from search history with weight ln(1 + count); per
query, candidate products are pooled from multiple retrieval runs and
sampled with weight 1 / mean rank across the sources that returned them.
Annotators grade pairs on a 4-level scale and recall@K counts grades at or
above a configurable threshold as relevant.

Weighted sampling without replacement uses exponential keys
(key = -ln(u) / w, keep the n smallest); u is drawn from a per-item
generator seeded by "<seed>|<item>", so samples are deterministic and
independent of input ordering.
"""

from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import CorpusFileError, ProductRecord, QueryHistory, iter_jsonl
from .encoder import EncoderCheckpoint, embed_text
from .index import ExactIndex, HnswIndex


class Grade(enum.IntEnum):
    IRRELEVANT = 0
    ACCEPTABLE = 1
    GOOD = 2
    EXCELLENT = 3

    @classmethod
    def parse(cls, name: str) -> "Grade":
        try:
            return _GRADE_BY_NAME[name]
        except KeyError:
            raise ValueError(f"unknown grade {name!r} (expected one of {list(_GRADE_BY_NAME)})") from None

    @property
    def label(self) -> str:
        return self.name.capitalize()


_GRADE_BY_NAME = {g.name.capitalize(): g for g in Grade}


@dataclass
class RetrievalRun:
    source_id: str
    results: dict[str, list[str]]

    def __post_init__(self):
        for query, skus in self.results.items():
            if len(set(skus)) != len(skus):
                raise ValueError(f"run {self.source_id!r} has duplicate skus for query {query!r}")


@dataclass
class PooledCandidate:
    query: str
    sku: str
    ranks: dict[str, int]
    mean_rank: float


@dataclass
class JudgedPair:
    query: str
    sku: str
    grade: Grade
    annotator_id: str
    ts: int


@dataclass
class EvalConfig:
    n_queries: int = 200
    products_per_query: int = 10
    relevance_threshold: Grade = Grade.GOOD
    impute_missing_rank: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1 or self.products_per_query < 1:
            raise ValueError("n_queries and products_per_query must be >= 1")


@dataclass
class RecallReport:
    k: int
    threshold: Grade
    per_query: dict[str, float]
    macro_average: float
    skipped_queries: int


# ---------------------------------------------------------------------------
# Weighted sampling
# ---------------------------------------------------------------------------


def weighted_sample_without_replacement(
    weighted: Sequence[tuple[str, float]], n: int, seed: int
) -> list[str]:
    """Keep the n items with the smallest exponential keys -ln(u)/w."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    keyed = []
    for item, weight in weighted:
        if weight <= 0:
            raise ValueError(f"weight for {item!r} must be > 0")
        rng = random.Random(f"{seed}|{item}")
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        keyed.append((-math.log(u) / weight, item))
    keyed.sort()
    return [item for _, item in keyed[:n]]


def sample_eval_queries(history: QueryHistory, n: int, seed: int) -> list[str]:
    """Sample queries with weight ln(1 + search count), without replacement."""
    if not history.entries:
        raise ValueError("query history is empty")
    weighted = [(query, math.log1p(count)) for query, count in history.entries.items()]
    return weighted_sample_without_replacement(weighted, n, seed)


def pool_candidates(
    query: str, runs: Sequence[RetrievalRun], impute_missing_rank: bool = False
) -> list[PooledCandidate]:
    """Union the sources' ranked lists for one query, tracking per-source
    ranks (1 = best) and their mean.

    With ``impute_missing_rank``, a source that returned the query but not
    the sku contributes len(its list) + 1 instead of being left out of the
    mean.
    """
    ranks: dict[str, dict[str, int]] = {}
    sources_with_query = [run for run in runs if query in run.results]
    if not sources_with_query:
        raise ValueError(f"query {query!r} not present in any run")
    for run in sources_with_query:
        for position, sku in enumerate(run.results[query], start=1):
            ranks.setdefault(sku, {})[run.source_id] = position
    pool = []
    for sku in sorted(ranks):
        present = ranks[sku]
        if impute_missing_rank:
            values = [
                present.get(run.source_id, len(run.results[query]) + 1)
                for run in sources_with_query
            ]
        else:
            values = list(present.values())
        pool.append(
            PooledCandidate(query=query, sku=sku, ranks=present, mean_rank=sum(values) / len(values))
        )
    return pool


def sample_pool(pool: Sequence[PooledCandidate], m: int, seed: int) -> list[PooledCandidate]:
    """Sample candidates with weight 1 / mean_rank, without replacement."""
    if not pool:
        raise ValueError("candidate pool is empty")
    by_sku = {c.sku: c for c in pool}
    picked = weighted_sample_without_replacement(
        [(c.sku, 1.0 / c.mean_rank) for c in pool], min(m, len(pool)), seed
    )
    return [by_sku[sku] for sku in picked]


# ---------------------------------------------------------------------------
# Annotation tasks and judgments
# ---------------------------------------------------------------------------


def export_annotation_tasks(
    samples: Sequence[PooledCandidate],
    catalog: dict[str, ProductRecord],
    path: str | Path,
) -> list[dict]:
    """Write task JSONL rows with sequential task ids and display fields."""
    tasks = []
    for i, cand in enumerate(samples):
        product = catalog.get(cand.sku)
        if product is None:
            raise KeyError(f"sku {cand.sku!r} not found in catalog")
        tasks.append(
            {
                "task_id": f"t{i:06d}",
                "query": cand.query,
                "sku": cand.sku,
                "title": product.fields.get("title", ""),
                "category": product.fields.get("category", ""),
                "description": product.fields.get("description", ""),
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task, sort_keys=True) + "\n")
    return tasks


def import_judgments(path: str | Path) -> list[JudgedPair]:
    """Read judgment JSONL; duplicate (query, sku, annotator) keeps the
    latest ts (file order breaks exact ties)."""
    latest: dict[tuple[str, str, str], JudgedPair] = {}
    for lineno, obj in iter_jsonl(path):
        try:
            pair = JudgedPair(
                query=str(obj["query"]),
                sku=str(obj["sku"]),
                grade=Grade.parse(str(obj["grade"])),
                annotator_id=str(obj["annotator_id"]),
                ts=int(obj["ts"]),
            )
        except (KeyError, ValueError) as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
        key = (pair.query, pair.sku, pair.annotator_id)
        if key not in latest or pair.ts >= latest[key].ts:
            latest[key] = pair
    return list(latest.values())


def save_judgments(judgments: Iterable[JudgedPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in judgments:
            fh.write(
                json.dumps(
                    {
                        "query": j.query,
                        "sku": j.sku,
                        "grade": j.grade.label,
                        "annotator_id": j.annotator_id,
                        "ts": j.ts,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def relevant_sets(
    judgments: Sequence[JudgedPair], threshold: Grade
) -> dict[str, set[str]]:
    """Query -> set of skus judged at or above the threshold. A pair judged
    by several annotators counts as relevant if any judgment clears the
    threshold."""
    out: dict[str, set[str]] = {}
    for j in judgments:
        if j.grade >= threshold:
            out.setdefault(j.query, set()).add(j.sku)
        else:
            out.setdefault(j.query, set())
    return out


def recall_at_k(
    run: RetrievalRun,
    judgments: Sequence[JudgedPair],
    k: int,
    threshold: Grade = Grade.GOOD,
    cap_denominator: bool = False,
) -> RecallReport:
    """Macro recall@k over queries with at least one relevant judgment.

    recall(q) = |top-k(q) ∩ relevant(q)| / |relevant(q)|; queries without
    relevant judged products are excluded from the macro average and
    reported in skipped_queries. ``cap_denominator`` switches the
    denominator to min(|relevant|, k).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per_query: dict[str, float] = {}
    skipped = 0
    for query, relevant in sorted(relevant_sets(judgments, threshold).items()):
        if not relevant:
            skipped += 1
            continue
        top = set(run.results.get(query, [])[:k])
        denom = min(len(relevant), k) if cap_denominator else len(relevant)
        per_query[query] = len(top & relevant) / denom
    macro = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return RecallReport(
        k=k, threshold=threshold, per_query=per_query, macro_average=macro, skipped_queries=skipped
    )


def build_run(
    ckpt: EncoderCheckpoint,
    index: ExactIndex | HnswIndex,
    queries: Sequence[str],
    k: int,
    source_id: str | None = None,
) -> RetrievalRun:
    """Retrieve top-k for every query with the given encoder and index."""
    results = {}
    for query in queries:
        vector = embed_text(ckpt, query)
        results[query] = [sku for sku, _ in index.search(vector, k)]
    return RetrievalRun(source_id=source_id or ckpt.model_id, results=results)


def compare_runs(
    runs: Sequence[RetrievalRun],
    judgments: Sequence[JudgedPair],
    ks: Sequence[int] = (25, 200),
    threshold: Grade = Grade.GOOD,
) -> dict:
    """Per-run recall at each cutoff plus pairwise deltas in percentage points."""
    models = []
    recalls: dict[tuple[str, int], float] = {}
    for run in runs:
        entry: dict = {"model_id": run.source_id}
        for k in ks:
            report = recall_at_k(run, judgments, k, threshold)
            entry[f"recall_at_{k}"] = report.macro_average
            entry["skipped_queries"] = report.skipped_queries
            recalls[(run.source_id, k)] = report.macro_average
        models.append(entry)
    deltas = []
    for i, a in enumerate(runs):
        for b in runs[i + 1 :]:
            for k in ks:
                deltas.append(
                    {
                        "a": a.source_id,
                        "b": b.source_id,
                        "k": k,
                        "delta_pp": 100.0 * (recalls[(a.source_id, k)] - recalls[(b.source_id, k)]),
                    }
                )
    return {"threshold": threshold.label, "models": models, "deltas": deltas}


def compare_models(
    models: Sequence[tuple[EncoderCheckpoint, ExactIndex | HnswIndex]],
    queries: Sequence[str],
    judgments: Sequence[JudgedPair],
    ks: Sequence[int] = (25, 200),
    threshold: Grade = Grade.GOOD,
) -> dict:
    """Build one run per (checkpoint, index) over a shared query set and
    compare them; deterministic for fixed inputs."""
    runs = [build_run(ckpt, index, queries, max(ks)) for ckpt, index in models]
    return compare_runs(runs, judgments, ks, threshold)


# ---------------------------------------------------------------------------
# Run file IO
# ---------------------------------------------------------------------------


def save_run(run: RetrievalRun, path: str | Path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for query in sorted(run.results):
            fh.write(
                json.dumps(
                    {"source_id": run.source_id, "query": query, "ranked_skus": run.results[query]},
                    sort_keys=True,
                )
                + "\n"
            )


def load_runs(path: str | Path) -> list[RetrievalRun]:
    """Read run JSONL; one RetrievalRun per source_id found in the file."""
    by_source: dict[str, dict[str, list[str]]] = {}
    for lineno, obj in iter_jsonl(path):
        try:
            source = str(obj["source_id"])
            query = str(obj["query"])
            skus = [str(s) for s in obj["ranked_skus"]]
        except (KeyError, TypeError) as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
        by_source.setdefault(source, {})[query] = skus
    return [RetrievalRun(source_id=s, results=r) for s, r in sorted(by_source.items())]
