"""Catalog and engagement-log data model, ingestion, and aggregation.

Engagement events carry one of five micro-conversion signals; aggregation
rolls them up to unique <query, product> pairs with distinct-visitor counts.
Query text is normalized once here and the same function is reused at
training and serving time.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

SIGNALS = (
    "pdp_view",
    "plp_atc",
    "plp_check_availability",
    "pdp_atc",
    "pdp_check_availability",
)

_SIGNAL_SET = frozenset(SIGNALS)

_WS_RUN = re.compile(r"\s+")
_DISALLOWED = re.compile(r"[^a-z0-9 .\-]")
_SPACE_RUN = re.compile(r" {2,}")


class CorpusFileError(ValueError):
    """Malformed or inconsistent JSONL input file."""


def normalize_query(raw: str) -> str:
    """Canonicalize a raw search query.

    Lowercases, collapses whitespace runs to single spaces, strips, and
    drops every character outside [a-z0-9 .-]. Idempotent; may return "".
    """
    text = _WS_RUN.sub(" ", raw.lower())
    text = _DISALLOWED.sub("", text)
    return _SPACE_RUN.sub(" ", text).strip()


@dataclass
class ProductRecord:
    """One catalog item: an opaque sku plus an ordered name -> text field map.

    Canonical field names are "title", "category" (an "A > B > C" path
    string), "description", and "spec:<key>" entries; arbitrary additional
    names are allowed.
    """

    sku: str
    fields: dict[str, str]

    def __post_init__(self):
        if not self.sku:
            raise ValueError("product sku must be nonempty")
        if any(not name for name in self.fields):
            raise ValueError(f"product {self.sku!r} has an empty field name")
        if not any(value.strip() for value in self.fields.values()):
            raise ValueError(f"product {self.sku!r} has no nonempty field")

    @property
    def title(self) -> str:
        return self.fields.get("title", "")

    def top_category(self) -> str:
        """First segment of the 'category' path, '' when absent."""
        return self.fields.get("category", "").split(">")[0].strip()


@dataclass
class EngagementEvent:
    visitor_id: str
    raw_query: str
    sku: str
    signal: str
    timestamp: int

    def __post_init__(self):
        if not self.visitor_id:
            raise ValueError("event visitor_id must be nonempty")
        if self.signal not in _SIGNAL_SET:
            raise ValueError(f"unknown engagement signal {self.signal!r}")


@dataclass
class EngagementAggregate:
    """Rollup of all events for one (normalized query, sku) pair."""

    query: str
    sku: str
    signal_counts: dict[str, int] = field(default_factory=dict)
    unique_visitors: int = 0


@dataclass
class QueryHistory:
    """Normalized query -> positive search count."""

    entries: dict[str, int]

    def __post_init__(self):
        bad = [q for q, c in self.entries.items() if c < 1]
        if bad:
            raise ValueError(f"query history counts must be >= 1 (bad: {bad[:3]})")


def aggregate_events(events: Iterable[EngagementEvent]) -> list[EngagementAggregate]:
    """Aggregate events to unique <query, product> pairs.

    Queries are normalized before grouping. unique_visitors counts distinct
    visitor_ids over the pair's events; signal_counts counts events per
    signal. Output is sorted by (query, sku), so it is insensitive to the
    input event order.
    """
    counts: dict[tuple[str, str], dict[str, int]] = {}
    visitors: dict[tuple[str, str], set[str]] = {}
    for ev in events:
        key = (normalize_query(ev.raw_query), ev.sku)
        per_signal = counts.setdefault(key, {})
        per_signal[ev.signal] = per_signal.get(ev.signal, 0) + 1
        visitors.setdefault(key, set()).add(ev.visitor_id)
    return [
        EngagementAggregate(
            query=query,
            sku=sku,
            signal_counts=dict(sorted(counts[(query, sku)].items())),
            unique_visitors=len(visitors[(query, sku)]),
        )
        for query, sku in sorted(counts)
    ]


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, parsed object), skipping blank lines."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFileError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            if not isinstance(obj, dict):
                raise CorpusFileError(f"{path}: line {lineno} is not a JSON object")
            yield lineno, obj


def load_catalog(path: str | Path) -> list[ProductRecord]:
    """Read catalog JSONL ({"sku": ..., "fields": {...}}), order preserved.

    Rejects malformed lines (with line number) and duplicate skus (naming
    the sku and the offending line).
    """
    records: list[ProductRecord] = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        try:
            sku = obj["sku"]
            fields = obj["fields"]
        except KeyError as exc:
            raise CorpusFileError(f"{path}: line {lineno} missing key {exc}") from exc
        if not isinstance(sku, str) or not isinstance(fields, dict):
            raise CorpusFileError(f"{path}: line {lineno} has wrong field types")
        if sku in seen:
            raise CorpusFileError(f"{path}: duplicate sku {sku!r} on line {lineno}")
        try:
            record = ProductRecord(sku=sku, fields={str(k): str(v) for k, v in fields.items()})
        except ValueError as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
        seen.add(sku)
        records.append(record)
    return records


def load_events(path: str | Path) -> list[EngagementEvent]:
    """Read events JSONL ({"visitor_id", "query", "sku", "signal", "ts"})."""
    events: list[EngagementEvent] = []
    for lineno, obj in iter_jsonl(path):
        try:
            event = EngagementEvent(
                visitor_id=str(obj["visitor_id"]),
                raw_query=str(obj["query"]),
                sku=str(obj["sku"]),
                signal=str(obj["signal"]),
                timestamp=int(obj.get("ts", 0)),
            )
        except (KeyError, ValueError) as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
        events.append(event)
    return events


def load_query_history(path: str | Path) -> QueryHistory:
    """Read query history JSONL ({"query", "count"}); queries are normalized
    and counts for queries that collide after normalization are summed."""
    entries: dict[str, int] = {}
    for lineno, obj in iter_jsonl(path):
        try:
            query = normalize_query(str(obj["query"]))
            count = int(obj["count"])
        except (KeyError, ValueError) as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
        if count < 1:
            raise CorpusFileError(f"{path}: line {lineno}: count must be >= 1")
        if query:
            entries[query] = entries.get(query, 0) + count
    return QueryHistory(entries=entries)


def save_aggregates(aggs: Iterable[EngagementAggregate], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for agg in aggs:
            fh.write(
                json.dumps(
                    {
                        "query": agg.query,
                        "sku": agg.sku,
                        "signal_counts": agg.signal_counts,
                        "unique_visitors": agg.unique_visitors,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_aggregates(path: str | Path) -> list[EngagementAggregate]:
    aggs = []
    for lineno, obj in iter_jsonl(path):
        try:
            aggs.append(
                EngagementAggregate(
                    query=str(obj["query"]),
                    sku=str(obj["sku"]),
                    signal_counts={str(k): int(v) for k, v in obj["signal_counts"].items()},
                    unique_visitors=int(obj["unique_visitors"]),
                )
            )
        except (KeyError, ValueError, AttributeError) as exc:
            raise CorpusFileError(f"{path}: line {lineno}: {exc}") from exc
    return aggs


def catalog_lookup(records: Iterable[ProductRecord]) -> dict[str, ProductRecord]:
    return {record.sku: record for record in records}
