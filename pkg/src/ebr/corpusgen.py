"""Deterministic desk-scale corpus: template products, simulated engagement.

Products are built from per-category brand/modifier/noun tables plus a
unique model code, so synthetic queries derived from titles carry enough
signal for retrieval to be learnable. Engagement events are simulated by
drawing from each product's synthetic queries (with popularity skew, some
single-visitor noise, and a little cross-product noise within a category);
one synthetic query per product is held out of both events and the
synthetic training set to serve as an evaluation pair.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SIGNALS, EngagementEvent, ProductRecord, QueryHistory
from .curation import TrainingPair, generate_synthetic_queries

_BASE_TS = 1700000000

# category path, brands, modifiers, nouns, spec name, spec values
_CATEGORY_TABLE = [
    ("TV & Home Theater > TVs", ["sony", "samsung", "lg", "tcl", "hisense"],
     ["4k", "oled", "qled", "smart", "uhd"], ["tv", "television"],
     "spec:screen_size", ["43 in", "50 in", "55 in", "65 in", "75 in"]),
    ("Computers & Tablets > Laptops", ["dell", "hp", "lenovo", "asus", "acer"],
     ["gaming", "ultrabook", "business", "touchscreen", "convertible"], ["laptop", "notebook"],
     "spec:memory", ["8 gb", "16 gb", "32 gb"]),
    ("Audio > Headphones", ["sony", "bose", "sennheiser", "jbl", "beats"],
     ["wireless", "noise cancelling", "over-ear", "in-ear", "studio"], ["headphones", "earbuds"],
     "spec:battery_life", ["20 hours", "30 hours", "40 hours"]),
    ("Appliances > Refrigerators", ["whirlpool", "ge", "frigidaire", "samsung", "lg"],
     ["french door", "side by side", "counter depth", "top freezer", "mini"], ["refrigerator", "fridge"],
     "spec:capacity", ["18 cu ft", "22 cu ft", "26 cu ft"]),
    ("Appliances > Washers", ["maytag", "whirlpool", "lg", "samsung", "ge"],
     ["front load", "top load", "high efficiency", "stackable", "compact"], ["washer", "washing machine"],
     "spec:capacity", ["4.2 cu ft", "4.8 cu ft", "5.4 cu ft"]),
    ("Cameras > Digital Cameras", ["canon", "nikon", "sony", "fujifilm", "panasonic"],
     ["mirrorless", "dslr", "point and shoot", "full frame", "compact"], ["camera"],
     "spec:resolution", ["20 mp", "24 mp", "33 mp", "45 mp"]),
    ("Cell Phones > Smartphones", ["apple", "samsung", "google", "motorola", "oneplus"],
     ["5g", "unlocked", "pro", "max", "plus"], ["smartphone", "phone"],
     "spec:storage", ["128 gb", "256 gb", "512 gb"]),
    ("Computers & Tablets > Tablets", ["apple", "samsung", "amazon", "lenovo", "microsoft"],
     ["10 inch", "11 inch", "kids", "pro", "lite"], ["tablet"],
     "spec:storage", ["64 gb", "128 gb", "256 gb"]),
    ("Computers & Tablets > Monitors", ["dell", "lg", "samsung", "asus", "benq"],
     ["curved", "ultrawide", "gaming", "4k", "portable"], ["monitor", "display"],
     "spec:refresh_rate", ["60 hz", "144 hz", "165 hz", "240 hz"]),
    ("Audio > Speakers", ["sonos", "bose", "jbl", "sony", "klipsch"],
     ["bluetooth", "smart", "portable", "bookshelf", "soundbar"], ["speaker"],
     "spec:power", ["20 w", "40 w", "80 w", "120 w"]),
    ("Networking > Routers", ["netgear", "tp-link", "asus", "linksys", "eero"],
     ["wifi 6", "mesh", "gigabit", "dual band", "tri band"], ["router", "wifi system"],
     "spec:coverage", ["1500 sq ft", "3000 sq ft", "5000 sq ft"]),
    ("Video Games > Consoles", ["sony", "microsoft", "nintendo", "valve", "atari"],
     ["wireless", "digital", "portable", "limited edition", "bundle"], ["console", "game system"],
     "spec:storage", ["512 gb", "825 gb", "1 tb"]),
]


@dataclass
class CorpusSpec:
    n_products: int = 2000
    seed: int = 7
    visitor_pool: int = 4000
    synthetic_per_product: int = 10
    popular_fraction: float = 0.1


@dataclass
class DeskCorpus:
    products: list[ProductRecord]
    events: list[EngagementEvent]
    history: QueryHistory
    synthetic_train: list[TrainingPair]
    holdout: list[tuple[str, str]] = field(default_factory=list)  # (query, sku)


def generate_products(spec: CorpusSpec) -> list[ProductRecord]:
    rng = random.Random(f"products|{spec.seed}")
    products = []
    for i in range(spec.n_products):
        category, brands, modifiers, nouns, spec_name, spec_values = _CATEGORY_TABLE[
            i % len(_CATEGORY_TABLE)
        ]
        brand = rng.choice(brands)
        modifier = rng.choice(modifiers)
        noun = rng.choice(nouns)
        spec_value = rng.choice(spec_values)
        model = f"{brand[:2]}{noun[:1]}{1000 + i}"
        title = f"{brand} {modifier} {noun} {model}"
        description = f"{brand} {noun} featuring a {modifier} design with {spec_value}"
        products.append(
            ProductRecord(
                sku=f"sku{i:05d}",
                fields={
                    "title": title,
                    "category": category,
                    "description": description,
                    spec_name: spec_value,
                },
            )
        )
    return products


def generate_corpus(spec: CorpusSpec | None = None) -> DeskCorpus:
    spec = spec or CorpusSpec()
    products = generate_products(spec)
    rng = random.Random(f"events|{spec.seed}")

    synthetic_train: list[TrainingPair] = []
    holdout: list[tuple[str, str]] = []
    usable_queries: dict[str, list[str]] = {}
    by_category: dict[str, list[str]] = {}
    for product in products:
        queries = generate_synthetic_queries(
            product, spec.synthetic_per_product, seed=spec.seed
        )
        held_index = rng.randrange(len(queries))
        holdout.append((queries[held_index], product.sku))
        train_queries = [q for i, q in enumerate(queries) if i != held_index]
        usable_queries[product.sku] = train_queries
        by_category.setdefault(product.top_category(), []).append(product.sku)
        synthetic_train.extend(
            TrainingPair(left=q, right=product.title, kind="q2p", source="synthetic", right_sku=product.sku)
            for q in train_queries
        )

    events: list[EngagementEvent] = []
    history_counts: dict[str, int] = {}
    ts = _BASE_TS
    n_popular = int(spec.n_products * spec.popular_fraction)
    for pi, product in enumerate(products):
        popular = pi < n_popular
        queries = usable_queries[product.sku]
        n_queries = rng.randint(4, 8) if popular else rng.randint(2, 5)
        chosen = rng.sample(queries, min(n_queries, len(queries)))
        for query in chosen:
            # most pairs clear the 2-visitor filter; some are 1-visitor noise
            n_visitors = rng.choices([1, 2, 3, 4, 6], weights=[25, 30, 25, 12, 8], k=1)[0]
            if popular:
                n_visitors += rng.randint(1, 4)
            for _ in range(n_visitors):
                visitor = f"v{rng.randrange(spec.visitor_pool):05d}"
                for _ in range(rng.choice([1, 1, 1, 2])):
                    target_sku = product.sku
                    if rng.random() < 0.05:
                        target_sku = rng.choice(by_category[product.top_category()])
                    ts += rng.randint(1, 30)
                    events.append(
                        EngagementEvent(
                            visitor_id=visitor,
                            raw_query=query,
                            sku=target_sku,
                            signal=rng.choice(SIGNALS),
                            timestamp=ts,
                        )
                    )
                    history_counts[query] = history_counts.get(query, 0) + 1

    return DeskCorpus(
        products=products,
        events=events,
        history=QueryHistory(entries=history_counts),
        synthetic_train=synthetic_train,
        holdout=holdout,
    )


def write_corpus(corpus: DeskCorpus, out_dir: str | Path) -> dict[str, Path]:
    """Write catalog/events/history JSONL (external-interface schemas) plus
    the synthetic training pairs and holdout pairs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "catalog": out / "catalog.jsonl",
        "events": out / "events.jsonl",
        "history": out / "history.jsonl",
        "synthetic": out / "synthetic_queries.jsonl",
        "holdout": out / "holdout_pairs.jsonl",
    }
    with open(paths["catalog"], "w", encoding="utf-8") as fh:
        for p in corpus.products:
            fh.write(json.dumps({"sku": p.sku, "fields": p.fields}) + "\n")
    with open(paths["events"], "w", encoding="utf-8") as fh:
        for e in corpus.events:
            fh.write(
                json.dumps(
                    {
                        "visitor_id": e.visitor_id,
                        "query": e.raw_query,
                        "sku": e.sku,
                        "signal": e.signal,
                        "ts": e.timestamp,
                    }
                )
                + "\n"
            )
    with open(paths["history"], "w", encoding="utf-8") as fh:
        for query, count in sorted(corpus.history.entries.items()):
            fh.write(json.dumps({"query": query, "count": count}) + "\n")
    with open(paths["synthetic"], "w", encoding="utf-8") as fh:
        for pair in corpus.synthetic_train:
            fh.write(json.dumps({"sku": pair.right_sku, "query": pair.left}) + "\n")
    with open(paths["holdout"], "w", encoding="utf-8") as fh:
        for query, sku in corpus.holdout:
            fh.write(json.dumps({"query": query, "sku": sku}) + "\n")
    return paths
