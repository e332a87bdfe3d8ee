"""Command-line pipeline driver.

Every subcommand reads an optional TOML config file (--config or the
EBR_CONFIG env var) and applies flag overrides on top; --seed wins over
any configured seed. Exit code 0 on success, 1 with a one-line error
otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .. import corpus as corpus_mod
from .. import corpusgen, curation, evaluation, training
from ..encoder import EncoderConfig, init_checkpoint, load_checkpoint, save_checkpoint
from ..index import (
    HnswParams,
    IndexEntry,
    build_exact,
    build_hnsw,
    embed_catalog,
    load_index,
    save_index,
)

DEFAULT_PORT = 8080


class CliError(Exception):
    pass


class Options:
    """Flag > config[section] > config[paths] > default."""

    def __init__(self, args: argparse.Namespace, config: dict, section: str):
        self.args = args
        self.config = config
        self.section = section

    def get(self, key: str, default=None, required: bool = False):
        value = getattr(self.args, key.replace("-", "_"), None)
        if value is None:
            for section in (self.section, "paths"):
                table = self.config.get(section)
                if isinstance(table, dict) and key in table:
                    value = table[key]
                    break
        if value is None:
            value = default
        if value is None and required:
            raise CliError(f"missing required option --{key} (or [{self.section}] {key} in config)")
        return value

    def seed(self, default: int = 0) -> int:
        if self.args.seed is not None:
            return self.args.seed
        return int(self.get("seed", default))


def _load_config(args: argparse.Namespace) -> dict:
    path = args.config or os.environ.get("EBR_CONFIG")
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _encoder_config(opts: Options) -> EncoderConfig:
    encoder = opts.config.get("encoder", {})
    return EncoderConfig(
        vocab_buckets=int(opts.get("vocab-buckets", encoder.get("vocab_buckets", 2**16))),
        embedding_dim=int(opts.get("dim", encoder.get("embedding_dim", 64))),
        ngram_orders=tuple(encoder.get("ngram_orders", [3])),
        product_fields=tuple(encoder.get("product_fields", ["title", "category", "description"])),
        shared_towers=bool(encoder.get("shared_towers", True)),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(opts: Options) -> int:
    spec = corpusgen.CorpusSpec(
        n_products=int(opts.get("products", 2000)),
        seed=opts.seed(7),
    )
    out_dir = opts.get("out-dir", required=True)
    corpus = corpusgen.generate_corpus(spec)
    paths = corpusgen.write_corpus(corpus, out_dir)
    print(
        f"wrote {len(corpus.products)} products, {len(corpus.events)} events, "
        f"{len(corpus.history.entries)} history queries to {out_dir}"
    )
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def cmd_ingest(opts: Options) -> int:
    catalog = corpus_mod.load_catalog(opts.get("catalog", required=True))
    events = corpus_mod.load_events(opts.get("events", required=True))
    aggregates = corpus_mod.aggregate_events(events)
    out = opts.get("out", required=True)
    corpus_mod.save_aggregates(aggregates, out)
    history_path = opts.get("history")
    history_note = ""
    if history_path:
        history = corpus_mod.load_query_history(history_path)
        history_note = f", history ok ({len(history.entries)} queries)"
    print(f"{len(catalog)} products, {len(events)} events -> {len(aggregates)} aggregates at {out}{history_note}")
    return 0


def cmd_curate(opts: Options) -> int:
    aggregates = corpus_mod.load_aggregates(opts.get("aggregates", required=True))
    catalog = corpus_mod.catalog_lookup(corpus_mod.load_catalog(opts.get("catalog", required=True)))
    seed = opts.seed()
    min_visitors = int(opts.get("min-visitors", 2))
    cap = int(opts.get("category-cap", 1000))
    filtered = curation.filter_min_visitors(aggregates, min_visitors)
    sampled = curation.stratified_sample(filtered, catalog, cap, seed)
    print(f"{len(aggregates)} aggregates -> {len(filtered)} after visitor filter -> {len(sampled)} after stratification")

    out_q2p = opts.get("out-q2p")
    out_q2q = opts.get("out-q2q")
    if not out_q2p and not out_q2q:
        raise CliError("need --out-q2p and/or --out-q2q")
    if out_q2p:
        synthetic_path = opts.get("synthetic")
        synthetics = (
            curation.import_synthetic_queries(synthetic_path, catalog) if synthetic_path else []
        )
        pairs = curation.build_q2p_dataset(sampled, synthetics, catalog)
        curation.save_pairs(pairs, out_q2p)
        print(f"q2p: {len(pairs)} pairs ({len(synthetics)} synthetic) -> {out_q2p}")
    if out_q2q:
        pairs = curation.build_q2q_dataset(sampled, int(opts.get("q2q-cap", 400)), seed)
        curation.save_pairs(pairs, out_q2q)
        print(f"q2q: {len(pairs)} pairs -> {out_q2q}")
    return 0


def cmd_synth(opts: Options) -> int:
    catalog = corpus_mod.load_catalog(opts.get("catalog", required=True))
    n = int(opts.get("n", 10))
    seed = opts.seed()
    out = opts.get("out", required=True)
    rows = 0
    with open(out, "w", encoding="utf-8") as fh:
        for product in catalog:
            for query in curation.generate_synthetic_queries(product, n, seed=seed):
                fh.write(json.dumps({"sku": product.sku, "query": query}) + "\n")
                rows += 1
    print(f"{rows} synthetic queries for {len(catalog)} products -> {out}")
    return 0


def cmd_pretrain(opts: Options) -> int:
    catalog = corpus_mod.load_catalog(opts.get("catalog", required=True))
    texts = [value for product in catalog for value in product.fields.values()]
    history_path = opts.get("history")
    if history_path:
        texts.extend(corpus_mod.load_query_history(history_path).entries)
    config = _encoder_config(opts)
    seed = opts.seed()
    ckpt = init_checkpoint(config, seed=seed)
    tc = training.TrainingConfig(
        epochs=int(opts.get("epochs", 1)),
        learning_rate=float(opts.get("lr", 0.05)),
        rng_seed=seed,
    )
    ckpt = training.pretrain_embeddings(
        texts, ckpt, tc, window=int(opts.get("window", 2)), negatives=int(opts.get("negatives", 5))
    )
    out = opts.get("out", required=True)
    save_checkpoint(ckpt, out)
    print(f"pretrained on {len(texts)} texts ({tc.epochs} epochs) -> {out}")
    return 0


def cmd_train(opts: Options) -> int:
    pairs = curation.load_pairs(opts.get("pairs", required=True))
    init = load_checkpoint(opts.get("init", required=True))
    stage = str(opts.get("stage", required=True))
    config = training.TrainingConfig(
        batch_size=int(opts.get("batch-size", 32)),
        scale=float(opts.get("scale", 20.0)),
        learning_rate=float(opts.get("lr", 0.05)),
        epochs=int(opts.get("epochs", 5)),
        optimizer=str(opts.get("optimizer", "sgd")),
        rng_seed=opts.seed(),
        stage=stage,
    )
    catalog = None
    if stage == "q2p":
        catalog = corpus_mod.catalog_lookup(corpus_mod.load_catalog(opts.get("catalog", required=True)))
    log_path = opts.get("log")
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def on_epoch(stats: training.EpochStats) -> None:
        line = json.dumps(stats.to_json_dict(), sort_keys=True)
        print(line)
        if log_fh:
            log_fh.write(line + "\n")

    try:
        ckpt = training.train_stage(pairs, init, config, catalog, on_epoch=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    out = opts.get("out", required=True)
    save_checkpoint(ckpt, out)
    print(f"trained {config.stage} on {len(pairs)} pairs -> {out} (model_id={ckpt.model_id})")
    return 0


def cmd_merge(opts: Options) -> int:
    spec = training.load_merge_spec(opts.get("spec", required=True))
    merged = training.merge_checkpoints(spec)
    out = opts.get("out", required=True)
    save_checkpoint(merged, out)
    weights = ", ".join(f"{ckpt.model_id}:{w}" for ckpt, w in spec.components)
    print(f"merged [{weights}] -> {out}")
    return 0


def cmd_embed_products(opts: Options) -> int:
    ckpt = load_checkpoint(opts.get("checkpoint", required=True))
    catalog = corpus_mod.load_catalog(opts.get("catalog", required=True))
    out = opts.get("out", required=True)
    entries = embed_catalog(ckpt, catalog)
    with open(out, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps({"sku": entry.sku, "vector": entry.vector.tolist()}) + "\n")
    print(f"{len(entries)} product embeddings (d={ckpt.config.embedding_dim}) -> {out}")
    return 0


def cmd_index(opts: Options) -> int:
    embeddings_path = opts.get("embeddings")
    if embeddings_path:
        entries = []
        import numpy as np

        for _, obj in corpus_mod.iter_jsonl(embeddings_path):
            entries.append(IndexEntry(sku=str(obj["sku"]), vector=np.asarray(obj["vector"], dtype=np.float64)))
    else:
        ckpt = load_checkpoint(opts.get("checkpoint", required=True))
        catalog = corpus_mod.load_catalog(opts.get("catalog", required=True))
        entries = embed_catalog(ckpt, catalog)
    kind = str(opts.get("kind", "hnsw"))
    if kind == "exact":
        index = build_exact(entries)
    elif kind == "hnsw":
        params = HnswParams(
            m=int(opts.get("m", 16)),
            ef_construction=int(opts.get("ef-construction", 200)),
            ef_search=int(opts.get("ef-search", 100)),
            rng_seed=opts.seed(),
        )
        index = build_hnsw(entries, params)
    else:
        raise CliError(f"unknown index kind {kind!r} (expected exact or hnsw)")
    out = opts.get("out", required=True)
    save_index(index, out)
    print(f"{kind} index over {len(entries)} vectors -> {out}")
    return 0


def cmd_evalset(opts: Options) -> int:
    history = corpus_mod.load_query_history(opts.get("history", required=True))
    run_paths = opts.get("runs", required=True)
    if isinstance(run_paths, str):
        run_paths = [run_paths]
    runs = [run for path in run_paths for run in evaluation.load_runs(path)]
    catalog = corpus_mod.catalog_lookup(corpus_mod.load_catalog(opts.get("catalog", required=True)))
    seed = opts.seed()
    n_queries = int(opts.get("n-queries", 200))
    per_query = int(opts.get("products-per-query", 10))
    queries = evaluation.sample_eval_queries(history, n_queries, seed)
    samples = []
    uncovered = 0
    for query in queries:
        if not any(query in run.results for run in runs):
            uncovered += 1
            continue
        pool = evaluation.pool_candidates(query, runs)
        samples.extend(evaluation.sample_pool(pool, per_query, seed))
    out = opts.get("out-tasks", required=True)
    tasks = evaluation.export_annotation_tasks(samples, catalog, out)
    note = f" ({uncovered} sampled queries not covered by any run)" if uncovered else ""
    print(f"{len(tasks)} annotation tasks over {len(queries) - uncovered} queries -> {out}{note}")
    return 0


def cmd_evaluate(opts: Options) -> int:
    judgments = evaluation.import_judgments(opts.get("judgments", required=True))
    run_paths = opts.get("runs") or []
    if isinstance(run_paths, str):
        run_paths = [run_paths]
    runs = [run for path in run_paths for run in evaluation.load_runs(path)]
    ks_raw = opts.get("ks", "25,200")
    ks = [int(k) for k in (ks_raw.split(",") if isinstance(ks_raw, str) else ks_raw)]
    threshold = evaluation.Grade.parse(str(opts.get("threshold", "Good")))

    checkpoint_path = opts.get("checkpoint")
    if checkpoint_path:
        ckpt = load_checkpoint(checkpoint_path)
        index = load_index(opts.get("index", required=True))
        queries = sorted({j.query for j in judgments})
        run = evaluation.build_run(ckpt, index, queries, max(ks), opts.get("source-id"))
        runs.append(run)
        run_out = opts.get("run-out")
        if run_out:
            evaluation.save_run(run, run_out)
    if not runs:
        raise CliError("nothing to evaluate: give --runs and/or --checkpoint/--index")

    report = evaluation.compare_runs(runs, judgments, ks, threshold)
    out = opts.get("out")
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
        print(f"report -> {out}")
    print(text)
    return 0


def cmd_serve(opts: Options) -> int:
    import uvicorn

    from .app import ServiceState, create_app
    from .cache import CacheConfig, EmbeddingCache

    ckpt = load_checkpoint(opts.get("checkpoint", required=True))
    index_path = opts.get("index")
    index = load_index(index_path) if index_path else None
    tasks_path = opts.get("tasks")
    tasks = [obj for _, obj in corpus_mod.iter_jsonl(tasks_path)] if tasks_path else []
    cache = EmbeddingCache(
        CacheConfig(
            capacity=int(opts.get("cache-capacity", 10000)),
            ttl_seconds=float(opts.get("cache-ttl", 3600)),
        )
    )
    state = ServiceState(
        checkpoint=ckpt,
        index=index,
        cache=cache,
        tasks=tasks,
        judgments_path=opts.get("judgments"),
        ui_dir=opts.get("ui-dir"),
    )
    app = create_app(state)
    port = int(opts.get("port", os.environ.get("EBR_PORT", DEFAULT_PORT)))
    print(f"serving model {ckpt.model_id} on :{port} (index: {index_path or 'none'})")
    uvicorn.run(app, host=str(opts.get("host", "127.0.0.1")), port=port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML config file (or EBR_CONFIG env var)")
    sub.add_argument("--seed", type=int, help="override every configured rng seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "gen-corpus": (cmd_gen_corpus, ["--out-dir", "--products"]),
        "ingest": (cmd_ingest, ["--catalog", "--events", "--history", "--out"]),
        "curate": (
            cmd_curate,
            ["--aggregates", "--catalog", "--synthetic", "--min-visitors", "--category-cap",
             "--q2q-cap", "--out-q2p", "--out-q2q"],
        ),
        "synth": (cmd_synth, ["--catalog", "--n", "--out"]),
        "pretrain": (
            cmd_pretrain,
            ["--catalog", "--history", "--out", "--dim", "--vocab-buckets", "--epochs", "--lr",
             "--window", "--negatives"],
        ),
        "train": (
            cmd_train,
            ["--pairs", "--init", "--stage", "--out", "--catalog", "--epochs", "--batch-size",
             "--lr", "--scale", "--optimizer", "--log"],
        ),
        "merge": (cmd_merge, ["--spec", "--out"]),
        "embed-products": (cmd_embed_products, ["--checkpoint", "--catalog", "--out"]),
        "index": (
            cmd_index,
            ["--checkpoint", "--catalog", "--embeddings", "--kind", "--out", "--m",
             "--ef-construction", "--ef-search"],
        ),
        "evalset": (
            cmd_evalset,
            ["--history", "--catalog", "--n-queries", "--products-per-query", "--out-tasks"],
        ),
        "evaluate": (
            cmd_evaluate,
            ["--judgments", "--ks", "--threshold", "--checkpoint", "--index", "--source-id",
             "--run-out", "--out"],
        ),
        "serve": (
            cmd_serve,
            ["--checkpoint", "--index", "--tasks", "--judgments", "--port", "--host",
             "--cache-capacity", "--cache-ttl", "--ui-dir"],
        ),
    }
    for name, (handler, flags) in commands.items():
        cmd = sub.add_parser(name)
        _add_common(cmd)
        for flag in flags:
            cmd.add_argument(flag)
        cmd.set_defaults(handler=handler, section=name.replace("-", "_"))
    # multi-value flags
    for name in ("evalset", "evaluate"):
        sub.choices[name].add_argument("--runs", nargs="*")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        opts = Options(args, config, args.section)
        return args.handler(opts)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line error contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
