"""HTTP service: query embedding, retrieval, and annotation endpoints.

Errors are always ``{"error": "..."}`` JSON with a 4xx/5xx status; request
and response bodies are UTF-8 JSON. The checkpoint and index are immutable
snapshots held by the state object; the judgment store serializes writes
and keeps last-write-wins semantics per (query, sku, annotator).
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from fastapi.staticfiles import StaticFiles

from ..corpus import iter_jsonl, normalize_query
from ..encoder import EncoderCheckpoint, embed_text
from ..evaluation import Grade
from ..index import ExactIndex, HnswIndex
from .cache import CacheConfig, EmbeddingCache

DEFAULT_SEARCH_K = 200


@dataclass
class ServiceState:
    checkpoint: EncoderCheckpoint
    index: ExactIndex | HnswIndex | None = None
    cache: EmbeddingCache = field(default_factory=lambda: EmbeddingCache(CacheConfig()))
    tasks: list[dict] = field(default_factory=list)
    judgments_path: str | None = None
    ui_dir: str | None = None
    clock: "callable" = time.time

    def __post_init__(self):
        self.encoder_invocations = 0
        self._lock = threading.Lock()
        # (query, sku, annotator_id) -> judgment record
        self.judgment_store: dict[tuple[str, str, str], dict] = {}
        self.tasks = sorted(self.tasks, key=lambda t: t["task_id"])
        if self.judgments_path and Path(self.judgments_path).exists():
            for _, obj in iter_jsonl(self.judgments_path):
                key = (str(obj["query"]), str(obj["sku"]), str(obj["annotator_id"]))
                self.judgment_store[key] = obj

    def embed_cached(self, query: str) -> tuple[np.ndarray, bool]:
        """Embed a normalized query through the cache; returns (vector, hit)."""
        key = EmbeddingCache.key(query, self.checkpoint.model_id)
        vector = self.cache.get(key)
        if vector is not None:
            return vector, True
        vector = embed_text(self.checkpoint, query)
        with self._lock:
            self.encoder_invocations += 1
        self.cache.put(key, vector)
        return vector, False

    def record_judgment(self, record: dict) -> None:
        key = (record["query"], record["sku"], record["annotator_id"])
        with self._lock:
            self.judgment_store[key] = record
            if self.judgments_path:
                with open(self.judgments_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


async def _json_body(request: Request) -> dict | None:
    try:
        body = await request.json()
    except Exception:
        return None
    return body if isinstance(body, dict) else None


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="ebr", docs_url=None, redoc_url=None)
    app.state.ebr = state

    @app.get("/healthz")
    async def healthz():
        return PlainTextResponse("ok")

    @app.post("/v1/embed")
    async def embed(request: Request):
        body = await _json_body(request)
        if body is None:
            return _error(400, "body must be a JSON object")
        raw = body.get("query")
        if not isinstance(raw, str) or not raw.strip():
            return _error(400, "missing or empty 'query'")
        vector, cached = state.embed_cached(normalize_query(raw))
        return JSONResponse(
            {"vector": vector.tolist(), "cached": cached, "model_id": state.checkpoint.model_id}
        )

    @app.post("/v1/search")
    async def search(request: Request):
        body = await _json_body(request)
        if body is None:
            return _error(400, "body must be a JSON object")
        raw = body.get("query")
        if not isinstance(raw, str) or not raw.strip():
            return _error(400, "missing or empty 'query'")
        k = body.get("k", DEFAULT_SEARCH_K)
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            return _error(400, "'k' must be an integer >= 1")
        if state.index is None:
            return _error(503, "no index loaded")
        vector, cached = state.embed_cached(normalize_query(raw))
        hits = state.index.search(vector, k)
        return JSONResponse(
            {
                "results": [{"sku": sku, "score": score} for sku, score in hits],
                "cached": cached,
                "model_id": state.checkpoint.model_id,
            }
        )

    @app.get("/v1/annotation/next")
    async def annotation_next(request: Request):
        annotator_id = request.query_params.get("annotator_id", "").strip()
        if not annotator_id:
            return _error(400, "missing 'annotator_id'")
        judged = 0
        pending = None
        for task in state.tasks:
            if (task["query"], task["sku"], annotator_id) in state.judgment_store:
                judged += 1
            elif pending is None:
                pending = task
        if pending is None:
            return Response(status_code=204)
        return JSONResponse({**pending, "progress": {"judged": judged, "total": len(state.tasks)}})

    @app.post("/v1/annotation/judgments")
    async def annotation_submit(request: Request):
        body = await _json_body(request)
        if body is None:
            return _error(400, "body must be a JSON object")
        task = None
        task_id = body.get("task_id")
        if task_id is not None:
            task = next((t for t in state.tasks if t["task_id"] == task_id), None)
            if task is None:
                return _error(404, f"unknown task_id {task_id!r}")
        query = body.get("query", task["query"] if task else None)
        sku = body.get("sku", task["sku"] if task else None)
        annotator_id = body.get("annotator_id")
        if not query or not sku or not annotator_id:
            return _error(400, "judgment needs query, sku, and annotator_id")
        try:
            grade = Grade.parse(str(body.get("grade")))
        except ValueError as exc:
            return _error(400, str(exc))
        record = {
            "query": str(query),
            "sku": str(sku),
            "grade": grade.label,
            "annotator_id": str(annotator_id),
            "ts": int(state.clock()),
        }
        state.record_judgment(record)
        return JSONResponse({"status": "ok", "ts": record["ts"]})

    @app.get("/v1/annotation/export")
    async def annotation_export():
        records = sorted(
            state.judgment_store.values(),
            key=lambda r: (r["query"], r["sku"], r["annotator_id"]),
        )
        body = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        return PlainTextResponse(body, media_type="application/x-ndjson")

    @app.get("/v1/stats")
    async def stats():
        return JSONResponse(
            {
                "cache": state.cache.stats(),
                "index_size": len(state.index) if state.index is not None else 0,
                "model_id": state.checkpoint.model_id,
                "encoder_invocations": state.encoder_invocations,
            }
        )

    if state.ui_dir and Path(state.ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=state.ui_dir, html=True), name="ui")

    return app
