"""JSON HTTP API over the curation session store.

Endpoints:
  POST /sessions                              create a session from annotations
  GET  /sessions/{sid}/batch?annotator=&k=    lease up to k pending items
  POST /sessions/{sid}/decisions              apply one decision
  GET  /sessions/{sid}/progress               pending/accepted/rejected counts
  POST /sessions/{sid}/export                 curated IOB corpora

Errors come back as {code, message} plus current_version for stale writes.
"""

from __future__ import annotations

import io
import time

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, HTMLResponse
from pydantic import BaseModel

from .corpus import TaggedSentence
from .curation import (
    CurationError,
    CurationItem,
    DecisionRecord,
    SessionStore,
    StaleVersionError,
    load_annotations_jsonl,
)
from .kb import EntityClass


class CreateSessionBody(BaseModel):
    annotations: list[dict] | None = None
    annotations_jsonl: str | None = None
    session_id: str | None = None


class DecisionBody(BaseModel):
    item_id: str
    action: str
    annotator: str
    base_version: int
    candidate_id: str | None = None
    span: tuple[int, int] | None = None
    entity_class: str | None = None
    timestamp: float | None = None


def _error(status: int, exc: CurationError) -> JSONResponse:
    body: dict = {"code": exc.code, "message": exc.message}
    if isinstance(exc, StaleVersionError):
        body["current_version"] = exc.current_version
    return JSONResponse(status_code=status, content=body)


def _status_for(exc: CurationError) -> int:
    if isinstance(exc, StaleVersionError):
        return 409
    if exc.code in ("unknown_session", "unknown_item", "unknown_candidate", "unknown_target"):
        return 404
    return 400


def _item_payload(item: CurationItem) -> dict:
    return {
        "item_id": item.item_id,
        "doc_id": item.doc_id,
        "sentence_index": item.sentence_index,
        "text": item.text,
        "version": item.version,
        "lease_expires": item.lease_expires,
        "candidates": [
            {
                "candidate_id": c.candidate_id,
                "start": c.start,
                "end": c.end,
                "cui": c.cui,
                "tui_set": list(c.tuis),
                "score": c.score,
                "class": c.entity_class.value if c.entity_class else None,
                "status": item.status[c.candidate_id],
            }
            for c in item.candidates
        ],
        "additions": [
            {
                "start": a.start,
                "end": a.end,
                "class": a.entity_class.value,
                "annotator": a.annotator,
            }
            for a in item.additions
        ],
    }


def _corpus_text(corpus: list[TaggedSentence]) -> str:
    buf = io.StringIO()
    for s in corpus:
        buf.write(f"# {s.doc_id} {s.sentence_index}\n")
        for token, tag in zip(s.tokens, s.tags):
            buf.write(f"{token.text}\t{tag}\n")
        buf.write("\n")
    return buf.getvalue()


def create_app(store: SessionStore | None = None, ui_dir: str | None = None) -> FastAPI:
    store = store if store is not None else SessionStore()
    app = FastAPI(title="biotag curation")
    app.state.store = store

    @app.exception_handler(CurationError)
    async def handle_curation_error(request: Request, exc: CurationError):
        return _error(_status_for(exc), exc)

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        if body.annotations is not None:
            annotations = body.annotations
        elif body.annotations_jsonl is not None:
            annotations = load_annotations_jsonl(body.annotations_jsonl)
        else:
            raise CurationError("malformed_input", "provide annotations or annotations_jsonl")
        session = store.create(annotations, session_id=body.session_id)
        return {"session_id": session.session_id, "items": len(session.items)}

    @app.get("/sessions/{session_id}/batch")
    def batch(session_id: str, annotator: str, k: int = 10):
        session = store.get(session_id)
        items = session.next_batch(annotator, k)
        return {"items": [_item_payload(item) for item in items]}

    @app.get("/sessions/{session_id}/items/{item_id}")
    def get_item(session_id: str, item_id: str):
        session = store.get(session_id)
        item = session.items.get(item_id)
        if item is None:
            raise CurationError("unknown_item", f"no item {item_id!r}")
        return _item_payload(item)

    @app.post("/sessions/{session_id}/decisions")
    def decide(session_id: str, body: DecisionBody):
        entity_class = None
        if body.entity_class is not None:
            entity_class = next(
                (c for c in EntityClass if c.value == body.entity_class), None
            )
            if entity_class is None:
                raise CurationError("malformed_decision", f"unknown class {body.entity_class!r}")
        record = DecisionRecord(
            item_id=body.item_id,
            action=body.action,
            annotator=body.annotator,
            base_version=body.base_version,
            timestamp=body.timestamp if body.timestamp is not None else time.time(),
            candidate_id=body.candidate_id,
            span=body.span,
            entity_class=entity_class,
        )
        version = store.decide(session_id, record)
        return {"version": version}

    @app.get("/sessions/{session_id}/progress")
    def progress(session_id: str):
        return store.get(session_id).progress()

    @app.post("/sessions/{session_id}/export")
    def export(session_id: str):
        result = store.get(session_id).export()
        return {
            "aggregated": _corpus_text(result.aggregated),
            "per_class": {cls.value: _corpus_text(result.per_class[cls]) for cls in EntityClass},
            "warnings": result.warnings,
            "pending_treated_rejected": result.pending_treated_rejected,
        }

    if ui_dir is not None:
        from pathlib import Path

        ui_path = Path(ui_dir)

        @app.get("/", response_class=HTMLResponse)
        def index():
            return (ui_path / "index.html").read_text(encoding="utf-8")

        @app.get("/app.js")
        def app_js():
            from fastapi.responses import Response

            return Response(
                content=(ui_path / "app.js").read_text(encoding="utf-8"),
                media_type="application/javascript",
            )

        @app.get("/app.css")
        def app_css():
            from fastapi.responses import Response

            return Response(
                content=(ui_path / "app.css").read_text(encoding="utf-8"),
                media_type="text/css",
            )

    return app
