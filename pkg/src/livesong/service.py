"""Minimal HTTP identification service.

One model and one reference database are loaded at startup and never
mutated; request handling shares them behind a forward-pass lock.  Audio
arrives either as a raw WAV body or as a multipart upload; the multipart
body is parsed by hand to keep the dependency surface small.
"""

from __future__ import annotations

import io
import logging
import re
import threading
import time
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .audio_features import (
    AudioDecodeError,
    compute_cqt,
    load_audio,
    normalize_audio,
    select_segment,
    standardize_values,
)
from .model import DeepSequences
from .retrieval import ReferenceDB, rank, reference_sequences, score_query

log = logging.getLogger(__name__)

DEFAULT_MAX_BODY_BYTES = 100 * 1024 * 1024

_BOUNDARY_RE = re.compile(r'boundary="?([^";,\s]+)"?')
_FILENAME_RE = re.compile(rb'filename="([^"]*)"')


class PayloadError(ValueError):
    """The request body cannot be interpreted as an audio upload."""


def split_multipart(content_type: str, body: bytes) -> tuple[Optional[str], bytes]:
    """Pick the uploaded file out of a multipart/form-data body.

    Returns (filename, payload); the first part carrying a filename wins,
    falling back to the first part of the body.
    """
    match = _BOUNDARY_RE.search(content_type)
    if match is None:
        raise PayloadError("multipart content type without a boundary parameter")
    delimiter = b"--" + match.group(1).encode("latin-1")
    parts = []
    for segment in body.split(delimiter)[1:]:
        if segment.startswith(b"--"):
            break
        head, sep, payload = segment.partition(b"\r\n\r\n")
        if not sep:
            continue
        if payload.endswith(b"\r\n"):
            payload = payload[:-2]
        name_match = _FILENAME_RE.search(head)
        filename = name_match.group(1).decode("latin-1") if name_match else None
        parts.append((filename, payload))
    if not parts:
        raise PayloadError("multipart body contains no parts")
    for filename, payload in parts:
        if filename:
            return filename, payload
    return parts[0]


def extract_audio_payload(content_type: str, body: bytes) -> tuple[Optional[str], bytes]:
    """Raw bodies pass through; multipart bodies are unwrapped."""
    if content_type.split(";")[0].strip().lower() == "multipart/form-data":
        return split_multipart(content_type, body)
    return None, body


def query_feature_from_wav(payload: bytes, query_id: str):
    """Decode WAV bytes and run the identification front end from 0 s."""
    samples, rate = load_audio(io.BytesIO(payload))
    clip = normalize_audio(samples, rate, source_id=query_id)
    segment = select_segment(clip, 0.0)
    return standardize_values(compute_cqt(segment, track_id=query_id).values)


def build_identify_payload(
    model,
    db: ReferenceDB,
    feature,
    query_id: str,
    checkpoint_id: str,
    top_k: int,
    db_sequences: Optional[DeepSequences] = None,
    started: Optional[float] = None,
) -> dict:
    """Score, rank, and shape one identification result for JSON output."""
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if started is None:
        started = time.perf_counter()
    ranked = rank(query_id, score_query(model, feature, db, db_sequences=db_sequences))
    results = [
        {"track_id": track_id, "song_id": db.song_for(track_id), "score": score}
        for track_id, score in ranked.top(min(top_k, len(db)))
    ]
    return {
        "query_id": query_id,
        "results": results,
        "checkpoint": checkpoint_id,
        "db_size": len(db),
        "elapsed_ms": (time.perf_counter() - started) * 1000.0,
    }


def create_app(
    model,
    db: ReferenceDB,
    checkpoint_id: str = "",
    max_body_bytes: int = DEFAULT_MAX_BODY_BYTES,
) -> FastAPI:
    """Application over an immutable (model, database) pair."""
    if getattr(model, "training", False):
        raise ValueError("model must be in evaluation mode")
    db_sequences = reference_sequences(model, db)
    forward_lock = threading.Lock()
    app = FastAPI(title="live track identification")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "db_size": len(db), "checkpoint": checkpoint_id}

    @app.post("/identify")
    async def identify(request: Request, top_k: int = 5):
        started = time.perf_counter()
        declared = request.headers.get("content-length")
        if declared is not None and declared.isdigit() and int(declared) > max_body_bytes:
            return _too_large(max_body_bytes)
        body = await request.body()
        if len(body) > max_body_bytes:
            return _too_large(max_body_bytes)
        if top_k < 1:
            return _bad_request(f"top_k must be >= 1, got {top_k}")
        content_type = request.headers.get("content-type", "")
        try:
            filename, payload = extract_audio_payload(content_type, body)
        except PayloadError as exc:
            return _bad_request(str(exc))
        if not payload:
            return _bad_request("empty audio payload")
        query_id = filename.rsplit(".", 1)[0] if filename else "query"

        def score() -> dict:
            feature = query_feature_from_wav(payload, query_id)
            with forward_lock:
                return build_identify_payload(
                    model,
                    db,
                    feature,
                    query_id,
                    checkpoint_id,
                    top_k,
                    db_sequences=db_sequences,
                    started=started,
                )

        try:
            return await run_in_threadpool(score)
        except AudioDecodeError as exc:
            return _bad_request(str(exc))

    return app


def _bad_request(reason: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"error": reason})


def _too_large(limit: int) -> JSONResponse:
    return JSONResponse(
        status_code=413,
        content={"error": f"payload exceeds the {limit} byte limit"},
    )
