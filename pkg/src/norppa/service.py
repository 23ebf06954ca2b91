"""HTTP JSON API over a loaded pipeline: query, browse, confirm.

Every response carries the active config hash so clients can detect artifact
mismatches.  The index is the only mutable state; confirmations go through
the pipeline's write-ahead journal and are serialized by the index lock.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, UploadFile
from fastapi.responses import JSONResponse

from .config import PipelineConfig
from .encoder import load_embedding
from .errors import NorppaError, StageError
from .index import IdentityIndex
from .pipeline import QueryResult, ReidPipeline, VerifiedMatch
from .vocab import load_vocabulary

_QUERY_CACHE_LIMIT = 256


def _http_error(exc: NorppaError) -> HTTPException:
    message = str(exc)
    if "duplicate" in message:
        code = 409
    elif "unknown individual" in message or "not found" in message:
        code = 404
    else:
        code = 400
    detail = {"error": message}
    if isinstance(exc, StageError):
        detail["stage"] = exc.stage
    return HTTPException(status_code=code, detail=detail)


def create_app(pipeline: ReidPipeline, index_path: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="norppa", docs_url=None, redoc_url=None)
    config_hash = pipeline.config.hash_hex()
    state = {"embeddings": {}, "descriptor_refs": {}}

    def _remember(image_id: str, embedding: np.ndarray, descriptor_ref: str | None) -> None:
        cache = state["embeddings"]
        if len(cache) >= _QUERY_CACHE_LIMIT:
            cache.pop(next(iter(cache)))
        cache[image_id] = embedding
        if descriptor_ref:
            state["descriptor_refs"][image_id] = descriptor_ref

    @app.post("/query")
    async def query(file: UploadFile = File(...)):
        payload = await file.read()
        stem = Path(file.filename or "query").stem
        try:
            if payload[:4] == b"NRPF":
                with tempfile.NamedTemporaryFile(suffix=".nrpf", delete=False) as tmp:
                    tmp.write(payload)
                fv = load_embedding(tmp.name)
                Path(tmp.name).unlink()
                embedding = fv.values
                if pipeline.kpca is not None:
                    raise StageError("encode", "precomputed embeddings are not supported with KPCA enabled")
                if pipeline.index is None or len(pipeline.index) == 0:
                    raise StageError("index", "empty database")
                ranked = pipeline.index.query_top_individuals(embedding, pipeline.config.top_k)
                result = QueryResult(
                    query_image_id=stem,
                    matches=[
                        VerifiedMatch(
                            individual_id=m.entry.individual_id,
                            image_id=m.entry.image_id,
                            distance=m.distance,
                            rank=m.rank,
                            status="unverified",
                        )
                        for m in ranked
                    ],
                    config_hash=config_hash,
                )
            else:
                suffix = ".nrpd" if payload[:4] == b"NRPD" else (Path(file.filename or "q.png").suffix or ".png")
                with tempfile.NamedTemporaryFile(suffix=suffix, delete=False) as tmp:
                    tmp.write(payload)
                source = Path(tmp.name)
                try:
                    embedding, dset = pipeline.run(source)
                    dset.image_id = stem
                    result = pipeline.query_and_verify(dset)
                finally:
                    source.unlink(missing_ok=True)
        except NorppaError as exc:
            raise _http_error(exc) from exc
        _remember(stem, embedding, None)
        body = result.to_dict()
        body["config-hash"] = config_hash
        return JSONResponse(body)

    @app.get("/individuals")
    def individuals():
        index = pipeline.index or IdentityIndex()
        ids = index.individuals() if len(index) else []
        return {"individuals": ids, "count": len(ids), "config-hash": config_hash}

    @app.get("/individuals/{individual_id}/images")
    def images(individual_id: str):
        index = pipeline.index
        if index is None or individual_id not in index.individuals():
            raise HTTPException(status_code=404, detail={"error": f"unknown individual: {individual_id}"})
        return {
            "individual-id": individual_id,
            "images": index.images_of(individual_id),
            "config-hash": config_hash,
        }

    @app.post("/confirm")
    def confirm(body: dict):
        image_id = body.get("query-image-id")
        if not image_id:
            raise HTTPException(status_code=400, detail={"error": "query-image-id is required"})
        new = bool(body.get("new", False))
        individual_id = body.get("individual-id")
        if not new and not individual_id:
            raise HTTPException(status_code=400, detail={"error": "individual-id or new:true is required"})
        ref = body.get("embedding-ref")
        if ref:
            try:
                embedding = load_embedding(ref).values
            except (OSError, NorppaError) as exc:
                raise HTTPException(status_code=400, detail={"error": f"bad embedding-ref: {exc}"}) from exc
        elif image_id in state["embeddings"]:
            embedding = state["embeddings"][image_id]
        else:
            raise HTTPException(
                status_code=404,
                detail={"error": f"no cached embedding for {image_id}; pass embedding-ref"},
            )
        try:
            used = pipeline.confirm_match(
                query_image_id=image_id,
                individual_id=individual_id,
                embedding=embedding,
                descriptor_ref=body.get("descriptor-ref") or state["descriptor_refs"].get(image_id),
                new_individual=new,
            )
        except NorppaError as exc:
            raise _http_error(exc) from exc
        if index_path is not None:
            pipeline.index.save(index_path)
        return {"status": "confirmed", "individual-id": used, "config-hash": config_hash}

    @app.get("/health")
    def health():
        entries = len(pipeline.index) if pipeline.index is not None else 0
        return {"status": "ok", "entries": entries, "config-hash": config_hash}

    @app.get("/config")
    def config():
        import json as _json

        return {"config": _json.loads(pipeline.config.canonical_json()), "config-hash": config_hash}

    return app


def build_pipeline(
    config_path: str | Path | None,
    index_path: str | Path | None,
    vocab_path: str | Path | None,
    journal_path: str | Path | None = None,
) -> ReidPipeline:
    """Assemble a pipeline from artifact files (missing pieces stay None)."""
    config = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    vocab = load_vocabulary(vocab_path) if vocab_path else None
    index = IdentityIndex.load(index_path) if index_path and Path(index_path).exists() else None
    return ReidPipeline(config, vocab=vocab, index=index, journal_path=journal_path)
