"""FastAPI application exposing a masked-LM backend over the bridge protocol
(see PROTOCOL.md at the repository root for the exact wire format)."""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backend import HfMlmBackend
from .jobs import FinetuneBusy, JobNotFound, JobRegistry

PROTOCOL_NAME = "mlmbias-bridge/1"


class TokenizeRequest(BaseModel):
    text: str


class VocabRequest(BaseModel):
    token: str


class SequenceRequest(BaseModel):
    ids: list[int]
    position: int
    attention_mask: list[int] | None = None


class ProbRequest(SequenceRequest):
    token_index: int


class DistributionRequest(SequenceRequest):
    top_k: int | None = Field(default=None, ge=1)


class FinetuneRequest(BaseModel):
    sentences: list[str]
    config: dict = Field(default_factory=dict)


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": {"code": code, "message": message}})


def create_app(backend: HfMlmBackend, registry: JobRegistry | None = None) -> FastAPI:
    app = FastAPI(title="mlmbias bridge", docs_url=None, redoc_url=None)
    jobs = registry if registry is not None else JobRegistry()

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return _error(400, "bad_request", str(exc))

    @app.exception_handler(IndexError)
    async def _index_error(request: Request, exc: IndexError):
        return _error(400, "token_not_in_vocab", str(exc))

    @app.exception_handler(FinetuneBusy)
    async def _busy(request: Request, exc: FinetuneBusy):
        return _error(409, "finetune_busy", str(exc))

    @app.exception_handler(JobNotFound)
    async def _job_not_found(request: Request, exc: JobNotFound):
        return _error(404, "job_not_found", str(exc))

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception):
        return _error(500, "internal", f"{type(exc).__name__}: {exc}")

    @app.get("/v1/health")
    def health():
        return {
            "status": "ok",
            "protocol": PROTOCOL_NAME,
            "model": backend.name,
            "mask_token": backend.mask_token,
            "mask_token_id": backend.mask_token_id,
            "pad_token": backend.pad_token,
            "pad_token_id": backend.pad_token_id,
            "vocab_size": backend.vocab_size,
        }

    @app.post("/v1/tokenize")
    def tokenize(request: TokenizeRequest):
        tokenized = backend.tokenize(request.text)
        return {"ids": tokenized.ids, "tokens": tokenized.tokens,
                "word_ids": tokenized.word_ids}

    @app.post("/v1/vocab")
    def vocab(request: VocabRequest):
        return {"index": backend.vocab_index(request.token)}

    @app.post("/v1/prob")
    def prob(request: ProbRequest):
        value = backend.probability(request.ids, request.position,
                                    request.token_index, request.attention_mask)
        return {"probability": value}

    @app.post("/v1/distribution")
    def distribution(request: DistributionRequest):
        dist = backend.distribution(request.ids, request.position,
                                    request.attention_mask)
        if request.top_k is not None:
            top = np.argsort(dist)[::-1][: request.top_k]
            return {"vocab_size": int(dist.size),
                    "sparse": [[int(i), float(dist[i])] for i in top]}
        return {"vocab_size": int(dist.size), "probabilities": dist.tolist()}

    @app.post("/v1/finetune")
    def finetune(request: FinetuneRequest):
        if not request.sentences:
            raise ValueError("sentences must be non-empty")
        job = jobs.start(backend, request.sentences, request.config)
        return {"job_id": job.job_id}

    @app.get("/v1/finetune/{job_id}")
    def finetune_status(job_id: str):
        return jobs.status(job_id).as_dict()

    return app
