"""FastAPI wiring for the sidecar wire contract.

Endpoints::

    GET  /info        -> {"model", "vocab_size", "dim", "mode", "vocab_sha256"}
    POST /logits      {"token_ids": [int], "target_position": int}
                      -> {"logits": [float; vocab_size]}
    POST /tokenize    {"text": str} -> {"token_ids": [int]}
    GET  /embeddings  -> binary embedding table

All failures, including malformed JSON bodies, come back as
{"error": str} with a non-2xx status.
"""

from __future__ import annotations

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .service import ModelService, ServiceError


class LogitsRequest(BaseModel):
    token_ids: list[int]
    target_position: int


class TokenizeRequest(BaseModel):
    text: str


def create_app(service: ModelService) -> FastAPI:
    app = FastAPI(title="cape-server", docs_url=None, redoc_url=None)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc.errors())})

    @app.exception_handler(ServiceError)
    async def on_service_error(request: Request, exc: ServiceError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def on_unexpected_error(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    @app.get("/info")
    def info():
        return service.info()

    @app.post("/tokenize")
    def tokenize(body: TokenizeRequest):
        return {"token_ids": service.tokenize(body.text)}

    @app.post("/logits")
    def logits(body: LogitsRequest):
        vec = service.logits(body.token_ids, body.target_position)
        return {"logits": [float(v) for v in vec]}

    @app.get("/embeddings")
    def embeddings():
        return Response(
            content=service.embeddings_payload(),
            media_type="application/octet-stream",
        )

    return app
