"""HTTP surface: POST /v1/chat/completions, non-streaming.

Bodies in and out are UTF-8 JSON; responses use the canonical writer so a
given request always produces identical bytes (fixtures in docs/api.md).
"""

from __future__ import annotations

import json

from fastapi import FastAPI, Request, Response

from .gateway import handle_completion
from .runtime import Runtime
from .schema import canonical_json

__all__ = ["create_app"]


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="interfaze gateway", docs_url=None, redoc_url=None)
    app.state.runtime = runtime

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request) -> Response:
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            payload = {"error": {"code": "BAD_REQUEST", "message": f"invalid JSON: {exc}"}}
            return Response(canonical_json(payload), status_code=400, media_type="application/json")
        status, payload = handle_completion(runtime, body)
        return Response(canonical_json(payload), status_code=status, media_type="application/json")

    return app
