"""Gateway: the OpenAI-style completion surface over the whole stack.

handle_completion wires ingress -> controller -> compiled context -> the one
configured LLM adapter and always attaches the "interfaze" extension block
(context digest, chain id, trace summary, provenance).  Refused requests and
errors never execute a chain.  Bodies are rendered with the canonical JSON
writer so responses are byte-stable for golden tests.
"""

from __future__ import annotations

import base64
import hashlib

from .adapters import AdapterRequest, Tool
from .audio import PipelineError
from .compiler import score_relevance
from .controller import (
    ChainExecutionError,
    NoFeasibleChainError,
    StepRecord,
    enumerate_chains,
    execute_chain,
    predict_task_type,
    select_chain,
)
from .ingress import (
    Attachment,
    MediaKind,
    Request,
    SafetyVerdict,
    detect_modalities,
    normalize_request,
    summarize,
)
from .runtime import Runtime
from .schema import (
    ContextState,
    Observation,
    Provenance,
    canonical_json,
    canonical_serialize,
    content_digest,
)

__all__ = [
    "GatewayError",
    "handle_completion",
    "mock_llm_answer",
    "parse_completion_body",
    "run_sandbox",
]

REFUSAL_TEXT = "Request refused by safety policy."


class GatewayError(ValueError):
    """Malformed completion request body."""


def mock_llm_answer(prompt: str) -> str:
    """Deterministic LLM stand-in: ANSWER(first 16 hex chars of the digest)."""
    return f"ANSWER({hashlib.sha256(prompt.encode('utf-8')).hexdigest()[:16]})"


def run_sandbox(
    runtime: Runtime, code: str, limits: dict, remaining_ms: int | None = None
) -> Observation:
    """Run code through the sandbox adapter; output becomes an observation
    with source_id "sandbox", truncated at output_bytes and flagged if so."""
    descriptor = runtime.descriptor_for(Tool.SANDBOX)
    request = AdapterRequest(
        id=f"sandbox:{content_digest(code.encode())[:12]}",
        tool=Tool.SANDBOX,
        op="execute",
        payload={"code": code, "wall_ms": limits["wall_ms"], "output_bytes": limits["output_bytes"]},
    )
    if remaining_ms is not None and remaining_ms < descriptor.timeout_ms:
        from dataclasses import replace

        descriptor = replace(descriptor, timeout_ms=max(remaining_ms, 1))
    response = runtime.adapters.invoke(descriptor, request)
    if not response.ok:
        raise PipelineError(f"sandbox adapter failed: {response.error.get('code')}")
    stdout = str(response.result.get("stdout", ""))
    truncated = bool(response.result.get("truncated", False))
    max_bytes = limits["output_bytes"]
    encoded = stdout.encode("utf-8")
    if len(encoded) > max_bytes:
        stdout = encoded[:max_bytes].decode("utf-8", errors="ignore")
        truncated = True
    text = stdout if stdout else "(no output)"
    if truncated:
        text += " [truncated]"
    source = Provenance("sandbox", content_digest(code.encode("utf-8")), runtime.clock())
    return Observation(f"sandbox:{source.content_hash[:8]}", text, 1.0, (source,))


# ---------------------------------------------------------------------------
# Request body parsing.
# ---------------------------------------------------------------------------

def parse_completion_body(body: dict) -> Request:
    """Build an ingress Request from a chat-completions body.

    The query is the last user message's content; attachments and urls from
    every message are collected.  Attachment data is base64 ("declared
    encoding" per docs/api.md).
    """
    if not isinstance(body, dict):
        raise GatewayError("body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise GatewayError("messages must be a non-empty array")

    text: str | None = None
    attachments: list[Attachment] = []
    urls: list[str] = []
    for message in messages:
        if not isinstance(message, dict) or "role" not in message:
            raise GatewayError("each message needs a role")
        if message["role"] == "user" and isinstance(message.get("content"), str):
            text = message["content"]
        for raw in message.get("attachments", []) or []:
            try:
                payload = base64.b64decode(raw["data"], validate=True)
            except Exception as exc:
                raise GatewayError(f"attachment {raw.get('name', '?')!r}: bad base64") from exc
            if raw.get("encoding", "base64") != "base64":
                raise GatewayError(f"attachment {raw.get('name', '?')!r}: unsupported encoding")
            if not payload:
                raise GatewayError(f"attachment {raw.get('name', '?')!r}: empty payload")
            attachments.append(Attachment(raw.get("name", "attachment"), MediaKind.UNKNOWN, payload))
        for url in message.get("urls", []) or []:
            urls.append(str(url))

    request_id = content_digest(canonical_json(body).encode("utf-8"))[:12]
    return Request(
        id=f"req-{request_id}",
        text=text,
        attachments=tuple(attachments),
        declared_urls=tuple(urls),
    )


# ---------------------------------------------------------------------------
# Response shaping.
# ---------------------------------------------------------------------------

def _trace_summary(trace: tuple[StepRecord, ...]) -> list[dict]:
    # durations stay out of the response so goldens are byte-stable
    return [
        {"chain": r.chain_id, "step": r.step_index, "kind": r.kind, "status": r.status}
        for r in trace
    ]


def _provenance_summary(state: ContextState) -> list[dict]:
    return [
        {"source_id": sid, "content_hash": prov.content_hash}
        for sid, prov in sorted(state.provenance_index.items())
    ]


def _response(
    runtime: Runtime,
    request: Request,
    body: dict,
    content: str,
    state: ContextState,
    extension: dict,
) -> dict:
    base_extension = {
        "context_digest": content_digest(canonical_serialize(state)),
        "chain_id": None,
        "degraded": False,
        "trace": [],
        "provenance": _provenance_summary(state),
    }
    base_extension.update(extension)
    return {
        "id": f"cmpl-{request.id}",
        "object": "chat.completion",
        "created": int(runtime.clock().timestamp()),
        "model": str(body.get("model", "interfaze-beta")),
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop",
            }
        ],
        "interfaze": base_extension,
    }


def _error_body(code: str, message: str, trace: tuple[StepRecord, ...] = ()) -> dict:
    return {
        "error": {
            "code": code,
            "message": message,
            "interfaze": {"trace": _trace_summary(trace)},
        }
    }


def handle_completion(runtime: Runtime, body: dict) -> tuple[int, dict]:
    """Full request pipeline; returns (http_status, response_dict)."""
    try:
        request = normalize_request(parse_completion_body(body))
        summary = summarize(request, runtime.safety_rules)
    except GatewayError as exc:
        return 400, _error_body("BAD_REQUEST", str(exc))
    except ValueError as exc:
        return 400, _error_body("BAD_REQUEST", str(exc))

    if summary.safety is SafetyVerdict.DENY:
        response = _response(
            runtime, request, body, REFUSAL_TEXT, ContextState(),
            {"refusal": "SAFETY_DENY", "safety": "deny"},
        )
        return 200, response

    task_type = predict_task_type(summary, request.text or "", runtime.task_rules)
    try:
        candidates = enumerate_chains(task_type, summary.modalities, runtime.chains)
    except NoFeasibleChainError as exc:
        return 502, _error_body("NO_FEASIBLE_CHAIN", str(exc))

    fallbacks, degraded = select_chain(candidates, runtime.estimates, runtime.defaults.q_min)
    deadline_override = request.config_overrides.get("deadline_ms")
    try:
        result = execute_chain(
            runtime, fallbacks, request,
            int(deadline_override) if deadline_override else None,
            degraded,
        )
    except ChainExecutionError as exc:
        status = 504 if exc.code == "DEADLINE" else 502
        return status, _error_body(exc.code, f"chain execution failed: {exc.code}", exc.trace)

    _log_trace(runtime, result.trace)
    response = _response(
        runtime, request, body, result.answer, result.state,
        {
            "chain_id": result.chain_id,
            "degraded": result.degraded,
            "safety": summary.safety.value,
            "task_type": task_type,
            "trace": _trace_summary(result.trace),
        },
    )
    return 200, response


def _log_trace(runtime: Runtime, trace: tuple[StepRecord, ...]) -> None:
    if runtime.trace_log is None:
        return
    with open(runtime.trace_log, "a", encoding="utf-8") as fh:
        for r in trace:
            fh.write(
                canonical_json(
                    {
                        "chain": r.chain_id,
                        "step": r.step_index,
                        "kind": r.kind,
                        "status": r.status,
                        "duration_ms": round(r.duration_ms, 3),
                        "detail": r.detail,
                    }
                )
                + "\n"
            )
