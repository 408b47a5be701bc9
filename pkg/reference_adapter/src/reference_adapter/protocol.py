"""Stdio protocol loop: one canonical-JSON response line per request line.

Matches the gateway's adapter protocol document bit-exactly: requests are
{id, tool, op, payload}; responses {id, ok, result|error}; floats render
with six decimal places and object keys sort lexicographically.
"""

from __future__ import annotations

import base64
import json
import math
import re
import struct
from typing import IO

from .vad import EnergyVadConfig, energy_vad

__all__ = ["canonical_json", "handle_request", "protocol_loop"]


def canonical_json(value: object) -> str:
    """Sorted keys, six-decimal floats, compact separators (format doc)."""
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        out = ['"']
        for ch in value:
            if ch == '"':
                out.append('\\"')
            elif ch == "\\":
                out.append("\\\\")
            elif ch == "\n":
                out.append("\\n")
            elif ch == "\r":
                out.append("\\r")
            elif ch == "\t":
                out.append("\\t")
            elif ord(ch) < 0x20:
                out.append(f"\\u{ord(ch):04x}")
            else:
                out.append(ch)
        out.append('"')
        return "".join(out)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite float")
        if value == 0.0:
            value = 0.0
        return f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ",".join(
            f"{canonical_json(k)}:{canonical_json(value[k])}" for k in sorted(value)
        ) + "}"
    raise TypeError(f"not serializable: {type(value)!r}")


def _decode_pcm16(blob: dict) -> list[float]:
    raw = base64.b64decode(blob["data"])
    count = len(raw) // 2
    ints = struct.unpack(f"<{count}h", raw[: count * 2])
    return [v / 32767.0 for v in ints]


def _op_vad(payload: dict) -> dict:
    config = EnergyVadConfig(
        frame_ms=float(payload.get("frame_ms", 10.0)),
        energy_threshold=float(payload.get("energy_threshold", 0.5)),
    )
    sample_rate = int(payload["sample_rate"])
    samples = _decode_pcm16(payload["audio"])
    probs = energy_vad(samples, sample_rate, config)
    return {"probs": probs, "frame_hop_s": config.frame_ms / 1000.0}


def _op_classify(payload: dict) -> dict:
    text = payload.get("text", "")
    for rule in payload.get("rules", []):
        if re.search(rule["pattern"], text, re.IGNORECASE):
            return {"label": rule["label"]}
    return {"label": "general"}


def _op_complete(payload: dict) -> dict:
    # echo LLM: the distilled prompt comes straight back
    return {"text": payload.get("prompt", "")}


_OPS = {
    "vad": _op_vad,
    "classify": _op_classify,
    "complete": _op_complete,
}


def _error(request_id: str, code: str, message: str) -> dict:
    return {"id": request_id, "ok": False, "error": {"code": code, "message": message}}


def handle_request(line: str, lineno: int) -> dict:
    """One request line to one response object."""
    try:
        message = json.loads(line)
        if not isinstance(message, dict):
            raise ValueError("request must be a JSON object")
        request_id = message["id"]
        op = message["op"]
        payload = message.get("payload", {})
    except (ValueError, KeyError, TypeError) as exc:
        return _error("", "PROTOCOL", f"line {lineno}: malformed request: {exc}")
    handler = _OPS.get(op)
    if handler is None:
        return _error(request_id, "UNSUPPORTED", f"unknown op {op!r}")
    try:
        return {"id": request_id, "ok": True, "result": handler(payload)}
    except Exception as exc:
        return _error(request_id, "UNAVAILABLE", f"op {op!r} failed: {exc}")


def protocol_loop(stdin: IO[str], stdout: IO[str]) -> None:
    """Serve until end-of-stream; exactly one response line per request line,
    emitted in request order."""
    for lineno, line in enumerate(stdin, start=1):
        if not line.strip():
            continue
        response = handle_request(line, lineno)
        stdout.write(canonical_json(response) + "\n")
        stdout.flush()
