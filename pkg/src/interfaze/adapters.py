"""Uniform invocation layer for perception/LLM/sandbox processes.

One wire protocol everywhere: newline-delimited UTF-8 JSON, requests
{id, tool, op, payload} and responses {id, ok, result|error}.  Transports are
an in-process mock (for deterministic tests), a persistent stdio subprocess,
or a TCP peer.  Batching, an LRU result cache, and per-call timeouts live
here so pipelines never talk to a process directly.
"""

from __future__ import annotations

import json
import queue
import shlex
import socket
import subprocess
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .schema import canonical_json, content_digest

__all__ = [
    "AdapterDescriptor",
    "AdapterRequest",
    "AdapterResponse",
    "AdapterRuntime",
    "ERR_PROTOCOL",
    "ERR_TIMEOUT",
    "ERR_UNAVAILABLE",
    "ERR_UNSUPPORTED",
    "MockFailure",
    "Tool",
    "Transport",
    "cache_key",
    "decode_response_line",
    "encode_request_line",
    "table_mock",
]

ERR_TIMEOUT = "TIMEOUT"
ERR_PROTOCOL = "PROTOCOL"
ERR_UNAVAILABLE = "UNAVAILABLE"
ERR_UNSUPPORTED = "UNSUPPORTED"


class Tool(str, Enum):
    OCR = "ocr"
    ASR = "asr"
    VAD = "vad"
    DIARIZE_EMBED = "diarize_embed"
    DETECT = "detect"
    CLASSIFY = "classify"
    RENDER_PAGE = "render_page"
    SEGMENT_MASK = "segment_mask"
    LLM = "llm"
    SANDBOX = "sandbox"


class Transport(str, Enum):
    IN_PROCESS_MOCK = "in_process_mock"
    STDIO = "stdio"
    TCP = "tcp"


@dataclass(frozen=True, slots=True)
class AdapterDescriptor:
    """How to reach one adapter.  endpoint is a command line for stdio
    transports and host:port for tcp; mocks ignore it."""

    adapter_id: str
    tool: Tool
    transport: Transport
    timeout_ms: int = 5000
    batch_max: int = 8
    cacheable: bool = False
    endpoint: str = ""

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError(f"adapter {self.adapter_id!r}: timeout_ms must be > 0")
        if self.batch_max < 1:
            raise ValueError(f"adapter {self.adapter_id!r}: batch_max must be >= 1")


@dataclass(frozen=True, slots=True)
class AdapterRequest:
    id: str
    tool: Tool
    op: str
    payload: object


@dataclass(frozen=True, slots=True)
class AdapterResponse:
    id: str
    ok: bool
    result: object = None
    error: dict | None = None

    def __post_init__(self) -> None:
        if self.ok == (self.error is not None):
            raise ValueError("exactly one of result/error must be present")

    @classmethod
    def success(cls, request_id: str, result: object) -> AdapterResponse:
        return cls(request_id, True, result=result)

    @classmethod
    def failure(cls, request_id: str, code: str, message: str) -> AdapterResponse:
        return cls(request_id, False, error={"code": code, "message": message})


def cache_key(request: AdapterRequest) -> str:
    """Digest of (tool, op, canonical payload); the id never participates."""
    blob = canonical_json({"tool": request.tool.value, "op": request.op, "payload": request.payload})
    return content_digest(blob.encode("utf-8"))


def encode_request_line(request: AdapterRequest) -> bytes:
    body = canonical_json(
        {"id": request.id, "tool": request.tool.value, "op": request.op, "payload": request.payload}
    )
    return body.encode("utf-8") + b"\n"


def decode_response_line(line: bytes | str) -> AdapterResponse:
    """Parse one response line; malformed content raises ValueError."""
    data = json.loads(line)
    if not isinstance(data, dict) or "id" not in data or "ok" not in data:
        raise ValueError("response missing id/ok fields")
    if data["ok"]:
        if "result" not in data:
            raise ValueError("ok response missing result")
        return AdapterResponse.success(data["id"], data["result"])
    error = data.get("error")
    if not isinstance(error, dict) or "code" not in error:
        raise ValueError("error response missing error.code")
    return AdapterResponse.failure(data["id"], error["code"], error.get("message", ""))


class MockFailure(Exception):
    """Raised by mock handlers to produce a structured error response."""

    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(message)
        self.code = code


MockHandler = Callable[[AdapterRequest], object]


def table_mock(table: dict[str, object]) -> MockHandler:
    """Mock handler serving canned results keyed by request cache_key digest.

    A table value of {"__error__": {"code", "message"}} produces that error.
    """

    def handler(request: AdapterRequest) -> object:
        key = cache_key(request)
        if key not in table:
            raise MockFailure(ERR_UNSUPPORTED, f"no canned response for digest {key[:12]}")
        value = table[key]
        if isinstance(value, dict) and "__error__" in value:
            err = value["__error__"]
            raise MockFailure(err.get("code", ERR_UNAVAILABLE), err.get("message", ""))
        return value

    return handler


class _LruCache:
    """Bounded LRU keyed by cache_key digest; concurrent-read safe."""

    def __init__(self, capacity: int = 1024) -> None:
        self._capacity = capacity
        self._data: OrderedDict[str, object] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: str) -> tuple[bool, object]:
        with self._lock:
            if key not in self._data:
                return False, None
            self._data.move_to_end(key)
            return True, self._data[key]

    def put(self, key: str, value: object) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self._capacity:
                self._data.popitem(last=False)

    def __len__(self) -> int:
        return len(self._data)


class _StdioConnection:
    """One persistent subprocess; a reader thread feeds a response queue."""

    def __init__(self, command: str) -> None:
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
        )
        self.lines: queue.Queue[bytes | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(None)  # EOF sentinel

    def alive(self) -> bool:
        return self.proc.poll() is None

    def close(self) -> None:
        if self.alive():
            self.proc.terminate()
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class AdapterRuntime:
    """Shared invocation state: descriptors, mock handlers, cache, counters.

    invoke/invoke_batched are safe to call concurrently; stdio connections are
    serialized per descriptor, mocks run on a worker pool so timeouts hold.
    """

    def __init__(self, cache_capacity: int = 1024) -> None:
        self.descriptors: dict[str, AdapterDescriptor] = {}
        self._mocks: dict[str, MockHandler] = {}
        self._cache = _LruCache(cache_capacity)
        self._stdio: dict[str, _StdioConnection] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix="adapter-mock")
        self.transport_batches: dict[str, int] = {}

    # -- registration ----------------------------------------------------

    def register(self, descriptor: AdapterDescriptor, mock: MockHandler | None = None) -> None:
        self.descriptors[descriptor.adapter_id] = descriptor
        self._locks[descriptor.adapter_id] = threading.Lock()
        if descriptor.transport is Transport.IN_PROCESS_MOCK:
            if mock is None:
                raise ValueError(f"adapter {descriptor.adapter_id!r}: mock transport needs a handler")
            self._mocks[descriptor.adapter_id] = mock

    def descriptor(self, adapter_id: str) -> AdapterDescriptor:
        try:
            return self.descriptors[adapter_id]
        except KeyError:
            raise KeyError(f"unknown adapter {adapter_id!r}") from None

    def close(self) -> None:
        for conn in self._stdio.values():
            conn.close()
        self._stdio.clear()
        self._pool.shutdown(wait=False)

    # -- public invocation -----------------------------------------------

    def invoke(self, descriptor: AdapterDescriptor, request: AdapterRequest) -> AdapterResponse:
        """Single-request invoke; returns a matching-id response or an error
        response (TIMEOUT / PROTOCOL / UNAVAILABLE), never raises for
        transport trouble."""
        return self.invoke_batched(descriptor, [request])[0]

    def invoke_batched(
        self, descriptor: AdapterDescriptor, requests: list[AdapterRequest]
    ) -> list[AdapterResponse]:
        """Invoke many requests; output is positionally aligned with input.

        Requests are grouped into transport batches of <= batch_max.  When the
        descriptor is cacheable, identical logical requests (same cache key)
        hit the transport once; per-item errors never fail the whole batch.
        """
        if not requests:
            raise ValueError("invoke_batched requires >= 1 request")
        n = len(requests)
        responses: list[AdapterResponse | None] = [None] * n

        if descriptor.cacheable:
            key_to_indices: OrderedDict[str, list[int]] = OrderedDict()
            for i, request in enumerate(requests):
                key = cache_key(request)
                hit, value = self._cache.get(key)
                if hit:
                    responses[i] = AdapterResponse.success(request.id, value)
                else:
                    key_to_indices.setdefault(key, []).append(i)
            pending = [(key, indices[0]) for key, indices in key_to_indices.items()]
            for chunk in _chunks(pending, descriptor.batch_max):
                batch = [requests[i] for _, i in chunk]
                results = self._send_batch(descriptor, batch)
                for (key, _), response in zip(chunk, results):
                    if response.ok:
                        self._cache.put(key, response.result)
                    for i in key_to_indices[key]:
                        responses[i] = _rekey(response, requests[i].id)
        else:
            indexed = list(enumerate(requests))
            for chunk in _chunks(indexed, descriptor.batch_max):
                results = self._send_batch(descriptor, [r for _, r in chunk])
                for (i, _), response in zip(chunk, results):
                    responses[i] = response

        assert all(r is not None for r in responses)
        return responses  # type: ignore[return-value]

    # -- transports --------------------------------------------------------

    def _send_batch(
        self, descriptor: AdapterDescriptor, batch: list[AdapterRequest]
    ) -> list[AdapterResponse]:
        self.transport_batches[descriptor.adapter_id] = (
            self.transport_batches.get(descriptor.adapter_id, 0) + 1
        )
        if descriptor.transport is Transport.IN_PROCESS_MOCK:
            return self._send_mock(descriptor, batch)
        if descriptor.transport is Transport.STDIO:
            return self._send_stdio(descriptor, batch)
        return self._send_tcp(descriptor, batch)

    def _send_mock(
        self, descriptor: AdapterDescriptor, batch: list[AdapterRequest]
    ) -> list[AdapterResponse]:
        handler = self._mocks[descriptor.adapter_id]
        out: list[AdapterResponse] = []
        for request in batch:
            future = self._pool.submit(handler, request)
            try:
                value = future.result(timeout=descriptor.timeout_ms / 1000.0)
            except FutureTimeoutError:
                future.cancel()
                out.append(AdapterResponse.failure(request.id, ERR_TIMEOUT, "mock handler timed out"))
                continue
            except MockFailure as exc:
                out.append(AdapterResponse.failure(request.id, exc.code, str(exc)))
                continue
            except Exception as exc:  # handler bug == unreachable process
                out.append(AdapterResponse.failure(request.id, ERR_UNAVAILABLE, str(exc)))
                continue
            if isinstance(value, AdapterResponse):
                if value.id != request.id:
                    out.append(
                        AdapterResponse.failure(
                            request.id, ERR_PROTOCOL, f"reply id {value.id!r} does not match request"
                        )
                    )
                else:
                    out.append(value)
            else:
                out.append(AdapterResponse.success(request.id, value))
        return out

    def _send_stdio(
        self, descriptor: AdapterDescriptor, batch: list[AdapterRequest]
    ) -> list[AdapterResponse]:
        with self._locks[descriptor.adapter_id]:
            conn = self._stdio.get(descriptor.adapter_id)
            if conn is None or not conn.alive():
                try:
                    conn = _StdioConnection(descriptor.endpoint)
                except OSError as exc:
                    return [
                        AdapterResponse.failure(r.id, ERR_UNAVAILABLE, f"spawn failed: {exc}")
                        for r in batch
                    ]
                self._stdio[descriptor.adapter_id] = conn
            try:
                assert conn.proc.stdin is not None
                for request in batch:
                    conn.proc.stdin.write(encode_request_line(request))
                conn.proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                return [
                    AdapterResponse.failure(r.id, ERR_UNAVAILABLE, f"write failed: {exc}")
                    for r in batch
                ]
            return _collect(batch, descriptor.timeout_ms, lambda t: conn.lines.get(timeout=t))

    def _send_tcp(
        self, descriptor: AdapterDescriptor, batch: list[AdapterRequest]
    ) -> list[AdapterResponse]:
        host, _, port = descriptor.endpoint.rpartition(":")
        try:
            sock = socket.create_connection((host, int(port)), timeout=descriptor.timeout_ms / 1000.0)
        except OSError as exc:
            return [
                AdapterResponse.failure(r.id, ERR_UNAVAILABLE, f"connect failed: {exc}")
                for r in batch
            ]
        with sock:
            sock.sendall(b"".join(encode_request_line(r) for r in batch))
            reader = sock.makefile("rb")

            def read_line(timeout: float) -> bytes | None:
                sock.settimeout(max(timeout, 0.001))
                try:
                    return reader.readline() or None
                except OSError:
                    raise queue.Empty from None

            return _collect(batch, descriptor.timeout_ms, read_line)


def _rekey(response: AdapterResponse, request_id: str) -> AdapterResponse:
    if response.id == request_id:
        return response
    return AdapterResponse(request_id, response.ok, response.result, response.error)


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _collect(
    batch: list[AdapterRequest],
    timeout_ms: int,
    read_line: Callable[[float], bytes | None],
) -> list[AdapterResponse]:
    """Read lines until every id in *batch* is answered or the deadline hits.

    Responses may arrive in any order; a decodable line with an id outside the
    batch, or an undecodable line, poisons the remaining items with PROTOCOL.
    """
    deadline = time.monotonic() + timeout_ms / 1000.0
    wanted = {r.id: r for r in batch}
    got: dict[str, AdapterResponse] = {}
    protocol_error: str | None = None

    while len(got) < len(wanted) and protocol_error is None:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        try:
            line = read_line(remaining)
        except queue.Empty:
            break
        if line is None:  # EOF: process went away
            for rid in wanted:
                if rid not in got:
                    got[rid] = AdapterResponse.failure(rid, ERR_UNAVAILABLE, "adapter stream closed")
            break
        try:
            response = decode_response_line(line)
        except ValueError as exc:
            protocol_error = f"malformed reply: {exc}"
            break
        if response.id not in wanted:
            protocol_error = f"reply id {response.id!r} does not match any request"
            break
        got[response.id] = response

    out: list[AdapterResponse] = []
    for request in batch:
        if request.id in got:
            out.append(got[request.id])
        elif protocol_error is not None:
            out.append(AdapterResponse.failure(request.id, ERR_PROTOCOL, protocol_error))
        else:
            out.append(AdapterResponse.failure(request.id, ERR_TIMEOUT, f"no reply within {timeout_ms} ms"))
    return out
