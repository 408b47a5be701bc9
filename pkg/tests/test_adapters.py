"""Invocation layer: alignment, caching, batching, timeouts, wire codec."""

from __future__ import annotations

import random
import sys
import time

import pytest

from interfaze.adapters import (
    ERR_PROTOCOL,
    ERR_TIMEOUT,
    ERR_UNAVAILABLE,
    AdapterDescriptor,
    AdapterRequest,
    AdapterResponse,
    AdapterRuntime,
    MockFailure,
    Tool,
    Transport,
    cache_key,
    decode_response_line,
    encode_request_line,
    table_mock,
)

ECHO_SCRIPT = r"""
import json, sys
for line in sys.stdin:
    msg = json.loads(line)
    sys.stdout.write(json.dumps({"id": msg["id"], "ok": True, "result": msg["payload"]}) + "\n")
    sys.stdout.flush()
"""


def echo(request: AdapterRequest):
    return request.payload


def req(i: str = "1", payload: object = "p", op: str = "echo", tool: Tool = Tool.CLASSIFY) -> AdapterRequest:
    return AdapterRequest(i, tool, op, payload)


@pytest.fixture
def runtime():
    rt = AdapterRuntime()
    yield rt
    rt.close()


def mock_descriptor(adapter_id="m1", **kwargs) -> AdapterDescriptor:
    defaults = dict(tool=Tool.CLASSIFY, transport=Transport.IN_PROCESS_MOCK, timeout_ms=500)
    defaults.update(kwargs)
    return AdapterDescriptor(adapter_id=adapter_id, **defaults)


class TestInvoke:
    def test_echo(self, runtime):
        d = mock_descriptor()
        runtime.register(d, echo)
        response = runtime.invoke(d, req(payload={"x": 1}))
        assert response.ok and response.result == {"x": 1} and response.id == "1"

    def test_sleeping_handler_times_out(self, runtime):
        d = mock_descriptor(timeout_ms=50)
        runtime.register(d, lambda r: time.sleep(0.2))
        response = runtime.invoke(d, req())
        assert not response.ok and response.error["code"] == ERR_TIMEOUT

    def test_mismatched_id_is_protocol_error(self, runtime):
        d = mock_descriptor()
        runtime.register(d, lambda r: AdapterResponse.success("other-id", "x"))
        response = runtime.invoke(d, req("1"))
        assert not response.ok and response.error["code"] == ERR_PROTOCOL

    def test_handler_exception_is_unavailable(self, runtime):
        d = mock_descriptor()
        runtime.register(d, lambda r: 1 / 0)
        response = runtime.invoke(d, req())
        assert not response.ok and response.error["code"] == ERR_UNAVAILABLE

    def test_timeout_bound_with_slack(self, runtime):
        d = mock_descriptor(timeout_ms=100)
        runtime.register(d, lambda r: time.sleep(5))
        start = time.monotonic()
        runtime.invoke(d, req())
        assert time.monotonic() - start < 0.1 + 1.0  # generous scheduling slack


class TestCacheKey:
    def test_same_payload_same_key(self):
        assert cache_key(req("a", {"k": [1, 2]})) == cache_key(req("b", {"k": [1, 2]}))

    def test_different_op_different_key(self):
        assert cache_key(req(op="x")) != cache_key(req(op="y"))

    def test_sampled_non_collision(self):
        rng = random.Random(11)
        seen = set()
        for _ in range(1000):
            payload = {"v": rng.random(), "n": rng.randint(0, 10**9)}
            key = cache_key(req(payload=payload))
            assert key not in seen
            seen.add(key)


class TestInvokeBatched:
    def test_alignment_and_batch_count(self, runtime):
        d = mock_descriptor(batch_max=2)
        runtime.register(d, echo)
        requests = [req(str(i), payload=i) for i in range(5)]
        responses = runtime.invoke_batched(d, requests)
        assert [r.id for r in responses] == [str(i) for i in range(5)]
        assert [r.result for r in responses] == list(range(5))
        assert runtime.transport_batches["m1"] >= 3

    def test_identical_cacheable_requests_hit_transport_once(self, runtime):
        calls = []

        def counting(request):
            calls.append(request.id)
            return "v"

        d = mock_descriptor(cacheable=True)
        runtime.register(d, counting)
        responses = runtime.invoke_batched(d, [req("a", "same"), req("b", "same"), req("c", "same")])
        assert len(calls) == 1
        assert all(r.ok and r.result == "v" for r in responses)
        assert [r.id for r in responses] == ["a", "b", "c"]

    def test_cache_hits_skip_transport_across_calls(self, runtime):
        d = mock_descriptor(cacheable=True)
        runtime.register(d, echo)
        runtime.invoke(d, req("a", "x"))
        batches_before = runtime.transport_batches["m1"]
        response = runtime.invoke(d, req("b", "x"))
        assert response.ok and response.result == "x"
        assert runtime.transport_batches["m1"] == batches_before

    def test_per_item_failure_does_not_poison_batch(self, runtime):
        def flaky(request):
            if request.id == "2":
                raise MockFailure(ERR_TIMEOUT, "injected")
            return request.payload

        d = mock_descriptor(batch_max=10)
        runtime.register(d, flaky)
        responses = runtime.invoke_batched(d, [req("1", 1), req("2", 2), req("3", 3)])
        assert responses[0].ok and responses[2].ok
        assert not responses[1].ok and responses[1].error["code"] == ERR_TIMEOUT

    def test_cache_soundness_vs_uncached(self, runtime):
        rng = random.Random(5)
        requests = [req(str(i), payload=rng.randint(0, 3)) for i in range(20)]
        cached = mock_descriptor("c", cacheable=True)
        uncached = mock_descriptor("u", cacheable=False)
        runtime.register(cached, echo)
        runtime.register(uncached, echo)
        a = [r.result for r in runtime.invoke_batched(cached, requests)]
        b = [r.result for r in runtime.invoke_batched(uncached, requests)]
        assert a == b


class TestTableMock:
    def test_canned_result_and_unknown_digest(self, runtime):
        request = req("1", {"q": 1})
        table = {cache_key(request): {"answer": 42}}
        d = mock_descriptor()
        runtime.register(d, table_mock(table))
        assert runtime.invoke(d, request).result == {"answer": 42}
        miss = runtime.invoke(d, req("2", {"q": 2}))
        assert not miss.ok

    def test_canned_error(self, runtime):
        request = req("1")
        table = {cache_key(request): {"__error__": {"code": ERR_UNAVAILABLE, "message": "down"}}}
        d = mock_descriptor()
        runtime.register(d, table_mock(table))
        response = runtime.invoke(d, request)
        assert not response.ok and response.error["code"] == ERR_UNAVAILABLE


class TestWireCodec:
    def test_round_trip(self):
        line = encode_request_line(req("7", {"a": [1, "x"]}))
        assert line.endswith(b"\n")
        ok = decode_response_line(b'{"id": "7", "ok": true, "result": 3}')
        assert ok.ok and ok.result == 3
        err = decode_response_line(b'{"id": "7", "ok": false, "error": {"code": "TIMEOUT", "message": ""}}')
        assert not err.ok and err.error["code"] == ERR_TIMEOUT

    def test_malformed_lines_rejected(self):
        for bad in (b"not json", b'{"ok": true}', b'{"id": "1", "ok": false}'):
            with pytest.raises(ValueError):
                decode_response_line(bad)


class TestStdioTransport:
    def test_echo_subprocess(self, runtime, tmp_path):
        script = tmp_path / "echo_adapter.py"
        script.write_text(ECHO_SCRIPT)
        d = AdapterDescriptor(
            adapter_id="s1",
            tool=Tool.CLASSIFY,
            transport=Transport.STDIO,
            timeout_ms=5000,
            batch_max=4,
            endpoint=f"{sys.executable} {script}",
        )
        runtime.register(d)
        responses = runtime.invoke_batched(d, [req(str(i), payload=i) for i in range(3)])
        assert [r.result for r in responses] == [0, 1, 2]

    def test_dead_process_is_unavailable(self, runtime, tmp_path):
        script = tmp_path / "dead.py"
        script.write_text("import sys; sys.exit(0)\n")
        d = AdapterDescriptor(
            adapter_id="s2",
            tool=Tool.CLASSIFY,
            transport=Transport.STDIO,
            timeout_ms=1000,
            endpoint=f"{sys.executable} {script}",
        )
        runtime.register(d)
        response = runtime.invoke(d, req())
        assert not response.ok
        assert response.error["code"] in (ERR_UNAVAILABLE, ERR_TIMEOUT)


class TestConcurrency:
    def test_parallel_invokes_stay_aligned(self, runtime):
        import threading

        d = mock_descriptor(batch_max=3, cacheable=True)
        runtime.register(d, echo)
        errors = []

        def worker(tag: str):
            try:
                requests = [req(f"{tag}-{i}", payload=f"{tag}:{i % 4}") for i in range(12)]
                responses = runtime.invoke_batched(d, requests)
                assert [r.id for r in responses] == [f"{tag}-{i}" for i in range(12)]
                assert [r.result for r in responses] == [f"{tag}:{i % 4}" for i in range(12)]
            except Exception as exc:  # surfaced after join
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(f"t{k}",)) for k in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
