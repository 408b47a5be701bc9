"""Protocol conformance: transcript replay, subprocess behavior, selftest."""

from __future__ import annotations

import io
import json
import subprocess
import sys
from pathlib import Path

from reference_adapter.protocol import canonical_json, handle_request, protocol_loop

GOLDEN = Path(__file__).parent / "golden"
PACKAGE_ROOT = Path(__file__).parent.parent


def run_subprocess(stdin_text: str, *args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "reference_adapter", *args],
        input=stdin_text,
        capture_output=True,
        text=True,
        timeout=30,
        cwd=PACKAGE_ROOT,
        env={"PYTHONPATH": str(PACKAGE_ROOT / "src"), "PATH": "/usr/bin:/bin"},
    )


class TestTranscriptReplay:
    def test_twenty_message_transcript_byte_identical(self):
        stdin_text = (GOLDEN / "transcript_in.jsonl").read_text(encoding="utf-8")
        expected = (GOLDEN / "transcript_out.jsonl").read_text(encoding="utf-8")
        result = run_subprocess(stdin_text)
        assert result.returncode == 0, result.stderr
        assert result.stdout == expected

    def test_one_response_per_request_line(self):
        stdin_text = (GOLDEN / "transcript_in.jsonl").read_text(encoding="utf-8")
        result = run_subprocess(stdin_text)
        assert len(result.stdout.splitlines()) == len(stdin_text.splitlines()) == 20

    def test_ids_match_and_order_preserved(self):
        stdin_text = (GOLDEN / "transcript_in.jsonl").read_text(encoding="utf-8")
        result = run_subprocess(stdin_text)
        out_ids = [json.loads(line)["id"] for line in result.stdout.splitlines()]
        in_ids = []
        for line in stdin_text.splitlines():
            try:
                in_ids.append(json.loads(line)["id"])
            except ValueError:
                in_ids.append("")  # malformed line answers with empty id
        assert out_ids == in_ids


class TestHandleRequest:
    def vad_line(self, request_id: str = "r1") -> str:
        import base64
        import struct

        blob = base64.b64encode(struct.pack("<8h", *([12000, -12000] * 4))).decode("ascii")
        return canonical_json({
            "id": request_id, "tool": "vad", "op": "vad",
            "payload": {"audio": {"encoding": "base64", "data": blob}, "sample_rate": 16000,
                        "frame_ms": 0.25},
        })

    def test_well_formed_vad_request(self):
        response = handle_request(self.vad_line(), 1)
        assert response["ok"] is True
        assert all(0.0 <= p <= 1.0 for p in response["result"]["probs"])

    def test_unknown_op_unsupported(self):
        response = handle_request('{"id": "x", "tool": "vad", "op": "frobnicate"}', 1)
        assert response["error"]["code"] == "UNSUPPORTED"

    def test_malformed_line_reports_line_number(self):
        response = handle_request("garbage", 17)
        assert response["error"]["code"] == "PROTOCOL"
        assert "line 17" in response["error"]["message"]

    def test_loop_emits_one_line_each(self):
        stdin = io.StringIO(self.vad_line("a") + "\n" + "nope\n" + self.vad_line("b") + "\n")
        stdout = io.StringIO()
        protocol_loop(stdin, stdout)
        lines = stdout.getvalue().splitlines()
        assert len(lines) == 3
        assert [json.loads(l)["id"] for l in lines] == ["a", "", "b"]


class TestSelftest:
    def test_selftest_flag_passes(self):
        result = run_subprocess("", "--selftest")
        assert result.returncode == 0, result.stderr
        assert "selftest ok" in result.stderr
