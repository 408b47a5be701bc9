"""Entry point: serve the stdio protocol, or verify itself with --selftest."""

from __future__ import annotations

import argparse
import base64
import math
import struct
import sys

from .protocol import canonical_json, handle_request, protocol_loop
from .vad import EnergyVadConfig, energy_vad


def _burst_fixture(sample_rate: int = 16000) -> tuple[list[float], list[tuple[int, int]]]:
    """Two tone bursts over silence; returns samples and burst frame ranges
    (10 ms frames)."""
    duration_s = 1.0
    n = int(duration_s * sample_rate)
    samples = [0.0] * n
    bursts_s = [(0.10, 0.30), (0.55, 0.85)]
    for start_s, end_s in bursts_s:
        for i in range(int(start_s * sample_rate), int(end_s * sample_rate)):
            samples[i] = 0.3 * math.sin(2 * math.pi * 440 * i / sample_rate)
    frames = [(int(a * 100), int(b * 100)) for a, b in bursts_s]
    return samples, frames


def selftest() -> int:
    failures = []

    # energy VAD separates bursts from silence
    samples, burst_frames = _burst_fixture()
    probs = energy_vad(samples, 16000, EnergyVadConfig(10.0, 0.5))
    for start, end in burst_frames:
        inside = probs[start + 1 : end - 1]
        if not inside or min(inside) < 0.5:
            failures.append(f"burst frames {start}-{end} not detected")
    silent = probs[: burst_frames[0][0] - 1]
    if silent and max(silent) >= 0.5:
        failures.append("silence scored as speech")
    if any(not 0.0 <= p <= 1.0 for p in probs):
        failures.append("probabilities escaped [0,1]")

    # protocol smoke: ok, unsupported, malformed
    blob = base64.b64encode(struct.pack("<4h", 0, 16000, -16000, 0)).decode("ascii")
    ok = handle_request(
        canonical_json({"id": "t1", "tool": "vad", "op": "vad",
                        "payload": {"audio": {"encoding": "base64", "data": blob},
                                    "sample_rate": 16000}}),
        1,
    )
    if not ok.get("ok"):
        failures.append(f"vad request failed: {ok}")
    unsupported = handle_request('{"id": "t2", "tool": "vad", "op": "frobnicate"}', 2)
    if unsupported["error"]["code"] != "UNSUPPORTED":
        failures.append("unknown op did not return UNSUPPORTED")
    malformed = handle_request("not json", 3)
    if malformed["error"]["code"] != "PROTOCOL" or "line 3" not in malformed["error"]["message"]:
        failures.append("malformed line did not return PROTOCOL with line number")

    for failure in failures:
        print(f"SELFTEST FAIL: {failure}", file=sys.stderr)
    if not failures:
        print("selftest ok", file=sys.stderr)
    return 1 if failures else 0


def main() -> int:
    parser = argparse.ArgumentParser(
        prog="interfaze-reference-adapter",
        description="Reference adapter speaking the stdio JSON-lines protocol.",
    )
    parser.add_argument("--selftest", action="store_true", help="run built-in fixture checks")
    args = parser.parse_args()
    if args.selftest:
        return selftest()
    protocol_loop(sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
