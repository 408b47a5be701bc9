"""Energy-based voice activity scoring.

Stands in for a neural VAD: per-frame probability is the frame RMS relative
to a threshold fraction of the loudest frame, capped at 1.  Deterministic
and model-free, which is the whole point of a conformance adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["EnergyVadConfig", "energy_vad"]


@dataclass(frozen=True)
class EnergyVadConfig:
    frame_ms: float = 10.0
    energy_threshold: float = 0.5  # fraction of peak frame RMS

    def __post_init__(self) -> None:
        if self.frame_ms <= 0:
            raise ValueError("frame_ms must be > 0")
        if not 0.0 <= self.energy_threshold <= 1.0:
            raise ValueError("energy_threshold must lie in [0,1]")


def _frame_rms(samples: list[float], start: int, length: int) -> float:
    frame = samples[start : start + length]
    return math.sqrt(sum(s * s for s in frame) / len(frame))


def energy_vad(samples: list[float], sample_rate: int, config: EnergyVadConfig) -> list[float]:
    """Framewise speech probabilities in [0,1].

    probability = min(1, frame_RMS / (threshold * peak_RMS)) over
    non-overlapping frames of frame_ms; silent input (peak 0) scores all
    zeros.
    """
    if not samples:
        raise ValueError("energy_vad requires non-empty samples")
    frame_len = max(1, int(round(config.frame_ms * sample_rate / 1000.0)))
    starts = range(0, len(samples) - frame_len + 1, frame_len)
    rms = [_frame_rms(samples, s, frame_len) for s in starts]
    if not rms:
        rms = [_frame_rms(samples, 0, len(samples))]
    peak = max(rms)
    if peak <= 0.0:
        return [0.0] * len(rms)
    floor = config.energy_threshold * peak
    if floor <= 0.0:
        return [1.0] * len(rms)
    return [min(1.0, value / floor) for value in rms]
