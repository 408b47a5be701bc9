"""Audio pipeline: waveforms in, speaker-attributed time-stamped utterances out.

The neural parts (VAD scoring, ASR text, speaker embeddings, language
posteriors) come from adapters; everything here is the deterministic math
around them: log-mel features, span thresholding and merging, agglomerative
speaker clustering in cosine space, temporal alignment, and serialization of
the result into a context-state fragment.
"""

from __future__ import annotations

import base64
import wave
from dataclasses import dataclass, replace
from io import BytesIO

import numpy as np

from .adapters import AdapterDescriptor, AdapterRequest, AdapterRuntime, Tool
from .schema import (
    ContextState,
    Entity,
    EntityKind,
    Observation,
    Provenance,
    Relation,
    RelationKind,
    content_digest,
)

__all__ = [
    "AudioConfig",
    "MelConfig",
    "MelFrames",
    "PipelineError",
    "SpeakerSegment",
    "SpeechSpan",
    "UNKNOWN_SPEAKER",
    "Utterance",
    "Waveform",
    "assign_speakers",
    "build_transcript_state",
    "cluster_speakers",
    "decode_wav",
    "log_mel",
    "mel_filterbank",
    "transcribe_waveform",
    "vad_spans",
]

UNKNOWN_SPEAKER = "UNKNOWN"


class PipelineError(RuntimeError):
    """An adapter step the pipeline depends on failed."""


@dataclass(frozen=True, slots=True)
class Waveform:
    samples: np.ndarray  # float values in [-1, 1]
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


def decode_wav(payload: bytes) -> Waveform:
    """Decode RIFF/WAV PCM16 mono into float samples in [-1, 1]."""
    with wave.open(BytesIO(payload)) as wav:
        if wav.getnchannels() != 1 or wav.getsampwidth() != 2:
            raise ValueError("expected PCM16 mono WAV")
        frames = wav.readframes(wav.getnframes())
        rate = wav.getframerate()
    ints = np.frombuffer(frames, dtype="<i2").astype(np.float64)
    return Waveform(ints / 32767.0, rate)


# ---------------------------------------------------------------------------
# Log-mel features.
# ---------------------------------------------------------------------------

def _hz_to_mel(hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filters covering [0, sample_rate/2], shape (n_mels, n_fft//2+1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = np.asarray(_mel_to_hz(mel_points))
    bank = np.zeros((n_mels, n_bins))
    for f in range(n_mels):
        lo, center, hi = hz_points[f], hz_points[f + 1], hz_points[f + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[f] = np.clip(np.minimum(rising, falling), 0.0, None)
        if bank[f].sum() <= 0.0:
            # very narrow filter fell between bins: keep the nearest bin
            bank[f, int(np.argmin(np.abs(freqs - center)))] = 1.0
    return bank


@dataclass(frozen=True, slots=True)
class MelConfig:
    """Feature extraction parameters plus the filterbank matrix itself."""

    sample_rate: int = 16000
    n_fft: int = 512
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    epsilon: float = 1e-10
    filterbank: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        bank = self.filterbank
        if bank is None:
            bank = mel_filterbank(self.sample_rate, self.n_fft, self.n_mels)
        bank = np.asarray(bank, dtype=np.float64)
        if bank.shape != (self.n_mels, self.n_fft // 2 + 1):
            raise ValueError(f"filterbank shape {bank.shape} inconsistent with n_fft/n_mels")
        if np.any(bank < 0) or np.any(bank.sum(axis=1) <= 0):
            raise ValueError("filterbank rows must be nonnegative with positive sums")
        object.__setattr__(self, "filterbank", bank)

    @property
    def window_len(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_len(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))


@dataclass(frozen=True, slots=True)
class MelFrames:
    z: np.ndarray          # (n_mels, n_frames) log-mel values
    frame_times: np.ndarray  # frame centers in seconds


def log_mel(waveform: Waveform, cfg: MelConfig) -> MelFrames:
    """Windowed DFT -> squared magnitude -> mel filterbank -> log with epsilon floor.

    Frames use a Hann window of window_ms advanced by hop_ms; silence maps to
    exactly log(epsilon) in every cell.
    """
    if waveform.sample_rate != cfg.sample_rate:
        raise ValueError("waveform sample rate does not match MelConfig")
    samples = waveform.samples
    win, hop = cfg.window_len, cfg.hop_len
    if samples.size < win:
        raise ValueError(f"waveform too short: {samples.size} samples < one window ({win})")
    n_frames = 1 + (samples.size - win) // hop
    window = np.hanning(win)
    starts = np.arange(n_frames) * hop
    frames = np.stack([samples[s : s + win] * window for s in starts])
    spectrum = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = np.abs(spectrum) ** 2  # (n_frames, n_bins)
    mel_energy = power @ cfg.filterbank.T  # (n_frames, n_mels)
    z = np.log(mel_energy + cfg.epsilon).T
    times = (starts + win / 2.0) / cfg.sample_rate
    return MelFrames(z=z, frame_times=times)


# ---------------------------------------------------------------------------
# Spans, segments, utterances.
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SpeechSpan:
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"invalid span [{self.start_s}, {self.end_s}]")

    def overlap(self, other: SpeechSpan) -> float:
        return max(0.0, min(self.end_s, other.end_s) - max(self.start_s, other.start_s))


@dataclass(frozen=True, slots=True)
class SpeakerSegment:
    span: SpeechSpan
    embedding: np.ndarray
    label: int | None = None

    def __post_init__(self) -> None:
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"speaker embedding norm {norm} not unit")


@dataclass(frozen=True, slots=True)
class Utterance:
    span: SpeechSpan
    text: str
    language: str | None = None
    speaker: str | None = None


def vad_spans(
    probs: list[float],
    frame_hop_s: float,
    theta_v: float,
    merge_gap_frames: int,
    min_len_frames: int,
) -> list[SpeechSpan]:
    """Threshold framewise speech probabilities into merged, filtered spans.

    Frames with prob >= theta_v form runs; runs separated by <= merge_gap_frames
    non-speech frames merge; merged runs shorter than min_len_frames drop.
    Output spans are in seconds, disjoint, and sorted.
    """
    runs: list[list[int]] = []  # [start_frame, end_frame] inclusive
    for i, p in enumerate(probs):
        if p >= theta_v:
            if runs and i - runs[-1][1] - 1 <= merge_gap_frames:
                runs[-1][1] = i
            else:
                runs.append([i, i])
    return [
        SpeechSpan(start * frame_hop_s, (end + 1) * frame_hop_s)
        for start, end in runs
        if end - start + 1 >= min_len_frames
    ]


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(np.dot(a, b))


def cluster_speakers(segments: list[SpeakerSegment], theta_c: float) -> list[SpeakerSegment]:
    """Average-linkage agglomerative clustering in cosine space.

    Merging continues while the minimum inter-cluster distance is < theta_c;
    ties pick the pair with the smallest (first-member, second-member) index.
    Labels are 0..k-1 in order of first segment appearance.
    """
    if not segments:
        return []
    n = len(segments)
    base = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            base[i][j] = base[j][i] = _cosine_distance(segments[i].embedding, segments[j].embedding)

    # Clusters keyed by their smallest member index.  Inter-cluster distance is
    # the average pairwise base distance, tracked as (sum, count) so merges are
    # exact additions rather than drifting incremental averages.
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    sums: dict[tuple[int, int], float] = {
        (i, j): base[i][j] for i in range(n) for j in range(i + 1, n)
    }

    def avg(pair: tuple[int, int]) -> float:
        i, j = pair
        return sums[pair] / (len(members[i]) * len(members[j]))

    while len(members) > 1:
        pair = min(sums, key=lambda p: (avg(p), p))
        if avg(pair) >= theta_c:
            break
        i, j = pair
        for k in list(members):
            if k in (i, j):
                continue
            a = sums.pop((min(i, k), max(i, k)))
            b = sums.pop((min(j, k), max(j, k)))
            sums[(min(i, k), max(i, k))] = a + b
        del sums[pair]
        members[i] = members[i] + members[j]
        del members[j]

    label_of: dict[int, int] = {}
    for label, key in enumerate(sorted(members)):
        for idx in members[key]:
            label_of[idx] = label
    return [replace(seg, label=label_of[i]) for i, seg in enumerate(segments)]


def assign_speakers(
    utterances: list[Utterance], segments: list[SpeakerSegment]
) -> list[Utterance]:
    """Attach to each utterance the label of the max-overlap speaker segment.

    Ties break toward the earlier segment (by span start, then input order);
    utterances overlapping nothing get the UNKNOWN label.  Order, count, and
    spans are preserved.
    """
    for seg in segments:
        if seg.label is None:
            raise ValueError("assign_speakers requires labeled segments")
    out: list[Utterance] = []
    for utt in utterances:
        best_label: str = UNKNOWN_SPEAKER
        best_key: tuple[float, float, int] | None = None
        for idx, seg in enumerate(segments):
            overlap = utt.span.overlap(seg.span)
            if overlap <= 0.0:
                continue
            key = (-overlap, seg.span.start_s, idx)
            if best_key is None or key < best_key:
                best_key = key
                best_label = str(seg.label)
        out.append(replace(utt, speaker=best_label))
    return out


def build_transcript_state(utterances: list[Utterance], source: Provenance) -> ContextState:
    """Serialize utterances into a context-state fragment.

    One observation per utterance with a time locator, one speaker entity per
    distinct label, spoken_by relations, and follows relations between
    consecutive utterances.  Input must be time-ordered.
    """
    for prev, cur in zip(utterances, utterances[1:]):
        if cur.span.start_s < prev.span.start_s:
            raise ValueError("utterances must be time-ordered")
    prefix = content_digest(source.source_id.encode("utf-8"))[:8]
    observations: list[Observation] = []
    relations: list[Relation] = []
    speaker_entities: dict[str, Entity] = {}

    for i, utt in enumerate(utterances):
        locator = f"t={utt.span.start_s:.2f}-{utt.span.end_s:.2f}"
        if utt.language:
            locator += f" lang={utt.language}"
        prov = replace(source, locator=locator)
        obs_id = f"{prefix}:utt{i}"
        observations.append(Observation(obs_id, utt.text, 1.0, (prov,)))
        if utt.speaker is not None:
            spk_id = f"{prefix}:spk{utt.speaker}"
            if spk_id not in speaker_entities:
                speaker_entities[spk_id] = Entity(
                    spk_id, EntityKind.SPEAKER, 1.0, (source,), text=f"speaker {utt.speaker}"
                )
            relations.append(
                Relation(f"{obs_id}:spoken_by", RelationKind.SPOKEN_BY, obs_id, spk_id, (prov,))
            )
        if i > 0:
            relations.append(
                Relation(
                    f"{obs_id}:follows",
                    RelationKind.FOLLOWS,
                    obs_id,
                    f"{prefix}:utt{i - 1}",
                    (prov,),
                )
            )
    return ContextState.build(observations, list(speaker_entities.values()), relations)


# ---------------------------------------------------------------------------
# Adapter-driven orchestration.
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class AudioConfig:
    theta_v: float = 0.5
    merge_gap_frames: int = 10
    min_len_frames: int = 25
    theta_c: float = 0.3


def _b64(data: bytes) -> dict[str, str]:
    return {"encoding": "base64", "data": base64.b64encode(data).decode("ascii")}


def _pcm16_bytes(samples: np.ndarray) -> bytes:
    ints = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    return ints.tobytes()


def _require_ok(response, step: str):
    if not response.ok:
        raise PipelineError(f"{step} adapter failed: {response.error}")
    return response.result


def transcribe_waveform(
    adapters: AdapterRuntime,
    by_tool: dict[Tool, AdapterDescriptor],
    waveform: Waveform,
    source: Provenance,
    cfg: AudioConfig = AudioConfig(),
) -> ContextState:
    """Full audio pass: VAD -> spans -> (ASR + speaker embedding) -> cluster
    -> align -> transcript fragment.  ASR and embedding calls are batched."""
    vad_request = AdapterRequest(
        id=f"vad:{source.content_hash[:12]}",
        tool=Tool.VAD,
        op="vad",
        payload={"audio": _b64(_pcm16_bytes(waveform.samples)), "sample_rate": waveform.sample_rate},
    )
    vad_result = _require_ok(adapters.invoke(by_tool[Tool.VAD], vad_request), "vad")
    spans = vad_spans(
        [float(p) for p in vad_result["probs"]],
        float(vad_result["frame_hop_s"]),
        cfg.theta_v,
        cfg.merge_gap_frames,
        cfg.min_len_frames,
    )
    if not spans:
        return build_transcript_state([], source)

    slices = []
    for span in spans:
        a = int(span.start_s * waveform.sample_rate)
        b = min(int(span.end_s * waveform.sample_rate), waveform.samples.size)
        slices.append(_b64(_pcm16_bytes(waveform.samples[a:b])))

    asr_requests = [
        AdapterRequest(
            id=f"asr:{source.content_hash[:12]}:{i}",
            tool=Tool.ASR,
            op="transcribe",
            payload={"audio": blob, "sample_rate": waveform.sample_rate,
                     "span": [span.start_s, span.end_s]},
        )
        for i, (span, blob) in enumerate(zip(spans, slices))
    ]
    embed_requests = [
        AdapterRequest(
            id=f"emb:{source.content_hash[:12]}:{i}",
            tool=Tool.DIARIZE_EMBED,
            op="embed",
            payload={"audio": blob, "sample_rate": waveform.sample_rate,
                     "span": [span.start_s, span.end_s]},
        )
        for i, (span, blob) in enumerate(zip(spans, slices))
    ]
    asr_responses = adapters.invoke_batched(by_tool[Tool.ASR], asr_requests)
    embed_responses = adapters.invoke_batched(by_tool[Tool.DIARIZE_EMBED], embed_requests)

    utterances: list[Utterance] = []
    segments: list[SpeakerSegment] = []
    for span, asr_resp, emb_resp in zip(spans, asr_responses, embed_responses):
        asr = _require_ok(asr_resp, "asr")
        emb = _require_ok(emb_resp, "diarize_embed")
        utterances.append(Utterance(span, asr["text"], language=asr.get("language")))
        segments.append(SpeakerSegment(span, np.asarray(emb["embedding"], dtype=np.float64)))

    labeled = cluster_speakers(segments, cfg.theta_c)
    return build_transcript_state(assign_speakers(utterances, labeled), source)
