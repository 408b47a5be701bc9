"""Shared fixture builders for the test suite."""

from __future__ import annotations

import random
import struct
from datetime import datetime, timezone

from interfaze.schema import (
    Box,
    ContextState,
    Entity,
    EntityKind,
    Observation,
    Provenance,
    Relation,
    RelationKind,
    content_digest,
)

FIXED_TS = datetime(2024, 5, 1, 12, 0, 0, tzinfo=timezone.utc)


def prov(source_id: str = "src", payload: bytes = b"payload", locator: str | None = None) -> Provenance:
    return Provenance(source_id, content_digest(payload), FIXED_TS, locator)


def obs(id: str, text: str, score: float = 1.0, source: str = "src") -> Observation:
    return Observation(id, text, score, (prov(source),))


def ent(
    id: str,
    kind: EntityKind = EntityKind.TEXT_SPAN,
    text: str | None = "t",
    confidence: float = 0.9,
    source: str = "src",
    region: Box | None = None,
    span: tuple[int, int] | None = None,
) -> Entity:
    return Entity(id, kind, confidence, (prov(source),), text=text, region=region, span=span)


def rel(id: str, subject: str, object: str, kind: RelationKind = RelationKind.FOLLOWS, source: str = "src") -> Relation:
    return Relation(id, kind, subject, object, (prov(source),))


def random_state(rng: random.Random, n_obs: int = 3, n_ent: int = 3, n_rel: int = 2) -> ContextState:
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "theta", "kappa"]
    observations = [
        obs(f"o{i}", " ".join(rng.choices(words, k=rng.randint(1, 5))), round(rng.random(), 3))
        for i in range(n_obs)
    ]
    entities = [
        ent(
            f"e{i}",
            text=rng.choice(words),
            confidence=round(rng.random(), 3),
            span=(s := rng.randint(0, 50), s + rng.randint(1, 20)),
        )
        for i in range(n_ent)
    ]
    ids = [x.id for x in observations + entities]
    relations = []
    for i in range(n_rel):
        a, b = rng.sample(ids, 2)
        relations.append(rel(f"r{i}", a, b))
    return ContextState.build(observations, entities, relations)


def pcm16_wav(samples: list[float], sample_rate: int = 16000) -> bytes:
    """Encode float samples in [-1,1] as a RIFF/WAV PCM16 mono byte string."""
    raw = b"".join(
        struct.pack("<h", max(-32768, min(32767, int(round(s * 32767.0))))) for s in samples
    )
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(raw),
        b"WAVE",
        b"fmt ",
        16,
        1,
        1,
        sample_rate,
        sample_rate * 2,
        2,
        16,
        b"data",
        len(raw),
    )
    return header + raw
