"""Segment indexes and query routing.

Standing code/docs/web indexes persist as single canonical-JSON files; the
per-request document index is ephemeral and lives only for one request.
Scoring is Okapi BM25 with k1=1.2, b=0.75 over lowercase alphanumeric terms.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .documents import PageSegment
from .ingress import Modality
from .schema import Provenance, canonical_json, content_digest, count_tokens

__all__ = [
    "INDEX_KINDS",
    "RankedHit",
    "SegmentIndex",
    "build_index",
    "build_index_from_directory",
    "dump_index",
    "load_index",
    "route_query",
    "search",
    "tokenize",
]

BM25_K1 = 1.2
BM25_B = 0.75
INDEX_KINDS = ("code", "docs", "web", "document")  # "document" = per-request

_TERM = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercased maximal alphanumeric runs."""
    return _TERM.findall(text.lower())


@dataclass(frozen=True, slots=True)
class RankedHit:
    segment_id: str
    score: float
    provenance: Provenance

    def __post_init__(self) -> None:
        if self.score < 0:
            raise ValueError("hit score must be >= 0")


@dataclass(frozen=True, slots=True)
class SegmentIndex:
    index_kind: str
    postings: dict[str, tuple[tuple[str, int], ...]]  # term -> ((segment_id, tf), ...)
    doc_lengths: dict[str, int]
    segments: dict[str, PageSegment]

    def __post_init__(self) -> None:
        if self.index_kind not in INDEX_KINDS:
            raise ValueError(f"unknown index kind {self.index_kind!r}")


def build_index(kind: str, segments: list[PageSegment]) -> SegmentIndex:
    """Inverted index over segment texts; postings sorted by segment id."""
    store: dict[str, PageSegment] = {}
    for segment in segments:
        if segment.segment_id in store:
            raise ValueError(f"duplicate segment id {segment.segment_id!r}")
        store[segment.segment_id] = segment

    raw: dict[str, dict[str, int]] = {}
    lengths: dict[str, int] = {}
    for segment in segments:
        terms = tokenize(segment.text)
        lengths[segment.segment_id] = max(len(terms), 1)
        for term in terms:
            raw.setdefault(term, {}).setdefault(segment.segment_id, 0)
            raw[term][segment.segment_id] += 1
    postings = {
        term: tuple(sorted(by_segment.items()))
        for term, by_segment in sorted(raw.items())
    }
    return SegmentIndex(kind, postings, lengths, store)


def search(index: SegmentIndex, query: str, k: int) -> list[RankedHit]:
    """Top-k BM25 hits ordered by (score desc, segment_id asc); segments
    sharing no query term are excluded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = sorted(set(tokenize(query)))
    if not terms or not index.doc_lengths:
        return []
    n = len(index.doc_lengths)
    avg_len = sum(index.doc_lengths.values()) / n
    scores: dict[str, float] = {}
    for term in terms:
        posting = index.postings.get(term)
        if not posting:
            continue
        df = len(posting)
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for segment_id, tf in posting:
            length = index.doc_lengths[segment_id]
            norm = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * length / avg_len)
            scores[segment_id] = scores.get(segment_id, 0.0) + idf * tf * (BM25_K1 + 1.0) / norm
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
    return [
        RankedHit(segment_id, score, index.segments[segment_id].provenance)
        for segment_id, score in ranked
    ]


def route_query(task_type: str, modalities: frozenset[Modality] | set[Modality]) -> list[str]:
    """Task type to index kinds; document/url inputs add the per-request index."""
    table = {"code": ["code"], "tool_usage": ["docs"], "general": ["web"]}
    kinds = list(table.get(task_type, ["web"]))
    if Modality.DOCUMENT in modalities or Modality.URL in modalities:
        kinds.append("document")
    return kinds


# ---------------------------------------------------------------------------
# Persistence and corpus building.
# ---------------------------------------------------------------------------

def _segment_dict(segment: PageSegment) -> dict:
    p = segment.provenance
    return {
        "segment_id": segment.segment_id,
        "page_index": segment.page_index,
        "block_index": segment.block_index,
        "text": segment.text,
        "oversize": segment.oversize,
        "provenance": {
            "source_id": p.source_id,
            "content_hash": p.content_hash,
            "timestamp": p.timestamp_str(),
            "locator": p.locator,
        },
    }


def dump_index(index: SegmentIndex, path: str | Path) -> None:
    payload = {
        "index_kind": index.index_kind,
        "postings": {t: [list(entry) for entry in entries] for t, entries in index.postings.items()},
        "doc_lengths": index.doc_lengths,
        "segments": {sid: _segment_dict(s) for sid, s in index.segments.items()},
    }
    Path(path).write_bytes(canonical_json(payload).encode("utf-8"))


def load_index(path: str | Path) -> SegmentIndex:
    from .schema import TIMESTAMP_FORMAT

    data = json.loads(Path(path).read_text(encoding="utf-8"))
    segments = {}
    for sid, raw in data["segments"].items():
        p = raw["provenance"]
        segments[sid] = PageSegment(
            raw["segment_id"],
            raw["page_index"],
            raw["block_index"],
            raw["text"],
            Provenance(
                p["source_id"],
                p["content_hash"],
                datetime.strptime(p["timestamp"], TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc),
                p["locator"],
            ),
            raw.get("oversize", False),
        )
    postings = {
        term: tuple((sid, tf) for sid, tf in entries)
        for term, entries in data["postings"].items()
    }
    return SegmentIndex(data["index_kind"], postings, data["doc_lengths"], segments)


def build_index_from_directory(
    kind: str,
    directory: str | Path,
    max_block_tokens: int = 120,
    timestamp: datetime | None = None,
) -> SegmentIndex:
    """Index every *.txt / *.md / source file under a directory.

    Each file splits on blank lines into blocks greedily packed up to the
    token cap; segment ids are "<relative-path>#b<i>".
    """
    directory = Path(directory)
    ts = timestamp or datetime.now(timezone.utc)
    segments: list[PageSegment] = []
    for file in sorted(p for p in directory.rglob("*") if p.is_file()):
        text = file.read_text(encoding="utf-8", errors="replace")
        source = Provenance(
            str(file.relative_to(directory)),
            content_digest(text.encode("utf-8")),
            ts,
        )
        paragraphs = [p.strip() for p in re.split(r"\n\s*\n", text) if p.strip()]
        block: list[str] = []
        tokens = 0
        index = 0

        def close() -> None:
            nonlocal block, tokens, index
            if not block:
                return
            sid = f"{source.source_id}#b{index}"
            segments.append(
                PageSegment(
                    sid, 0, index, "\n".join(block),
                    Provenance(source.source_id, source.content_hash, ts, sid),
                )
            )
            index += 1
            block = []
            tokens = 0

        for paragraph in paragraphs:
            p_tokens = count_tokens(paragraph)
            if block and tokens + p_tokens > max_block_tokens:
                close()
            block.append(paragraph)
            tokens += p_tokens
        close()
    return build_index(kind, segments)
