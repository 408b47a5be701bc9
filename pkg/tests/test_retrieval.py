"""Index building, BM25 ranking against the oracle, routing, persistence."""

from __future__ import annotations

import random

import pytest

from interfaze.documents import PageSegment
from interfaze.ingress import Modality
from interfaze.retrieval import (
    RankedHit,
    build_index,
    build_index_from_directory,
    dump_index,
    load_index,
    route_query,
    search,
    tokenize,
)

from .helpers import prov
from .oracles import bm25_oracle


def seg(sid: str, text: str) -> PageSegment:
    return PageSegment(sid, 0, 0, text, prov(f"doc:{sid}", locator=sid))


class TestBuildIndex:
    def test_empty(self):
        index = build_index("web", [])
        assert not index.postings and not index.segments

    def test_term_frequencies(self):
        index = build_index("web", [seg("s1", "foo foo bar")])
        assert dict(index.postings["foo"]) == {"s1": 2}
        assert dict(index.postings["bar"]) == {"s1": 1}

    def test_duplicate_id_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_index("web", [seg("s1", "a"), seg("s1", "b")])

    def test_rebuild_dump_identical(self, tmp_path):
        segments = [seg(f"s{i}", f"text number {i} alpha beta") for i in range(5)]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        dump_index(build_index("docs", segments), a)
        dump_index(build_index("docs", segments), b)
        assert a.read_bytes() == b.read_bytes()

    def test_terms_lowercase(self):
        index = build_index("web", [seg("s1", "Foo BAR")])
        assert set(index.postings) == {"foo", "bar"}


class TestSearch:
    def test_absent_term_empty(self):
        index = build_index("web", [seg("s1", "alpha beta")])
        assert search(index, "gamma", 5) == []

    def test_exact_copy_ranks_first(self):
        index = build_index("web", [
            seg("s1", "velocity"),
            seg("s2", "unrelated text here"),
            seg("s3", "more filler words"),
        ])
        hits = search(index, "velocity", 5)
        assert [h.segment_id for h in hits] == ["s1"]

    def test_matches_scoring_oracle(self):
        rng = random.Random(61)
        vocab = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
        for _ in range(20):
            segments = [
                seg(f"s{i}", " ".join(rng.choices(vocab, k=rng.randint(1, 12))))
                for i in range(10)
            ]
            index = build_index("web", segments)
            query = " ".join(rng.choices(vocab, k=rng.randint(1, 3)))
            hits = search(index, query, 10)
            expected = bm25_oracle(
                {s.segment_id: tokenize(s.text) for s in segments}, tokenize(query)
            )
            assert [h.segment_id for h in hits] == [
                sid for sid, _ in sorted(expected.items(), key=lambda kv: (-kv[1], kv[0]))
            ]
            for hit in hits:
                assert hit.score == pytest.approx(expected[hit.segment_id], abs=1e-9)

    def test_k_bounds_results(self):
        index = build_index("web", [seg(f"s{i}", "common word") for i in range(8)])
        assert len(search(index, "common", 3)) == 3

    def test_empty_query_empty_result(self):
        index = build_index("web", [seg("s1", "a")])
        assert search(index, "", 5) == []

    def test_unrelated_segment_preserves_order(self):
        base = [seg("s1", "alpha alpha beta"), seg("s2", "alpha gamma")]
        with_noise = base + [seg("s3", "zeta zeta zeta")]
        before = [h.segment_id for h in search(build_index("web", base), "alpha", 5)]
        after = [h.segment_id for h in search(build_index("web", with_noise), "alpha", 5)]
        assert before == after


class TestRouteQuery:
    def test_code(self):
        assert route_query("code", frozenset()) == ["code"]

    def test_tool_usage(self):
        assert route_query("tool_usage", frozenset()) == ["docs"]

    def test_unknown_defaults_to_web(self):
        assert route_query("xyzzy", frozenset()) == ["web"]

    def test_document_modality_appends_request_index(self):
        assert route_query("general", {Modality.DOCUMENT}) == ["web", "document"]
        assert route_query("code", {Modality.URL}) == ["code", "document"]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        index = build_index("code", [seg("s1", "def parse(x): return x")])
        path = tmp_path / "index.json"
        dump_index(index, path)
        loaded = load_index(path)
        assert loaded.index_kind == "code"
        assert [h.segment_id for h in search(loaded, "parse", 3)] == ["s1"]
        dump2 = tmp_path / "again.json"
        dump_index(loaded, dump2)
        assert dump2.read_bytes() == path.read_bytes()

    def test_directory_corpus(self, tmp_path):
        (tmp_path / "guide.md").write_text("Install the tool.\n\nRun the tool daily.")
        (tmp_path / "api.txt").write_text("endpoint reference")
        index = build_index_from_directory("docs", tmp_path, max_block_tokens=3)
        assert any(sid.startswith("guide.md#b") for sid in index.segments)
        hits = search(index, "tool", 5)
        assert hits and all(isinstance(h, RankedHit) for h in hits)
