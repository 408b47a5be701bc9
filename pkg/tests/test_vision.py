"""Relevance scoring, region grouping, coordinate mapping, mask batching."""

from __future__ import annotations

import numpy as np
import pytest

from interfaze.adapters import AdapterDescriptor, AdapterRuntime, Tool, Transport
from interfaze.vision import (
    GridBox,
    ProtocolViolation,
    RelevanceMap,
    TextEmbedding,
    VisualTokens,
    grid_to_pixels,
    group_regions,
    refine_masks,
    relevance_map,
)
from interfaze.schema import Box

from .helpers import prov
from .oracles import flood_fill_oracle, sigmoid_scalar_oracle


def tokens_of(grid, patch=16, dims=(64, 64)) -> VisualTokens:
    return VisualTokens(np.asarray(grid, dtype=float), patch, dims)


def text_of(vec, tau=1.0) -> TextEmbedding:
    return TextEmbedding(np.asarray(vec, dtype=float), "prompt", tau)


class TestRelevanceMap:
    def test_orthogonal_gives_half(self):
        grid = tokens_of([[[1.0, 0.0]]])
        assert relevance_map(grid, text_of([0.0, 1.0])).scores[0, 0] == pytest.approx(0.5)

    def test_dot_equal_tau_gives_sigmoid_one(self):
        grid = tokens_of([[[2.0, 0.0]]])
        score = relevance_map(grid, text_of([1.0, 0.0], tau=2.0)).scores[0, 0]
        assert score == pytest.approx(0.731059, abs=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(47)
        for _ in range(20):
            grid = rng.normal(size=(5, 7, 4))
            vec = rng.normal(size=4)
            tau = float(rng.uniform(0.2, 3.0))
            got = relevance_map(tokens_of(grid), text_of(vec, tau)).scores
            assert np.allclose(got, sigmoid_scalar_oracle(grid, vec, tau), atol=1e-9)

    def test_dimension_mismatch_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            relevance_map(tokens_of([[[1.0, 0.0]]]), text_of([1.0, 0.0, 0.0]))

    def test_monotone_in_dot_product(self):
        vec = text_of([1.0, 0.0])
        lo = relevance_map(tokens_of([[[0.3, 9.0]]]), vec).scores[0, 0]
        hi = relevance_map(tokens_of([[[0.8, -2.0]]]), vec).scores[0, 0]
        assert hi > lo

    def test_extreme_logits_stay_in_range(self):
        grid = tokens_of([[[1e4], [-1e4]]])
        scores = relevance_map(grid, text_of([1.0], tau=0.01)).scores
        assert scores[0, 0] <= 1.0 and scores[0, 1] >= 0.0


class TestGroupRegions:
    def test_all_below_threshold(self):
        rel = RelevanceMap(np.full((3, 3), 0.2))
        assert group_regions(rel, 0.5) == []

    def test_two_components_example(self):
        scores = np.full((3, 3), 0.1)
        scores[0, 0] = scores[0, 1] = 0.9
        scores[2, 2] = 0.9
        boxes = group_regions(RelevanceMap(scores), 0.5)
        assert boxes == [GridBox(0, 0, 0, 1), GridBox(2, 2, 2, 2)]

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(53)
        for _ in range(50):
            scores = rng.uniform(size=(16, 16))
            theta = float(rng.uniform(0.3, 0.8))
            got = [(b.row_min, b.col_min, b.row_max, b.col_max)
                   for b in group_regions(RelevanceMap(scores), theta)]
            assert got == flood_fill_oracle(scores, theta)

    def test_diagonal_cells_stay_separate(self):
        scores = np.zeros((2, 2))
        scores[0, 0] = scores[1, 1] = 1.0
        assert len(group_regions(RelevanceMap(scores), 0.5)) == 2


class TestGridToPixels:
    def test_full_grid_covers_image(self):
        tokens = tokens_of(np.zeros((4, 4, 2)), patch=16, dims=(64, 64))
        assert grid_to_pixels(GridBox(0, 0, 3, 3), tokens) == Box(0, 0, 64, 64)

    def test_single_cell(self):
        tokens = tokens_of(np.zeros((4, 4, 2)), patch=16, dims=(64, 64))
        assert grid_to_pixels(GridBox(0, 0, 0, 0), tokens) == Box(0, 0, 16, 16)

    def test_edge_cell_clamped_to_width(self):
        tokens = tokens_of(np.zeros((4, 4, 2)), patch=16, dims=(64, 50))
        box = grid_to_pixels(GridBox(0, 3, 0, 3), tokens)
        assert box.x_max == 50 and box.x_min == 48

    def test_grouped_boxes_inside_image(self):
        rng = np.random.default_rng(59)
        tokens = tokens_of(rng.normal(size=(16, 16, 3)), patch=7, dims=(100, 100))
        rel = relevance_map(tokens, text_of(rng.normal(size=3)))
        for gbox in group_regions(rel, 0.5):
            pbox = grid_to_pixels(gbox, tokens)
            assert 0 <= pbox.x_min <= pbox.x_max <= 100
            assert 0 <= pbox.y_min <= pbox.y_max <= 100


class TestRefineMasks:
    def register(self, runtime, handler) -> AdapterDescriptor:
        d = AdapterDescriptor("masks", Tool.SEGMENT_MASK, Transport.IN_PROCESS_MOCK)
        runtime.register(d, handler)
        return d

    def test_empty_boxes_zero_calls(self):
        runtime = AdapterRuntime()
        d = self.register(runtime, lambda r: {"masks": []})
        assert refine_masks(runtime, d, [], prov("img:1")) == []
        assert runtime.transport_batches.get("masks", 0) == 0
        runtime.close()

    def test_three_boxes_single_call(self):
        runtime = AdapterRuntime()

        def handler(request):
            return {"masks": [f"m{i}" for i in range(len(request.payload["boxes"]))]}

        d = self.register(runtime, handler)
        boxes = [Box(0, 0, 1, 1), Box(1, 1, 2, 2), Box(2, 2, 3, 3)]
        masks = refine_masks(runtime, d, boxes, prov("img:1"))
        assert masks == ["m0", "m1", "m2"]
        assert runtime.transport_batches["masks"] == 1
        runtime.close()

    def test_short_reply_is_protocol_error(self):
        runtime = AdapterRuntime()
        d = self.register(runtime, lambda r: {"masks": ["only", "two"]})
        with pytest.raises(ProtocolViolation):
            refine_masks(runtime, d, [Box(0, 0, 1, 1)] * 3, prov("img:1"))
        runtime.close()


class TestGuiWordBoxes:
    def test_words_decoded_for_document_pipeline(self):
        from interfaze.documents import line_confidence
        from interfaze.vision import gui_word_boxes

        runtime = AdapterRuntime()
        d = AdapterDescriptor("gui", Tool.DETECT, Transport.IN_PROCESS_MOCK)
        runtime.register(
            d,
            lambda r: {"words": [
                {"text": "Submit", "box": [10, 10, 60, 24], "confidence": 0.9},
                {"text": "Cancel", "box": [70, 10, 120, 24], "confidence": 0.8},
            ]},
        )
        words = gui_word_boxes(runtime, d, b"\x89PNG\r\n\x1a\nimg", prov("img:1"))
        assert [w.text for w in words] == ["Submit", "Cancel"]
        assert line_confidence(words) == pytest.approx((6 * 0.9 + 6 * 0.8) / 12)
        runtime.close()
