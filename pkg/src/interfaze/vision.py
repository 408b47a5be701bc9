"""Vision pipeline: prompt-conditioned relevance over token grids.

Scoring places a sigmoid over the token/text dot product at a temperature,
grouping takes 4-connected components of high-score cells, and grid boxes map
back to pixel coordinates by patch size.  Mask refinement is a single batched
segment_mask adapter call; masks stay opaque handles and never enter prompts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import (
    ERR_PROTOCOL,
    AdapterDescriptor,
    AdapterRequest,
    AdapterRuntime,
    Tool,
)
from .schema import Box, Provenance

__all__ = [
    "GridBox",
    "ProtocolViolation",
    "RelevanceMap",
    "TextEmbedding",
    "VisualTokens",
    "grid_to_pixels",
    "group_regions",
    "gui_word_boxes",
    "refine_masks",
    "relevance_map",
]


class ProtocolViolation(RuntimeError):
    """Adapter reply shape does not line up with the request."""


@dataclass(frozen=True, slots=True)
class VisualTokens:
    """A grid of K = rows*cols visual token vectors of dimension D."""

    grid: np.ndarray        # (rows, cols, dim)
    patch_size: int
    image_dims: tuple[int, int]  # (height, width)

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 3 or grid.shape[2] < 1:
            raise ValueError("token grid must be rows x cols x dim")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be > 0")


@dataclass(frozen=True, slots=True)
class TextEmbedding:
    vector: np.ndarray
    prompt: str
    temperature: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True, slots=True)
class RelevanceMap:
    scores: np.ndarray  # (rows, cols) in [0,1]

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if np.any(scores < 0.0) or np.any(scores > 1.0):
            raise ValueError("relevance scores must lie in [0,1]")


@dataclass(frozen=True, slots=True)
class GridBox:
    """Inclusive cell coordinates of a grouped region."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self) -> None:
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError("grid box min exceeds max")


def relevance_map(tokens: VisualTokens, text: TextEmbedding) -> RelevanceMap:
    """sigmoid(dot(token_k, text) / temperature) per cell, row-major."""
    if tokens.grid.shape[2] != text.vector.size:
        raise ValueError(
            f"dimension mismatch: tokens dim {tokens.grid.shape[2]} vs text {text.vector.size}"
        )
    logits = tokens.grid @ text.vector / text.temperature
    # branch on sign so exp never overflows
    scores = np.empty_like(logits)
    pos = logits >= 0
    scores[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    grown = np.exp(logits[~pos])
    scores[~pos] = grown / (1.0 + grown)
    return RelevanceMap(scores)


def group_regions(rel: RelevanceMap, theta_s: float) -> list[GridBox]:
    """Bounding boxes of 4-connected components of cells with score >= theta_s,
    sorted by (row_min, col_min)."""
    if not 0.0 <= theta_s <= 1.0:
        raise ValueError("theta_s must lie in [0,1]")
    scores = rel.scores
    rows, cols = scores.shape
    seen = np.zeros((rows, cols), dtype=bool)
    boxes: list[GridBox] = []
    for r in range(rows):
        for c in range(cols):
            if seen[r, c] or scores[r, c] < theta_s:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            r_min = r_max = r
            c_min = c_max = c
            while stack:
                cr, cc = stack.pop()
                r_min, r_max = min(r_min, cr), max(r_max, cr)
                c_min, c_max = min(c_min, cc), max(c_max, cc)
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < rows and 0 <= nc < cols and not seen[nr, nc] and scores[nr, nc] >= theta_s:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            boxes.append(GridBox(r_min, c_min, r_max, c_max))
    boxes.sort(key=lambda b: (b.row_min, b.col_min))
    return boxes


def grid_to_pixels(box: GridBox, tokens: VisualTokens) -> Box:
    """Cell coordinates to image pixels, clamped to the image dims."""
    height, width = tokens.image_dims
    patch = tokens.patch_size
    return Box(
        min(box.col_min * patch, width),
        min(box.row_min * patch, height),
        min((box.col_max + 1) * patch, width),
        min((box.row_max + 1) * patch, height),
    )


def gui_word_boxes(
    adapters: AdapterRuntime,
    descriptor: AdapterDescriptor,
    image_payload: bytes,
    image_ref: Provenance,
):
    """GUI pages additionally run the text/icon detector; its word boxes feed
    the document pipeline's line machinery."""
    import base64

    from .documents import Word

    request = AdapterRequest(
        id=f"gui:{image_ref.content_hash[:12]}",
        tool=Tool.DETECT,
        op="gui_text",
        payload={"image": {"encoding": "base64",
                           "data": base64.b64encode(image_payload).decode("ascii")}},
    )
    response = adapters.invoke(descriptor, request)
    if not response.ok:
        raise ProtocolViolation(f"gui detector failed: {response.error}")
    return [
        Word(w["text"], Box(*w["box"]), float(w.get("confidence", 1.0)))
        for w in response.result.get("words", [])
    ]


def refine_masks(
    adapters: AdapterRuntime,
    descriptor: AdapterDescriptor,
    boxes: list[Box],
    image_ref: Provenance,
) -> list[str]:
    """One batched segment_mask call per image; returns opaque mask handles
    aligned with the input boxes.  A reply of the wrong length is a protocol
    violation."""
    if not boxes:
        return []
    request = AdapterRequest(
        id=f"mask:{image_ref.content_hash[:12]}",
        tool=Tool.SEGMENT_MASK,
        op="refine",
        payload={
            "image_ref": image_ref.source_id,
            "boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes],
        },
    )
    response = adapters.invoke(descriptor, request)
    if not response.ok:
        raise ProtocolViolation(f"segment_mask adapter failed: {response.error}")
    masks = response.result.get("masks") if isinstance(response.result, dict) else None
    if not isinstance(masks, list) or len(masks) != len(boxes):
        raise ProtocolViolation(
            f"{ERR_PROTOCOL}: expected {len(boxes)} masks, got "
            f"{len(masks) if isinstance(masks, list) else 'none'}"
        )
    return [str(m) for m in masks]
