"""Document pipeline: detector output to ordered lines, blocks, and state.

Detection and recognition themselves are adapter calls; this module owns the
deterministic geometry around them: line confidence, word-box interpolation,
reading-order reconstruction over an adjacency-scored line graph, dual
recognizer merging, extraction escalation, and retrieval segmentation.

Reading-order refinement (frozen here, exercised by the column fixtures):
successors are restricted to the same x_min column (columns split on gaps
larger than 25% of page width) and must not sit above or left-on-the-same-row
of the current line.  Heads start at the minimum (column, y_min).
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, replace

from .adapters import AdapterDescriptor, AdapterRequest, AdapterRuntime, Tool
from .schema import (
    Box,
    ContextState,
    Entity,
    EntityKind,
    Observation,
    Provenance,
    Relation,
    RelationKind,
    content_digest,
    count_tokens,
)

__all__ = [
    "COLUMN_GAP_FRACTION",
    "Line",
    "PageSegment",
    "Quad",
    "Word",
    "edge_score",
    "escalate_extraction",
    "interpolate_word_boxes",
    "line_confidence",
    "lines_to_state",
    "make_line",
    "merge_recognizers",
    "parse_ocr_pages",
    "process_document",
    "reading_edge_score",
    "reading_order",
    "segment_document",
    "should_escalate_extraction",
    "validate_structured_reply",
]

COLUMN_GAP_FRACTION = 0.25
APPEND_IOU_CEILING = 0.1


@dataclass(frozen=True, slots=True)
class Quad:
    """Four corner points in page pixels, clockwise."""

    corners: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        corners = tuple((float(x), float(y)) for x, y in self.corners)
        object.__setattr__(self, "corners", corners)
        if len(corners) != 4:
            raise ValueError("quad needs exactly 4 corners")
        if abs(_signed_area(corners)) <= 0.0:
            raise ValueError("quad must have positive area")
        if _self_intersects(corners):
            raise ValueError("quad must not self-intersect")

    def bounding_box(self) -> Box:
        xs = [p[0] for p in self.corners]
        ys = [p[1] for p in self.corners]
        return Box(min(xs), min(ys), max(xs), max(ys))


def _signed_area(pts: tuple[tuple[float, float], ...]) -> float:
    total = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        total += x0 * y1 - x1 * y0
    return total / 2.0


def _segments_cross(a, b, c, d) -> bool:
    def orient(p, q, r) -> float:
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def _self_intersects(pts: tuple[tuple[float, float], ...]) -> bool:
    edges = list(zip(pts, pts[1:] + pts[:1]))
    return _segments_cross(*edges[0], *edges[2]) or _segments_cross(*edges[1], *edges[3])


@dataclass(frozen=True, slots=True)
class Word:
    text: str
    box: Box
    confidence: float

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("word text must be non-empty")
        object.__setattr__(self, "confidence", float(self.confidence))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("word confidence outside [0,1]")


def line_confidence(words: list[Word]) -> float:
    """Length-weighted mean of word confidences; lengths in non-whitespace chars."""
    if not words:
        raise ValueError("line_confidence requires >= 1 word")
    weights = [len("".join(w.text.split())) for w in words]
    total = sum(weights)
    if total == 0:
        raise ValueError("words carry no non-whitespace characters")
    return sum(w * word.confidence for w, word in zip(weights, words)) / total


@dataclass(frozen=True, slots=True)
class Line:
    text: str
    quad: Quad
    box: Box
    confidence: float
    font_height: float
    words: tuple[Word, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "confidence", float(self.confidence))
        for x, y in self.quad.corners:
            if not (self.box.x_min - 1e-6 <= x <= self.box.x_max + 1e-6
                    and self.box.y_min - 1e-6 <= y <= self.box.y_max + 1e-6):
                raise ValueError("line box must enclose its quad")
        if self.words:
            expected = line_confidence(list(self.words))
            if abs(expected - self.confidence) > 1e-6:
                raise ValueError(
                    f"line confidence {self.confidence} != length-weighted {expected}"
                )


def make_line(
    text: str,
    box: Box,
    confidence: float,
    font_height: float | None = None,
    words: tuple[Word, ...] = (),
) -> Line:
    """Build a Line whose quad is the box rectangle (clockwise in image coords)."""
    quad = Quad((
        (box.x_min, box.y_min),
        (box.x_max, box.y_min),
        (box.x_max, box.y_max),
        (box.x_min, box.y_max),
    ))
    if font_height is None:
        font_height = box.height
    if words:
        confidence = line_confidence(list(words))
    return Line(text, quad, box, confidence, font_height, words)


def interpolate_word_boxes(line_box: Box, line_text: str) -> list[Box]:
    """Word boxes by proportional slicing when only line geometry exists.

    Character width = box width / total characters (spaces included); each
    word occupies the horizontal slice of its character interval at full
    line height.
    """
    if not line_text:
        raise ValueError("line_text must be non-empty")
    if line_box.width <= 0:
        raise ValueError("line box must have positive width")
    char_width = line_box.width / len(line_text)
    boxes: list[Box] = []
    i = 0
    while i < len(line_text):
        if line_text[i].isspace():
            i += 1
            continue
        j = i
        while j < len(line_text) and not line_text[j].isspace():
            j += 1
        boxes.append(
            Box(
                line_box.x_min + i * char_width,
                line_box.y_min,
                line_box.x_min + j * char_width,
                line_box.y_max,
            )
        )
        i = j
    return boxes


def edge_score(box_a: Box, box_b: Box, font_a: float, font_b: float, page_width: float) -> float:
    """Adjacency score from vertical overlap, horizontal gap, and font ratio.

    score = 0.5*vo + 0.3*(1-hd) + 0.2*fh, each feature clamped to [0,1];
    degenerate zero-height geometry scores 0.
    """
    if page_width <= 0:
        raise ValueError("page_width must be > 0")
    height_a, height_b = box_a.height, box_b.height
    if min(height_a, height_b) <= 0:
        return 0.0
    overlap = min(box_a.y_max, box_b.y_max) - max(box_a.y_min, box_b.y_min)
    vo = min(max(overlap / min(height_a, height_b), 0.0), 1.0)
    gap = max(0.0, max(box_a.x_min, box_b.x_min) - min(box_a.x_max, box_b.x_max))
    hd = min(max(gap / page_width, 0.0), 1.0)
    lo_font, hi_font = sorted((font_a, font_b))
    fh = 0.0 if hi_font <= 0 else lo_font / hi_font
    return 0.5 * vo + 0.3 * (1.0 - hd) + 0.2 * fh


def reading_edge_score(a: Line, b: Line, page_width: float) -> float:
    """edge_score over two lines' boxes and font heights."""
    return edge_score(a.box, b.box, a.font_height, b.font_height, page_width)


def _column_keys(lines: list[Line], page_width: float) -> list[int]:
    """Cluster x_min values into columns split on gaps > 25% of page width."""
    order = sorted(range(len(lines)), key=lambda i: lines[i].box.x_min)
    keys = [0] * len(lines)
    column = 0
    prev_x: float | None = None
    for i in order:
        x = lines[i].box.x_min
        if prev_x is not None and x - prev_x > COLUMN_GAP_FRACTION * page_width:
            column += 1
        keys[i] = column
        prev_x = x
    return keys


def reading_order(lines: list[Line], page_width: float, theta_e: float) -> list[Line]:
    """Greedy chain traversal over the line-adjacency graph.

    Output is always a permutation of the input: chains start at the unvisited
    head minimizing (column, y_min) and repeatedly follow the best-scoring
    unvisited successor (same column, not above, not left-on-same-row) while
    the edge score clears theta_e; exhausted chains fall back to head picking.
    """
    if not lines:
        return []
    columns = _column_keys(lines, page_width)
    unvisited = set(range(len(lines)))
    order: list[int] = []

    while unvisited:
        head = min(
            unvisited,
            key=lambda i: (columns[i], lines[i].box.y_min, lines[i].box.x_min, i),
        )
        unvisited.remove(head)
        order.append(head)
        current = head
        while True:
            cur_box = lines[current].box
            best: int | None = None
            best_key: tuple | None = None
            for j in unvisited:
                if columns[j] != columns[current]:
                    continue
                jb = lines[j].box
                if (jb.y_min, jb.x_min) < (cur_box.y_min, cur_box.x_min):
                    continue
                score = reading_edge_score(lines[current], lines[j], page_width)
                if score < theta_e:
                    continue
                key = (-score, jb.y_min, jb.x_min, j)
                if best_key is None or key < best_key:
                    best_key = key
                    best = j
            if best is None:
                break
            unvisited.remove(best)
            order.append(best)
            current = best
    return [lines[i] for i in order]


def _normalized_similarity(a: str, b: str) -> float:
    """1 - normalized Levenshtein distance over lowercased text."""
    a, b = a.lower(), b.lower()
    if not a and not b:
        return 1.0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return 1.0 - prev[-1] / max(len(a), len(b))


def merge_recognizers(
    primary: list[Line], secondary: list[Line], theta_iou: float, theta_sim: float
) -> list[Line]:
    """Reconcile a secondary recognizer pass against the primary detector.

    Each secondary line pairs with its max-IoU primary line.  Agreeing pairs
    (IoU and similarity above threshold) keep the primary; disagreeing pairs
    keep the higher-confidence line; far-away secondary lines (max IoU < 0.1)
    append as new lines; ambiguous partial overlaps drop.  No primary line is
    ever removed.
    """
    merged = list(primary)
    appended: list[Line] = []
    for line in secondary:
        best_index: int | None = None
        best_iou = 0.0
        for i, p in enumerate(merged[: len(primary)]):
            iou = line.box.iou(p.box)
            if iou > best_iou:
                best_iou = iou
                best_index = i
        if best_index is not None and best_iou >= theta_iou:
            incumbent = merged[best_index]
            similarity = _normalized_similarity(line.text, incumbent.text)
            if similarity < theta_sim and line.confidence > incumbent.confidence:
                merged[best_index] = line
        elif best_iou < APPEND_IOU_CEILING:
            appended.append(line)
    return merged + appended


def should_escalate_extraction(
    lines: list[Line], theta_ocr: float, user_requested: bool
) -> bool:
    """Escalate to schema-guided extraction on explicit request or weak OCR.

    Aggregate confidence is the length-weighted mean line confidence; an empty
    page counts as zero confidence.
    """
    if user_requested:
        return True
    weights = [len("".join(line.text.split())) for line in lines]
    total = sum(weights)
    if total == 0:
        return True
    mean = sum(w * line.confidence for w, line in zip(weights, lines)) / total
    return mean < theta_ocr


def validate_structured_reply(reply: object, template: object) -> None:
    """Check that an extraction reply matches the schema template's shape.

    Dicts must carry exactly the template keys; scalar template values fix the
    expected type; list templates validate every element against element 0.
    """
    if isinstance(template, dict):
        if not isinstance(reply, dict):
            raise ValueError(f"expected object, got {type(reply).__name__}")
        if set(reply) != set(template):
            raise ValueError(
                f"keys {sorted(reply)} do not match template {sorted(template)}"
            )
        for key, sub in template.items():
            validate_structured_reply(reply[key], sub)
    elif isinstance(template, list):
        if not isinstance(reply, list):
            raise ValueError(f"expected array, got {type(reply).__name__}")
        if template:
            for item in reply:
                validate_structured_reply(item, template[0])
    elif isinstance(template, bool):
        if not isinstance(reply, bool):
            raise ValueError("expected boolean")
    elif isinstance(template, (int, float)):
        if isinstance(reply, bool) or not isinstance(reply, (int, float)):
            raise ValueError("expected number")
    elif isinstance(template, str):
        if not isinstance(reply, str):
            raise ValueError("expected string")


def escalate_extraction(
    adapters: AdapterRuntime,
    descriptor: AdapterDescriptor,
    payload: bytes,
    template: dict,
    source: Provenance,
) -> list[Observation]:
    """Invoke the schema-guided extraction adapter and validate its reply.

    The validated top-level fields become high-confidence observations; a
    reply violating the template is a pipeline failure.
    """
    request = AdapterRequest(
        id=f"extract:{source.content_hash[:12]}",
        tool=Tool.OCR,
        op="extract_structured",
        payload={
            "document": {"encoding": "base64", "data": base64.b64encode(payload).decode("ascii")},
            "schema_template": template,
        },
    )
    response = adapters.invoke(descriptor, request)
    if not response.ok:
        from .audio import PipelineError

        raise PipelineError(f"extraction adapter failed: {response.error}")
    try:
        validate_structured_reply(response.result, template)
    except ValueError as exc:
        from .audio import PipelineError

        raise PipelineError(f"extraction reply violates schema: {exc}") from exc
    prefix = content_digest(source.source_id.encode("utf-8"))[:8]
    import json as _json

    return [
        Observation(
            f"{prefix}:field:{key}",
            f"{key}: {value if isinstance(value, str) else _json.dumps(value, sort_keys=True)}",
            1.0,
            (replace(source, locator=f"field:{key}"),),
        )
        for key, value in sorted(response.result.items())
    ]


@dataclass(frozen=True, slots=True)
class PageSegment:
    """One retrieval unit: a block of consecutive reading-ordered lines."""

    segment_id: str
    page_index: int
    block_index: int
    text: str
    provenance: Provenance
    oversize: bool = False


def segment_document(
    pages: list[tuple[int, list[Line]]],
    max_block_tokens: int,
    source: Provenance,
) -> list[PageSegment]:
    """Greedy packing of reading-ordered lines into blocks of <= max tokens.

    Block boundaries never split a line; a single line over the cap gets its
    own block flagged oversize.  Segment ids follow "p{page}b{block}".
    """
    segments: list[PageSegment] = []
    for page_index, lines in pages:
        block_index = 0
        block_lines: list[str] = []
        block_tokens = 0

        def close(page_index=page_index) -> None:
            nonlocal block_index, block_lines, block_tokens
            if not block_lines:
                return
            segment_id = f"p{page_index}b{block_index}"
            text = "\n".join(block_lines)
            segments.append(
                PageSegment(
                    segment_id,
                    page_index,
                    block_index,
                    text,
                    replace(source, locator=segment_id),
                    oversize=count_tokens(text) > max_block_tokens,
                )
            )
            block_index += 1
            block_lines = []
            block_tokens = 0

        for line in lines:
            tokens = count_tokens(line.text)
            if block_lines and block_tokens + tokens > max_block_tokens:
                close()
            block_lines.append(line.text)
            block_tokens += tokens
            if block_tokens > max_block_tokens:
                close()  # oversize single line occupies its own block
        close()
    return segments


def lines_to_state(
    pages: list[tuple[int, list[Line]]],
    segments: list[PageSegment],
    source: Provenance,
) -> ContextState:
    """Fragment construction: line entities with geometry, follows relations
    along the full reading order, and one observation per segment text."""
    prefix = content_digest(source.source_id.encode("utf-8"))[:8]
    entities: list[Entity] = []
    relations: list[Relation] = []
    previous_id: str | None = None
    for page_index, lines in pages:
        for i, line in enumerate(lines):
            entity_id = f"{prefix}:p{page_index}l{i}"
            prov = replace(source, locator=f"p{page_index}")
            entities.append(
                Entity(
                    entity_id,
                    EntityKind.TEXT_SPAN,
                    line.confidence,
                    (prov,),
                    text=line.text,
                    region=line.box,
                )
            )
            if previous_id is not None:
                relations.append(
                    Relation(
                        f"{entity_id}:follows",
                        RelationKind.FOLLOWS,
                        entity_id,
                        previous_id,
                        (prov,),
                    )
                )
            previous_id = entity_id

    observations = [
        Observation(f"{prefix}:{seg.segment_id}", seg.text, 1.0, (seg.provenance,))
        for seg in segments
        if seg.text
    ]
    return ContextState.build(observations, entities, relations)


# ---------------------------------------------------------------------------
# Adapter-driven orchestration.
# ---------------------------------------------------------------------------

def parse_ocr_pages(result: dict) -> tuple[list[tuple[int, list[Line]]], float]:
    """Convert an ocr adapter reply into per-page Line lists plus page width."""
    pages: list[tuple[int, list[Line]]] = []
    page_width = float(result.get("page_width", 1000.0))
    for page in result["pages"]:
        lines = []
        for raw in page["lines"]:
            words = tuple(
                Word(w["text"], Box(*w["box"]), w["confidence"]) for w in raw.get("words", [])
            )
            lines.append(
                make_line(
                    raw["text"],
                    Box(*raw["box"]),
                    raw.get("confidence", 1.0),
                    raw.get("font_height"),
                    words,
                )
            )
        pages.append((int(page["page_index"]), lines))
    return pages, page_width


def process_document(
    adapters: AdapterRuntime,
    by_tool: dict[Tool, AdapterDescriptor],
    payload: bytes,
    media_kind: str,
    source: Provenance,
    theta_e: float = 0.35,
    max_block_tokens: int = 120,
) -> tuple[ContextState, list[PageSegment]]:
    """OCR adapter -> reading order -> segments -> state fragment."""
    request = AdapterRequest(
        id=f"ocr:{source.content_hash[:12]}",
        tool=Tool.OCR,
        op="parse_document",
        payload={
            "document": {"encoding": "base64", "data": base64.b64encode(payload).decode("ascii")},
            "media_kind": media_kind,
        },
    )
    response = adapters.invoke(by_tool[Tool.OCR], request)
    if not response.ok:
        from .audio import PipelineError

        raise PipelineError(f"ocr adapter failed: {response.error}")
    raw_pages, page_width = parse_ocr_pages(response.result)
    ordered = [(idx, reading_order(lines, page_width, theta_e)) for idx, lines in raw_pages]
    segments = segment_document(ordered, max_block_tokens, source)
    return lines_to_state(ordered, segments, source), segments
