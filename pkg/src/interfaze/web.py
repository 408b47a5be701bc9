"""Web pipeline: boilerplate stripping and DOM-aware block extraction.

Rendering/fetching happens behind the render_page adapter; this module
consumes markup text only.  The parser is a hand-rolled tokenizer over a
constrained tag subset (documented in docs/config.md), not an HTML5 recovery
parser: unbalanced or unknown tags are errors with a character offset.
"""

from __future__ import annotations

import html as html_entities
import re
from dataclasses import dataclass, replace
from enum import Enum

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
    "BlockKind",
    "DomBlock",
    "MarkupError",
    "blocks_to_state",
    "extract_blocks",
    "strip_boilerplate",
]

ALLOWED_TAGS = frozenset(
    {"html", "head", "body", "main", "nav", "footer", "aside", "script", "style",
     "h1", "h2", "h3", "h4", "h5", "h6", "p", "pre", "code", "img", "a", "div",
     "span", "table", "tr", "td", "th"}
)
VOID_TAGS = frozenset({"img"})
# raw-text elements: content is consumed verbatim up to the literal close tag,
# so code may contain unescaped '<'
RAW_TEXT_TAGS = frozenset({"script", "style", "code"})
BOILERPLATE_TAGS = frozenset({"nav", "footer", "aside", "script", "style"})
_HEADING = re.compile(r"^h([1-6])$")
_ALT_ATTR = re.compile(r"""\balt\s*=\s*("([^"]*)"|'([^']*)'|(\S+))""", re.IGNORECASE)


class MarkupError(ValueError):
    """Malformed markup; carries the character offset of the problem."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class BlockKind(str, Enum):
    SECTION = "section"
    PARAGRAPH = "paragraph"
    CODE = "code"
    FIGURE = "figure"


@dataclass(frozen=True, slots=True)
class DomBlock:
    kind: BlockKind
    text: str
    source_offset: tuple[int, int]
    level: int = 0

    def __post_init__(self) -> None:
        if self.kind is BlockKind.SECTION and not 1 <= self.level <= 6:
            raise ValueError("section level must be in [1,6]")


@dataclass
class _Element:
    tag: str
    start: int          # offset of the open tag's '<'
    open_end: int       # offset just past the open tag's '>'
    attrs_src: str
    children: list      # _Element | (text_start, text_end)
    close_start: int = -1
    end: int = -1       # offset just past the close tag's '>'


def _parse(markup: str) -> list:
    """Parse the constrained subset into a node forest; raise MarkupError."""
    root_children: list = []
    stack: list[_Element] = []
    n = len(markup)
    i = 0

    def sink() -> list:
        return stack[-1].children if stack else root_children

    while i < n:
        if markup.startswith("<!--", i):
            end = markup.find("-->", i)
            if end < 0:
                raise MarkupError("unterminated comment", i)
            i = end + 3
        elif markup.startswith("<!", i):
            end = markup.find(">", i)
            if end < 0:
                raise MarkupError("unterminated declaration", i)
            i = end + 1
        elif markup.startswith("</", i):
            end = markup.find(">", i)
            if end < 0:
                raise MarkupError("unterminated close tag", i)
            tag = markup[i + 2 : end].strip().lower()
            if tag not in ALLOWED_TAGS:
                raise MarkupError(f"unknown tag {tag!r}", i)
            if not stack or stack[-1].tag != tag:
                raise MarkupError(f"unbalanced close tag {tag!r}", i)
            element = stack.pop()
            element.close_start = i
            element.end = end + 1
            i = end + 1
        elif markup[i] == "<":
            j = i + 1
            while j < n and (markup[j].isalnum()):
                j += 1
            tag = markup[i + 1 : j].lower()
            if tag not in ALLOWED_TAGS:
                raise MarkupError(f"unknown tag {tag!r}", i)
            # scan attributes to '>' respecting quotes
            k = j
            quote: str | None = None
            while k < n:
                ch = markup[k]
                if quote is not None:
                    if ch == quote:
                        quote = None
                elif ch in "\"'":
                    quote = ch
                elif ch == ">":
                    break
                k += 1
            if k >= n:
                raise MarkupError("unterminated open tag", i)
            self_closing = markup[k - 1] == "/" and quote is None
            attrs_src = markup[j:k]
            element = _Element(tag, i, k + 1, attrs_src, [])
            sink().append(element)
            i = k + 1
            if tag in VOID_TAGS or self_closing:
                element.close_start = element.end = i
            elif tag in RAW_TEXT_TAGS:
                close = markup.lower().find(f"</{tag}", i)
                if close < 0:
                    raise MarkupError(f"unterminated {tag} element", element.start)
                gt = markup.find(">", close)
                if gt < 0:
                    raise MarkupError("unterminated close tag", close)
                element.children.append((i, close))
                element.close_start = close
                element.end = gt + 1
                i = gt + 1
            else:
                stack.append(element)
        else:
            j = markup.find("<", i)
            if j < 0:
                j = n
            sink().append((i, j))
            i = j
    if stack:
        raise MarkupError(f"unclosed tag {stack[-1].tag!r}", stack[-1].start)
    return root_children


def _boilerplate_spans(nodes: list, spans: list[tuple[int, int]]) -> None:
    for node in nodes:
        if isinstance(node, _Element):
            if node.tag in BOILERPLATE_TAGS:
                spans.append((node.start, node.end))
            else:
                _boilerplate_spans(node.children, spans)


def strip_boilerplate(markup: str) -> str:
    """Remove nav/footer/aside/script/style subtrees; keep the rest verbatim."""
    spans: list[tuple[int, int]] = []
    _boilerplate_spans(_parse(markup), spans)
    if not spans:
        return markup
    out: list[str] = []
    cursor = 0
    for start, end in sorted(spans):
        out.append(markup[cursor:start])
        cursor = end
    out.append(markup[cursor:])
    return "".join(out)


def _collect_text(markup: str, node: _Element) -> str:
    parts: list[str] = []

    def walk(children: list) -> None:
        for child in children:
            if isinstance(child, _Element):
                walk(child.children)
            else:
                parts.append(markup[child[0] : child[1]])

    walk(node.children)
    return " ".join(html_entities.unescape("".join(parts)).split())


def _raw_inner(markup: str, node: _Element) -> str:
    return markup[node.open_end : node.close_start]


def _code_inner(markup: str, node: _Element) -> str:
    """Verbatim code text; a pre wrapping exactly one code child unwraps it."""
    element_children = [c for c in node.children if isinstance(c, _Element)]
    text_children = [
        c for c in node.children
        if not isinstance(c, _Element) and markup[c[0] : c[1]].strip()
    ]
    if node.tag == "pre" and len(element_children) == 1 and not text_children:
        inner = element_children[0]
        if inner.tag == "code":
            return _raw_inner(markup, inner)
    return _raw_inner(markup, node)


def extract_blocks(markup: str) -> list[DomBlock]:
    """Map the stripped markup to ordered blocks.

    h1-h6 become sections with a level, p becomes a paragraph, pre/standalone
    code become verbatim code blocks, img-with-alt becomes a figure; all other
    allowed tags are transparent containers.
    """
    blocks: list[DomBlock] = []

    def visit(nodes: list) -> None:
        for node in nodes:
            if not isinstance(node, _Element):
                continue
            heading = _HEADING.match(node.tag)
            if heading:
                text = _collect_text(markup, node)
                if text:
                    blocks.append(
                        DomBlock(BlockKind.SECTION, text, (node.start, node.end), int(heading.group(1)))
                    )
            elif node.tag == "p":
                text = _collect_text(markup, node)
                if text:
                    blocks.append(DomBlock(BlockKind.PARAGRAPH, text, (node.start, node.end)))
            elif node.tag in ("pre", "code"):
                text = _code_inner(markup, node)
                if text:
                    blocks.append(DomBlock(BlockKind.CODE, text, (node.start, node.end)))
            elif node.tag == "img":
                match = _ALT_ATTR.search(node.attrs_src)
                alt = ""
                if match:
                    alt = next(g for g in match.groups()[1:] if g is not None)
                alt = html_entities.unescape(alt).strip()
                if alt:  # alt-less figures are dropped
                    blocks.append(DomBlock(BlockKind.FIGURE, alt, (node.start, node.end)))
            else:
                visit(node.children)

    visit(_parse(markup))
    return blocks


_BLOCK_ENTITY_KIND = {
    BlockKind.SECTION: EntityKind.SECTION,
    BlockKind.CODE: EntityKind.CODE_BLOCK,
    BlockKind.FIGURE: EntityKind.FIGURE,
}


def blocks_to_state(blocks: list[DomBlock], source: Provenance) -> ContextState:
    """Sections/code/figures become entities, paragraphs observations, and each
    block gains a contains relation from its nearest enclosing section."""
    prefix = content_digest(source.source_id.encode("utf-8"))[:8]
    observations: list[Observation] = []
    entities: list[Entity] = []
    relations: list[Relation] = []

    # (level, entity_id) of open sections, innermost last
    section_stack: list[tuple[int, str]] = []
    for i, block in enumerate(blocks):
        block_id = f"{prefix}:blk{i}"
        prov = replace(source, locator=f"chars {block.source_offset[0]}-{block.source_offset[1]}")
        if block.kind is BlockKind.PARAGRAPH:
            observations.append(Observation(block_id, block.text, 1.0, (prov,)))
        else:
            entities.append(
                Entity(
                    block_id,
                    _BLOCK_ENTITY_KIND[block.kind],
                    1.0,
                    (prov,),
                    text=block.text,
                    span=block.source_offset,
                )
            )

        if block.kind is BlockKind.SECTION:
            while section_stack and section_stack[-1][0] >= block.level:
                section_stack.pop()
            parent = section_stack[-1][1] if section_stack else None
            section_stack.append((block.level, block_id))
        else:
            parent = section_stack[-1][1] if section_stack else None
        if parent is not None:
            relations.append(
                Relation(f"{block_id}:in", RelationKind.CONTAINS, parent, block_id, (prov,))
            )
    return ContextState.build(observations, entities, relations)
