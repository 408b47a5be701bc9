"""Core context-state data model: token accounting, canonical bytes, prompt rendering.

The distilled state the final LLM sees has exactly four fields (observations,
entities, relations, provenance), each capped by a token budget.  Everything
here is an immutable value object; serialization is canonical so two
independent builds of the same logical state compare byte-equal.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

__all__ = [
    "Box",
    "BudgetExceededError",
    "ContextState",
    "DanglingRelationError",
    "Entity",
    "EntityKind",
    "Observation",
    "Provenance",
    "Relation",
    "RelationKind",
    "TokenBudget",
    "canonical_json",
    "canonical_parse",
    "canonical_serialize",
    "content_digest",
    "count_tokens",
    "entity_line",
    "observation_line",
    "provenance_line",
    "referenceable_ids",
    "relation_line",
    "render_prompt",
]

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S.%fZ"


class EntityKind(str, Enum):
    TEXT_SPAN = "text_span"
    BOUNDING_REGION = "bounding_region"
    TABLE_CELL = "table_cell"
    SPEAKER = "speaker"
    CODE_BLOCK = "code_block"
    SECTION = "section"
    FIGURE = "figure"
    VARIABLE = "variable"


class RelationKind(str, Enum):
    AXIS_OF = "axis_of"
    LEGEND_ENTRY = "legend_entry"
    REFERS_TO = "refers_to"
    FOLLOWS = "follows"
    CONTAINS = "contains"
    SPOKEN_BY = "spoken_by"
    ALIGNED_WITH = "aligned_with"


class DanglingRelationError(ValueError):
    """A relation endpoint does not resolve to any item in the state."""


class BudgetExceededError(ValueError):
    """A rendered prompt section exceeds its token budget."""


def count_tokens(text: str) -> int:
    """Number of maximal non-whitespace runs in *text*."""
    return len(text.split())


def content_digest(data: bytes) -> str:
    """Lowercase hex SHA-256 of *data*; the frozen content-hash function."""
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True, slots=True)
class Box:
    """Axis-aligned rectangle in page pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_min", float(self.x_min))
        object.__setattr__(self, "y_min", float(self.y_min))
        object.__setattr__(self, "x_max", float(self.x_max))
        object.__setattr__(self, "y_max", float(self.y_max))
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def union(self, other: Box) -> Box:
        return Box(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def iou(self, other: Box) -> float:
        """Intersection-over-union; 1.0 exactly on identical boxes."""
        ix = max(0.0, min(self.x_max, other.x_max) - max(self.x_min, other.x_min))
        iy = max(0.0, min(self.y_max, other.y_max) - max(self.y_min, other.y_min))
        inter = ix * iy
        union = self.width * self.height + other.width * other.height - inter
        if union <= 0.0:
            return 1.0 if self == other else 0.0
        return inter / union


@dataclass(frozen=True, slots=True)
class Provenance:
    """Where a context item came from: source id, content hash, time, locator."""

    source_id: str
    content_hash: str
    timestamp: datetime
    locator: str | None = None

    def __post_init__(self) -> None:
        if not self.source_id:
            raise ValueError("provenance source_id must be non-empty")
        if not self.content_hash:
            raise ValueError("provenance content_hash must be non-empty")
        ts = self.timestamp
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        else:
            ts = ts.astimezone(timezone.utc)
        object.__setattr__(self, "timestamp", ts)

    def timestamp_str(self) -> str:
        return self.timestamp.strftime(TIMESTAMP_FORMAT)


@dataclass(frozen=True, slots=True)
class Observation:
    """A short textual statement with a relevance score and provenance."""

    id: str
    text: str
    score: float
    provenance: tuple[Provenance, ...]

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"observation {self.id!r}: text must be non-empty")
        object.__setattr__(self, "score", float(self.score))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"observation {self.id!r}: score outside [0,1]")
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if not self.provenance:
            raise ValueError(f"observation {self.id!r}: needs >=1 provenance entry")


@dataclass(frozen=True, slots=True)
class Entity:
    """A typed span, region, or node extracted by a perception tool."""

    id: str
    kind: EntityKind
    confidence: float
    provenance: tuple[Provenance, ...]
    text: str | None = None
    region: Box | None = None
    span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "confidence", float(self.confidence))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"entity {self.id!r}: confidence outside [0,1]")
        if self.text is None and self.region is None and self.span is None:
            raise ValueError(f"entity {self.id!r}: needs one of text/region/span")
        if self.span is not None:
            object.__setattr__(self, "span", (int(self.span[0]), int(self.span[1])))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if not self.provenance:
            raise ValueError(f"entity {self.id!r}: needs >=1 provenance entry")


@dataclass(frozen=True, slots=True)
class Relation:
    """A typed link between two context items (entities or observations)."""

    id: str
    kind: RelationKind
    subject: str
    object: str
    provenance: tuple[Provenance, ...]

    def __post_init__(self) -> None:
        if self.subject == self.object:
            raise ValueError(f"relation {self.id!r}: subject == object")
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if not self.provenance:
            raise ValueError(f"relation {self.id!r}: needs >=1 provenance entry")


@dataclass(frozen=True, slots=True)
class ContextState:
    """The four-field distilled state; lists are in deterministic compile order."""

    observations: tuple[Observation, ...] = ()
    entities: tuple[Entity, ...] = ()
    relations: tuple[Relation, ...] = ()
    provenance_index: dict[str, Provenance] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))

    @classmethod
    def build(
        cls,
        observations: tuple[Observation, ...] | list[Observation] = (),
        entities: tuple[Entity, ...] | list[Entity] = (),
        relations: tuple[Relation, ...] | list[Relation] = (),
    ) -> ContextState:
        """Assemble a state, deriving the provenance index from the items.

        First occurrence wins per source_id, scanning observations, then
        entities, then relations.
        """
        index: dict[str, Provenance] = {}
        for item in (*observations, *entities, *relations):
            for prov in item.provenance:
                index.setdefault(prov.source_id, prov)
        return cls(tuple(observations), tuple(entities), tuple(relations), index)


def referenceable_ids(state: ContextState) -> set[str]:
    """Ids a relation endpoint may resolve to: entities plus observations.

    Transcript and markup fragments link observations (utterances, paragraphs)
    to entities (speakers, sections), so both populations are referenceable.
    """
    ids = {e.id for e in state.entities}
    ids.update(o.id for o in state.observations)
    return ids


def _check_endpoints(state: ContextState) -> None:
    known = referenceable_ids(state)
    for rel in state.relations:
        for endpoint in (rel.subject, rel.object):
            if endpoint not in known:
                raise DanglingRelationError(
                    f"relation {rel.id!r}: endpoint {endpoint!r} not in state"
                )


# ---------------------------------------------------------------------------
# Canonical serialization: UTF-8 JSON, sorted keys, floats at 6 decimals.
# ---------------------------------------------------------------------------

def _canonical_scalar(value: object) -> str:
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        out = ['"']
        for ch in value:
            if ch == '"':
                out.append('\\"')
            elif ch == "\\":
                out.append("\\\\")
            elif ch == "\n":
                out.append("\\n")
            elif ch == "\r":
                out.append("\\r")
            elif ch == "\t":
                out.append("\\t")
            elif ord(ch) < 0x20:
                out.append(f"\\u{ord(ch):04x}")
            else:
                out.append(ch)
        out.append('"')
        return "".join(out)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite float not serializable: {value}")
        if value == 0.0:
            value = 0.0  # collapse -0.0
        return f"{value:.6f}"
    raise TypeError(f"not canonically serializable: {type(value)!r}")


def canonical_json(value: object) -> str:
    """Render *value* as canonical JSON text (deterministic byte layout)."""
    if isinstance(value, dict):
        items = []
        for key in sorted(value):
            if not isinstance(key, str):
                raise TypeError("canonical JSON object keys must be strings")
            items.append(f"{_canonical_scalar(key)}:{canonical_json(value[key])}")
        return "{" + ",".join(items) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in value) + "]"
    return _canonical_scalar(value)


def _provenance_dict(p: Provenance) -> dict[str, object]:
    return {
        "source_id": p.source_id,
        "content_hash": p.content_hash,
        "timestamp": p.timestamp_str(),
        "locator": p.locator,
    }


def _state_dict(state: ContextState) -> dict[str, object]:
    return {
        "observations": [
            {
                "id": o.id,
                "text": o.text,
                "score": o.score,
                "provenance": [_provenance_dict(p) for p in o.provenance],
            }
            for o in state.observations
        ],
        "entities": [
            {
                "id": e.id,
                "kind": e.kind.value,
                "text": e.text,
                "region": None
                if e.region is None
                else {
                    "x_min": e.region.x_min,
                    "y_min": e.region.y_min,
                    "x_max": e.region.x_max,
                    "y_max": e.region.y_max,
                },
                "span": None if e.span is None else list(e.span),
                "confidence": e.confidence,
                "provenance": [_provenance_dict(p) for p in e.provenance],
            }
            for e in state.entities
        ],
        "relations": [
            {
                "id": r.id,
                "kind": r.kind.value,
                "subject": r.subject,
                "object": r.object,
                "provenance": [_provenance_dict(p) for p in r.provenance],
            }
            for r in state.relations
        ],
        "provenance_index": {
            sid: _provenance_dict(p) for sid, p in state.provenance_index.items()
        },
    }


def canonical_serialize(state: ContextState) -> bytes:
    """Canonical UTF-8 bytes of *state*; equal states produce identical bytes.

    Raises DanglingRelationError if any relation endpoint is missing.
    """
    _check_endpoints(state)
    return canonical_json(_state_dict(state)).encode("utf-8")


def _parse_provenance(data: dict) -> Provenance:
    return Provenance(
        source_id=data["source_id"],
        content_hash=data["content_hash"],
        timestamp=datetime.strptime(data["timestamp"], TIMESTAMP_FORMAT).replace(
            tzinfo=timezone.utc
        ),
        locator=data.get("locator"),
    )


def canonical_parse(payload: bytes | str) -> ContextState:
    """Inverse of canonical_serialize; parse-then-serialize round-trips bytes."""
    import json

    data = json.loads(payload if isinstance(payload, str) else payload.decode("utf-8"))
    observations = tuple(
        Observation(
            id=o["id"],
            text=o["text"],
            score=o["score"],
            provenance=tuple(_parse_provenance(p) for p in o["provenance"]),
        )
        for o in data.get("observations", [])
    )
    entities = tuple(
        Entity(
            id=e["id"],
            kind=EntityKind(e["kind"]),
            text=e.get("text"),
            region=None if e.get("region") is None else Box(**e["region"]),
            span=None if e.get("span") is None else tuple(e["span"]),
            confidence=e["confidence"],
            provenance=tuple(_parse_provenance(p) for p in e["provenance"]),
        )
        for e in data.get("entities", [])
    )
    relations = tuple(
        Relation(
            id=r["id"],
            kind=RelationKind(r["kind"]),
            subject=r["subject"],
            object=r["object"],
            provenance=tuple(_parse_provenance(p) for p in r["provenance"]),
        )
        for r in data.get("relations", [])
    )
    index = {
        sid: _parse_provenance(p) for sid, p in data.get("provenance_index", {}).items()
    }
    return ContextState(observations, entities, relations, index)


# ---------------------------------------------------------------------------
# Token budgets and prompt rendering.
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class TokenBudget:
    """Per-field caps on whitespace-delimited tokens in the compiled state."""

    observations_max: int
    entities_max: int
    relations_max: int
    provenance_max: int

    def __post_init__(self) -> None:
        for name in ("observations_max", "entities_max", "relations_max", "provenance_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"budget {name} must be >= 0")


def observation_line(obs: Observation) -> str:
    """The budget-counted rendering of one observation."""
    return obs.text


def entity_line(entity: Entity) -> str:
    """The budget-counted rendering of one entity."""
    parts = [f"[{entity.id}]", entity.kind.value]
    if entity.text is not None:
        parts.append(entity.text)
    if entity.region is not None:
        r = entity.region
        parts.append(f"@({r.x_min:.1f},{r.y_min:.1f},{r.x_max:.1f},{r.y_max:.1f})")
    if entity.span is not None:
        parts.append(f"chars({entity.span[0]},{entity.span[1]})")
    return " ".join(parts)


def relation_line(rel: Relation) -> str:
    """The budget-counted rendering of one relation."""
    return f"[{rel.id}] {rel.subject} {rel.kind.value} {rel.object}"


def provenance_line(prov: Provenance) -> str:
    """The budget-counted rendering of one provenance entry."""
    line = f"{prov.source_id} {prov.content_hash} {prov.timestamp_str()}"
    if prov.locator:
        line += f" {prov.locator}"
    return line


_SECTION_RENDERERS = (
    ("OBSERVATIONS", "observations_max", lambda s: [observation_line(o) for o in s.observations]),
    ("ENTITIES", "entities_max", lambda s: [entity_line(e) for e in s.entities]),
    ("RELATIONS", "relations_max", lambda s: [relation_line(r) for r in s.relations]),
    ("PROVENANCE", "provenance_max", lambda s: [provenance_line(p) for p in s.provenance_index.values()]),
)


def render_prompt(state: ContextState, query: str, budget: TokenBudget) -> str:
    """Render the LLM-facing prompt: four labeled sections plus the query.

    Only text drawn from state fields and the query appears; section headers
    are structural and excluded from budget accounting.  Raises
    BudgetExceededError if any section's content exceeds its budget.
    """
    blocks: list[str] = []
    for header, budget_field, render in _SECTION_RENDERERS:
        content = "\n".join(render(state))
        limit = getattr(budget, budget_field)
        used = count_tokens(content)
        if used > limit:
            raise BudgetExceededError(
                f"section {header}: {used} tokens exceeds budget {limit}"
            )
        blocks.append(f"{header}:\n{content}")
    blocks.append(f"QUERY:\n{query}")
    return "\n\n".join(blocks)
