"""Context compiler: merge fragments, filter, score, and enforce budgets.

The pipeline is concatenate -> merge overlapping entities -> drop
low-confidence items -> score relevance against the query -> greedy budget
admission.  Every step is deterministic and order-independent in the input
fragments, so compiling F twice or F followed by a copy of F yields
byte-identical canonical states.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .schema import (
    Box,
    ContextState,
    Entity,
    Observation,
    Provenance,
    Relation,
    TokenBudget,
    count_tokens,
    entity_line,
    observation_line,
    provenance_line,
    referenceable_ids,
    relation_line,
)

__all__ = [
    "CompileError",
    "CompileInput",
    "compile_context",
    "enforce_budget",
    "filter_low_confidence",
    "merge_entities",
    "score_relevance",
]

_TERM = re.compile(r"[a-z0-9]+")


class CompileError(ValueError):
    """A fragment is malformed (named in the message)."""


@dataclass(frozen=True, slots=True)
class CompileInput:
    fragments: tuple[ContextState, ...]
    query: str
    budgets: TokenBudget
    confidence_floors: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "fragments", tuple(self.fragments))


# ---------------------------------------------------------------------------
# Entity merging.
# ---------------------------------------------------------------------------

def _primary_source(item) -> str:
    return item.provenance[0].source_id


def _spans_overlap(a: tuple[int, int] | None, b: tuple[int, int] | None) -> bool:
    if a is None or b is None:
        return False
    return max(a[0], b[0]) < min(a[1], b[1])


def _regions_close(a: Box | None, b: Box | None) -> bool:
    return a is not None and b is not None and a.iou(b) >= 0.5


def _should_merge(a: Entity, b: Entity) -> bool:
    if a.id == b.id:
        return True
    if a.kind != b.kind or _primary_source(a) != _primary_source(b):
        return False
    return _spans_overlap(a.span, b.span) or _regions_close(a.region, b.region)


def _dedupe_provenance(entries: list[Provenance]) -> tuple[Provenance, ...]:
    seen = set()
    out = []
    for p in entries:
        key = (p.source_id, p.content_hash, p.timestamp_str(), p.locator)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return tuple(out)


def _member_order(e: Entity):
    # total order independent of input arrangement, even for id collisions
    first = e.provenance[0]
    return (
        e.id,
        _primary_source(e),
        e.span if e.span is not None else (-1, -1),
        e.confidence,
        e.text or "",
        first.locator or "",
        first.timestamp_str(),
    )


def _merge_group(group: list[Entity]) -> Entity:
    group = sorted(group, key=_member_order)
    spans = [e.span for e in group if e.span is not None]
    regions = [e.region for e in group if e.region is not None]
    region = None
    for r in regions:
        region = r if region is None else region.union(r)
    span = (min(s[0] for s in spans), max(s[1] for s in spans)) if spans else None
    confidence = max(e.confidence for e in group)
    texted = [e for e in group if e.text is not None]
    text = max(texted, key=lambda e: (e.confidence, e.id)).text if texted else None
    provenance = _dedupe_provenance([p for e in group for p in e.provenance])
    return Entity(group[0].id, group[0].kind, confidence, provenance,
                  text=text, region=region, span=span)


def _union_find_pass(reps: list[Entity]) -> list[list[int]] | None:
    """One union-find sweep over representatives; None when nothing merged."""
    n = len(reps)
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merged_any = False
    for i in range(n):
        for j in range(i + 1, n):
            if _should_merge(reps[i], reps[j]):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
                    merged_any = True
    if not merged_any:
        return None
    buckets: dict[int, list[int]] = {}
    for i in range(n):
        buckets.setdefault(find(i), []).append(i)
    return list(buckets.values())


def _entity_groups(entities: list[Entity]) -> list[list[Entity]]:
    """Groups of original entities under the merge condition, iterated to
    fixpoint: each pass re-evaluates the condition on merged representatives,
    so a hull that newly overlaps a neighbor keeps absorbing it."""
    groups = [[e] for e in entities]
    while len(groups) > 1:
        reps = [group[0] if len(group) == 1 else _merge_group(group) for group in groups]
        buckets = _union_find_pass(reps)
        if buckets is None:
            break
        groups = [[e for k in bucket for e in groups[k]] for bucket in buckets]
    return groups


def _sorted_merged(groups: list[list[Entity]]) -> list[Entity]:
    merged = [_merge_group(group) for group in groups]

    def sort_key(e: Entity):
        span_start = e.span[0] if e.span is not None else float("inf")
        return (_primary_source(e), span_start, e.id)

    return sorted(merged, key=sort_key)


def merge_entities(entities: list[Entity]) -> list[Entity]:
    """Collapse duplicates and overlapping detections of the same thing.

    Two entities merge when they share an id, or share kind and primary
    source and either their character spans overlap or their regions have
    IoU >= 0.5; merging closes transitively.  The merged entity takes the
    union geometry, the max confidence, the higher-confidence text, and the
    concatenated deduplicated provenance under the smallest member id.
    """
    return _sorted_merged(_entity_groups(entities))


def _merge_observations(observations: list[Observation]) -> list[Observation]:
    """Exact-duplicate texts from the same source collapse to one observation."""
    groups: dict[tuple[str, str], list[Observation]] = {}
    for obs in observations:
        groups.setdefault((_primary_source(obs), obs.text), []).append(obs)
    out = []
    for group in groups.values():
        group = sorted(group, key=lambda o: (o.id, o.provenance[0].timestamp_str()))
        out.append(
            Observation(
                group[0].id,
                group[0].text,
                max(o.score for o in group),
                _dedupe_provenance([p for o in group for p in o.provenance]),
            )
        )
    return sorted(out, key=lambda o: (_primary_source(o), o.id, o.text))


def _merge_relations(relations: list[Relation], id_map: dict[str, str]) -> list[Relation]:
    """Rewrite endpoints onto merged ids; drop self-loops; dedupe triples."""
    groups: dict[tuple[str, str, str], list[Relation]] = {}
    for rel in relations:
        subject = id_map.get(rel.subject, rel.subject)
        obj = id_map.get(rel.object, rel.object)
        if subject == obj:
            continue
        groups.setdefault((rel.kind.value, subject, obj), []).append(
            replace(rel, subject=subject, object=obj)
        )
    out = []
    for group in groups.values():
        group = sorted(group, key=lambda r: r.id)
        out.append(
            replace(group[0], provenance=_dedupe_provenance([p for r in group for p in r.provenance]))
        )
    return sorted(out, key=lambda r: (r.id, r.kind.value, r.subject, r.object))


# ---------------------------------------------------------------------------
# Filtering and scoring.
# ---------------------------------------------------------------------------

def filter_low_confidence(state: ContextState, floors: dict[str, float]) -> ContextState:
    """Drop entities below their kind's floor (>= keeps) and any relation that
    loses an endpoint."""
    kept = tuple(
        e for e in state.entities if e.confidence >= floors.get(e.kind.value, 0.0)
    )
    known = {e.id for e in kept} | {o.id for o in state.observations}
    relations = tuple(
        r for r in state.relations if r.subject in known and r.object in known
    )
    return ContextState.build(state.observations, kept, relations)


def score_relevance(text: str, query: str) -> float:
    """Fraction of query terms present in the text (lowercase alphanumeric)."""
    query_terms = set(_TERM.findall(query.lower()))
    if not query_terms:
        return 0.0
    item_terms = set(_TERM.findall(text.lower()))
    return len(query_terms & item_terms) / len(query_terms)


# ---------------------------------------------------------------------------
# Budget enforcement.
# ---------------------------------------------------------------------------

def _admit(items, render, budget: int, score_of) -> list:
    """Greedy admission in (score desc, id asc) order; items that would push
    the running token total over budget are skipped, not terminal."""
    admitted = []
    total = 0
    for item in sorted(items, key=lambda it: (-score_of(it), it.id)):
        cost = count_tokens(render(item))
        if total + cost <= budget:
            admitted.append(item)
            total += cost
    return admitted


def enforce_budget(
    state: ContextState,
    budgets: TokenBudget,
    scores: dict[str, float] | None = None,
) -> ContextState:
    """Trim each field to its token budget.

    Item scores come from the provided map, falling back to observation score
    and entity confidence; relations inherit their max endpoint score and are
    admitted only when both endpoints survived.  Provenance entries of admitted
    items are kept, trimmed oldest-first if they exceed their own budget.
    """
    scores = scores or {}

    def obs_score(o: Observation) -> float:
        return scores.get(o.id, o.score)

    def ent_score(e: Entity) -> float:
        return scores.get(e.id, e.confidence)

    observations = _admit(state.observations, observation_line, budgets.observations_max, obs_score)
    entities = _admit(state.entities, entity_line, budgets.entities_max, ent_score)

    admitted_ids = {o.id for o in observations} | {e.id for e in entities}
    endpoint_score: dict[str, float] = {o.id: obs_score(o) for o in state.observations}
    endpoint_score.update({e.id: ent_score(e) for e in state.entities})

    def rel_score(r: Relation) -> float:
        return scores.get(
            r.id, max(endpoint_score.get(r.subject, 0.0), endpoint_score.get(r.object, 0.0))
        )

    linkable = [
        r for r in state.relations if r.subject in admitted_ids and r.object in admitted_ids
    ]
    relations = _admit(linkable, relation_line, budgets.relations_max, rel_score)

    result = ContextState.build(observations, entities, relations)
    index = dict(result.provenance_index)
    total = sum(count_tokens(provenance_line(p)) for p in index.values())
    if total > budgets.provenance_max:
        # oldest first by (timestamp, source_id) until the budget holds
        for source_id, prov in sorted(index.items(), key=lambda kv: (kv[1].timestamp, kv[0])):
            if total <= budgets.provenance_max:
                break
            total -= count_tokens(provenance_line(prov))
            del index[source_id]
    return ContextState(result.observations, result.entities, result.relations, index)


# ---------------------------------------------------------------------------
# The full pipeline.
# ---------------------------------------------------------------------------

def compile_context(input: CompileInput) -> ContextState:
    """concatenate -> merge -> filter -> score -> budget; the result obeys all
    state invariants and is independent of fragment order."""
    for index, fragment in enumerate(input.fragments):
        known = referenceable_ids(fragment)
        for rel in fragment.relations:
            for endpoint in (rel.subject, rel.object):
                if endpoint not in known:
                    raise CompileError(
                        f"fragment {index}: relation {rel.id!r} endpoint {endpoint!r} dangling"
                    )

    all_obs = [o for f in input.fragments for o in f.observations]
    all_ents = [e for f in input.fragments for e in f.entities]
    all_rels = [r for f in input.fragments for r in f.relations]

    groups = _entity_groups(all_ents)
    merged_entities = _sorted_merged(groups)
    id_map = {
        member.id: min(e.id for e in group) for group in groups for member in group
    }
    observations = _merge_observations(all_obs)
    relations = _merge_relations(all_rels, id_map)

    state = filter_low_confidence(
        ContextState.build(observations, merged_entities, relations),
        input.confidence_floors,
    )

    scored_obs = tuple(
        replace(o, score=score_relevance(o.text, input.query)) for o in state.observations
    )
    scores = {e.id: score_relevance(e.text or "", input.query) for e in state.entities}
    scores.update({o.id: o.score for o in scored_obs})
    state = ContextState.build(scored_obs, state.entities, state.relations)
    return enforce_budget(state, input.budgets, scores)
