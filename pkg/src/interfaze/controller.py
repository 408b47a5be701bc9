"""Controller: task typing, chain selection under a quality floor, execution
with per-step timeouts, and fallback to the next feasible chain.

Selection is lexicographic: among chains whose predicted quality clears
q_min, cheapest first, then lowest latency, then chain id.  When nothing is
feasible the controller degrades to quality-descending order and flags it.
Every chain ends in exactly one call_llm step, and that step sees only the
rendered prompt over the compiled state, never raw payloads.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum

from .adapters import ERR_TIMEOUT, AdapterRequest, Tool
from .audio import PipelineError, decode_wav, transcribe_waveform
from .compiler import CompileInput, compile_context, score_relevance
from .documents import PageSegment, process_document
from .ingress import Attachment, IngressSummary, MediaKind, Modality, Request
from .retrieval import build_index, search
from .runtime import Runtime
from .schema import (
    ContextState,
    Entity,
    EntityKind,
    Observation,
    Provenance,
    TokenBudget,
    content_digest,
    render_prompt,
)
from .vision import TextEmbedding, VisualTokens, grid_to_pixels, group_regions, relevance_map
from .web import blocks_to_state, extract_blocks, strip_boilerplate

__all__ = [
    "ChainEstimate",
    "ChainExecutionError",
    "ChainResult",
    "NoFeasibleChainError",
    "Primitive",
    "PrimitiveKind",
    "StepRecord",
    "TaskRule",
    "ToolChain",
    "enumerate_chains",
    "execute_chain",
    "predict_task_type",
    "select_chain",
]

UNIVERSAL_TAG = "*"


class PrimitiveKind(str, Enum):
    QUERY_INDEX = "query_index"
    FETCH_PARSE = "fetch_parse"
    RUN_PERCEPTION = "run_perception"
    RUN_SANDBOX = "run_sandbox"
    CALL_LLM = "call_llm"


@dataclass(frozen=True, slots=True)
class Primitive:
    kind: PrimitiveKind
    params: dict = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class ToolChain:
    chain_id: str
    steps: tuple[Primitive, ...]
    required_modalities: frozenset[Modality] = frozenset()
    task_tags: tuple[str, ...] = (UNIVERSAL_TAG,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "required_modalities", frozenset(self.required_modalities))
        object.__setattr__(self, "task_tags", tuple(self.task_tags))
        if not self.steps or self.steps[-1].kind is not PrimitiveKind.CALL_LLM:
            raise ValueError(f"chain {self.chain_id!r}: last step must be call_llm")
        llm_steps = [s for s in self.steps if s.kind is PrimitiveKind.CALL_LLM]
        if len(llm_steps) != 1:
            raise ValueError(f"chain {self.chain_id!r}: call_llm has no successor, exactly one allowed")


@dataclass(frozen=True, slots=True)
class ChainEstimate:
    chain_id: str
    predicted_quality: float
    cost_proxy: float
    latency_proxy_ms: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.predicted_quality <= 1.0:
            raise ValueError("predicted_quality outside [0,1]")
        if self.cost_proxy < 0 or self.latency_proxy_ms < 0:
            raise ValueError("cost/latency proxies must be >= 0")


@dataclass(frozen=True, slots=True)
class TaskRule:
    task_type: str
    match: str      # "query" (regex over query) or "modality" (membership test)
    pattern: str


class NoFeasibleChainError(RuntimeError):
    """No registered chain fits the request's task type and modalities."""


@dataclass(frozen=True, slots=True)
class StepRecord:
    chain_id: str
    step_index: int
    kind: str
    status: str          # ok | error | timeout
    duration_ms: float
    detail: str = ""


@dataclass(frozen=True, slots=True)
class ChainResult:
    answer: str
    state: ContextState
    trace: tuple[StepRecord, ...]
    chain_id: str
    prompt: str
    degraded: bool = False


class ChainExecutionError(RuntimeError):
    def __init__(self, code: str, trace: list[StepRecord], state: ContextState) -> None:
        super().__init__(code)
        self.code = code
        self.trace = tuple(trace)
        self.state = state


# ---------------------------------------------------------------------------
# Task typing and selection.
# ---------------------------------------------------------------------------

def predict_task_type(
    summary: IngressSummary, query: str, rules: tuple[TaskRule, ...]
) -> str:
    """First matching rule wins; default "general"."""
    import re

    for rule in rules:
        if rule.match == "query" and re.search(rule.pattern, query, re.DOTALL):
            return rule.task_type
        if rule.match == "modality" and Modality(rule.pattern) in summary.modalities:
            return rule.task_type
    return "general"


def enumerate_chains(
    task_type: str,
    modalities: frozenset[Modality],
    registry: tuple[ToolChain, ...],
) -> list[ToolChain]:
    """Chains matching the task tag whose required modalities are satisfied,
    in stable registry order."""
    if not registry:
        raise NoFeasibleChainError("chain registry is empty")
    matching = [
        chain
        for chain in registry
        if (UNIVERSAL_TAG in chain.task_tags or task_type in chain.task_tags)
        and chain.required_modalities <= modalities
    ]
    if not matching:
        raise NoFeasibleChainError(
            f"no chain for task {task_type!r} with modalities {sorted(m.value for m in modalities)}"
        )
    return matching


def select_chain(
    candidates: list[ToolChain],
    estimates: dict[str, ChainEstimate],
    q_min: float,
) -> tuple[list[ToolChain], bool]:
    """Order candidates into a fallback list.

    Feasible chains (quality >= q_min) sort by (cost, latency, chain_id).
    With no feasible chain the list degrades to (quality desc, cost asc,
    chain_id) and the degraded flag is set.
    """
    for chain in candidates:
        if chain.chain_id not in estimates:
            raise KeyError(f"no estimate for chain {chain.chain_id!r}")
    feasible = [c for c in candidates if estimates[c.chain_id].predicted_quality >= q_min]
    if feasible:
        feasible.sort(
            key=lambda c: (
                estimates[c.chain_id].cost_proxy,
                estimates[c.chain_id].latency_proxy_ms,
                c.chain_id,
            )
        )
        return feasible, False
    degraded = sorted(
        candidates,
        key=lambda c: (
            -estimates[c.chain_id].predicted_quality,
            estimates[c.chain_id].cost_proxy,
            c.chain_id,
        ),
    )
    return degraded, True


# ---------------------------------------------------------------------------
# Execution.
# ---------------------------------------------------------------------------

@dataclass
class _ChainContext:
    fragments: list[ContextState] = field(default_factory=list)
    segments: list[PageSegment] = field(default_factory=list)
    answer: str | None = None
    state: ContextState = ContextState()
    prompt: str = ""


class _StepFailure(Exception):
    def __init__(self, message: str, timed_out: bool = False, deadline_bound: bool = False):
        super().__init__(message)
        self.timed_out = timed_out
        self.deadline_bound = deadline_bound


def _attachment_provenance(runtime: Runtime, attachment: Attachment) -> Provenance:
    return Provenance(
        f"attachment:{attachment.name}",
        content_digest(attachment.payload),
        runtime.clock(),
    )


def _invoke_with_budget(runtime: Runtime, tool: Tool, request: AdapterRequest, remaining_ms: int):
    descriptor = runtime.descriptor_for(tool)
    effective = min(descriptor.timeout_ms, max(remaining_ms, 1))
    response = runtime.adapters.invoke(replace(descriptor, timeout_ms=effective), request)
    if not response.ok:
        timed_out = response.error.get("code") == ERR_TIMEOUT
        raise _StepFailure(
            f"{tool.value}: {response.error.get('code')}: {response.error.get('message', '')}",
            timed_out=timed_out,
            deadline_bound=timed_out and effective < descriptor.timeout_ms,
        )
    return response.result


def _hit_observations(runtime: Runtime, kind: str, hits, query: str) -> ContextState:
    if not hits:
        return ContextState()
    top = max(h.score for h in hits)
    observations = [
        Observation(
            f"hit:{kind}:{h.segment_id}",
            h.provenance.locator and f"{h.provenance.locator}" or h.segment_id,
            min(1.0, h.score / top) if top > 0 else 0.0,
            (h.provenance,),
        )
        for h in hits
    ]
    # observation text should carry the segment content, not just its id
    return ContextState.build(observations, [], [])


def _step_query_index(runtime: Runtime, ctx: _ChainContext, request: Request, params: dict) -> str:
    kind = params.get("kind", "web")
    k = int(params.get("k", runtime.defaults.retrieval_k))
    query = request.text or ""
    if kind == "document":
        index = build_index("document", ctx.segments)
    else:
        index = runtime.indexes.get(kind)
        if index is None:
            raise _StepFailure(f"no standing index of kind {kind!r}")
    hits = search(index, query, k)
    observations = []
    top = hits[0].score if hits else 0.0
    for hit in hits:
        segment = index.segments[hit.segment_id]
        observations.append(
            Observation(
                f"hit:{kind}:{hit.segment_id}",
                segment.text,
                min(1.0, hit.score / top) if top > 0 else 0.0,
                (hit.provenance,),
            )
        )
    ctx.fragments.append(ContextState.build(observations, [], []))
    return f"{len(hits)} hits in {kind}"


def _step_fetch_parse(runtime: Runtime, ctx: _ChainContext, request: Request,
                      params: dict, remaining_ms: int) -> str:
    urls = [params["url"]] if "url" in params else list(request.declared_urls)
    if not urls:
        raise _StepFailure("fetch_parse: request carries no URLs")
    for url in urls:
        result = _invoke_with_budget(
            runtime,
            Tool.RENDER_PAGE,
            AdapterRequest(
                id=f"render:{content_digest(url.encode())[:12]}",
                tool=Tool.RENDER_PAGE,
                op="render",
                payload={"url": url},
            ),
            remaining_ms,
        )
        markup = result["markup"]
        source = Provenance(url, content_digest(markup.encode("utf-8")), runtime.clock())
        try:
            blocks = extract_blocks(strip_boilerplate(markup))
        except ValueError as exc:
            raise _StepFailure(f"fetch_parse: {exc}") from exc
        ctx.fragments.append(blocks_to_state(blocks, source))
        for i, block in enumerate(blocks):
            ctx.segments.append(
                PageSegment(
                    f"{source.content_hash[:8]}:web{i}", 0, i, block.text,
                    replace(source, locator=f"chars {block.source_offset[0]}-{block.source_offset[1]}"),
                )
            )
    return f"parsed {len(urls)} page(s)"


def _text_attachment_fragment(runtime: Runtime, attachment: Attachment) -> tuple[ContextState, list[PageSegment]]:
    import re as _re

    source = _attachment_provenance(runtime, attachment)
    text = attachment.payload.decode("utf-8", errors="replace")
    paragraphs = [p.strip() for p in _re.split(r"\n\s*\n", text) if p.strip()]
    prefix = content_digest(source.source_id.encode())[:8]
    segments = [
        PageSegment(f"p0b{i}", 0, i, para, replace(source, locator=f"p0b{i}"))
        for i, para in enumerate(paragraphs)
    ]
    observations = [
        Observation(f"{prefix}:txt{i}", seg.text, 1.0, (seg.provenance,))
        for i, seg in enumerate(segments)
    ]
    return ContextState.build(observations, [], []), segments


def _step_run_perception(runtime: Runtime, ctx: _ChainContext, request: Request,
                         params: dict, remaining_ms: int) -> str:
    mode = params.get("mode", "document")
    by_tool = runtime.by_tool()
    handled = 0
    try:
        if mode == "audio":
            for attachment in request.attachments:
                if attachment.media_kind is not MediaKind.AUDIO:
                    continue
                waveform = decode_wav(attachment.payload)
                fragment = transcribe_waveform(
                    runtime.adapters, by_tool, waveform,
                    _attachment_provenance(runtime, attachment), runtime.audio,
                )
                ctx.fragments.append(fragment)
                handled += 1
        elif mode == "document":
            for attachment in request.attachments:
                if attachment.media_kind in (MediaKind.PDF, MediaKind.IMAGE):
                    fragment, segments = process_document(
                        runtime.adapters, by_tool, attachment.payload,
                        attachment.media_kind.value,
                        _attachment_provenance(runtime, attachment),
                        runtime.defaults.theta_e, runtime.defaults.max_block_tokens,
                    )
                elif attachment.media_kind is MediaKind.HTML:
                    source = _attachment_provenance(runtime, attachment)
                    blocks = extract_blocks(
                        strip_boilerplate(attachment.payload.decode("utf-8", errors="replace"))
                    )
                    fragment = blocks_to_state(blocks, source)
                    segments = [
                        PageSegment(f"p0b{i}", 0, i, b.text, replace(source, locator=f"p0b{i}"))
                        for i, b in enumerate(blocks)
                    ]
                elif attachment.media_kind is MediaKind.PLAIN_TEXT:
                    fragment, segments = _text_attachment_fragment(runtime, attachment)
                else:
                    continue  # unknown kinds skip the document pipeline
                ctx.fragments.append(fragment)
                ctx.segments.extend(segments)
                handled += 1
        elif mode == "vision":
            handled = _vision_pass(runtime, ctx, request, params, remaining_ms)
        elif mode == "probe":
            result = _invoke_with_budget(
                runtime,
                Tool(params.get("tool", "classify")),
                AdapterRequest(
                    id=f"probe:{content_digest(json.dumps(params, sort_keys=True).encode())[:12]}",
                    tool=Tool(params.get("tool", "classify")),
                    op=params.get("op", "classify"),
                    payload=params.get("payload", {}),
                ),
                remaining_ms,
            )
            source = Provenance(
                f"probe:{params.get('tool', 'classify')}",
                content_digest(json.dumps(result, sort_keys=True, default=str).encode()),
                runtime.clock(),
            )
            text = result if isinstance(result, str) else json.dumps(result, sort_keys=True)
            ctx.fragments.append(
                ContextState.build([Observation(f"{source.content_hash[:8]}:probe", text, 1.0, (source,))], [], [])
            )
            handled = 1
        else:
            raise _StepFailure(f"unknown perception mode {mode!r}")
    except PipelineError as exc:
        raise _StepFailure(str(exc)) from exc
    return f"{mode}: {handled} input(s)"


def _vision_pass(runtime: Runtime, ctx: _ChainContext, request: Request,
                 params: dict, remaining_ms: int) -> int:
    handled = 0
    for attachment in request.attachments:
        if attachment.media_kind is not MediaKind.IMAGE:
            continue
        source = _attachment_provenance(runtime, attachment)
        result = _invoke_with_budget(
            runtime,
            Tool.DETECT,
            AdapterRequest(
                id=f"detect:{source.content_hash[:12]}",
                tool=Tool.DETECT,
                op="ground",
                payload={
                    "image": {"encoding": "base64",
                              "data": base64.b64encode(attachment.payload).decode("ascii")},
                    "prompt": request.text or "",
                },
            ),
            remaining_ms,
        )
        tokens = VisualTokens(
            result["grid"], int(result["patch_size"]),
            (int(result["image_dims"][0]), int(result["image_dims"][1])),
        )
        text_emb = TextEmbedding(result["text_embedding"], request.text or "", float(result["temperature"]))
        rel = relevance_map(tokens, text_emb)
        theta = float(params.get("theta_s", runtime.defaults.theta_s))
        entities = []
        for i, gbox in enumerate(group_regions(rel, theta)):
            pbox = grid_to_pixels(gbox, tokens)
            peak = float(rel.scores[gbox.row_min : gbox.row_max + 1, gbox.col_min : gbox.col_max + 1].max())
            entities.append(
                Entity(
                    f"{source.content_hash[:8]}:region{i}",
                    EntityKind.BOUNDING_REGION,
                    peak,
                    (source,),
                    text=f"match for {text_emb.prompt!r}" if text_emb.prompt else "detected region",
                    region=pbox,
                )
            )
        ctx.fragments.append(ContextState.build([], entities, []))
        handled += 1
    return handled


def _step_run_sandbox(runtime: Runtime, ctx: _ChainContext, request: Request,
                      params: dict, remaining_ms: int) -> str:
    from .gateway import run_sandbox

    code = params.get("code") or _fenced_code(request.text or "")
    if not code:
        raise _StepFailure("run_sandbox: no code provided or found in request")
    limits = {
        "wall_ms": int(params.get("wall_ms", runtime.defaults.sandbox_wall_ms)),
        "output_bytes": int(params.get("output_bytes", runtime.defaults.sandbox_output_bytes)),
    }
    try:
        observation = run_sandbox(runtime, code, limits, remaining_ms)
    except PipelineError as exc:
        # a TIMEOUT observation is recorded in the trace detail; the chain
        # falls back per the perception-step failure rules
        raise _StepFailure(str(exc), timed_out="TIMEOUT" in str(exc)) from exc
    ctx.fragments.append(ContextState.build([observation], [], []))
    return "sandbox ok"


def _fenced_code(text: str) -> str:
    import re as _re

    match = _re.search(r"```(?:[a-zA-Z0-9_+-]*\n)?(.*?)```", text, _re.DOTALL)
    return match.group(1).strip() if match else ""


def _step_call_llm(runtime: Runtime, ctx: _ChainContext, request: Request,
                   remaining_ms: int) -> str:
    query = request.text or ""
    compiled = compile_context(
        CompileInput(tuple(ctx.fragments), query, runtime.budgets, runtime.confidence_floors)
    )
    prompt = render_prompt(compiled, query, runtime.budgets)
    result = _invoke_with_budget(
        runtime,
        Tool.LLM,
        AdapterRequest(
            id=f"llm:{content_digest(prompt.encode())[:12]}",
            tool=Tool.LLM,
            op="complete",
            payload={"prompt": prompt},
        ),
        remaining_ms,
    )
    ctx.state = compiled
    ctx.prompt = prompt
    ctx.answer = result["text"] if isinstance(result, dict) else str(result)
    return "llm answered"


def _best_effort_state(runtime: Runtime, ctx: _ChainContext, request: Request) -> ContextState:
    try:
        return compile_context(
            CompileInput(
                tuple(ctx.fragments), request.text or "", runtime.budgets, runtime.confidence_floors
            )
        )
    except Exception:
        return ContextState()


def execute_chain(
    runtime: Runtime,
    fallbacks: list[ToolChain],
    request: Request,
    deadline_ms: int | None = None,
    degraded: bool = False,
) -> ChainResult:
    """Run chains in fallback order until one fully succeeds.

    Any step error or timeout aborts the current chain and starts the next;
    hitting the overall deadline aborts everything with DEADLINE and the
    best-effort compiled state; exhausting the list raises CHAINS_EXHAUSTED.
    """
    if not fallbacks:
        raise ValueError("fallback list must be non-empty")
    deadline_ms = deadline_ms or runtime.defaults.deadline_ms
    started = time.monotonic()
    trace: list[StepRecord] = []
    last_ctx = _ChainContext()

    def remaining() -> int:
        return int(deadline_ms - (time.monotonic() - started) * 1000)

    for chain in fallbacks:
        ctx = _ChainContext()
        last_ctx = ctx
        chain_ok = True
        for index, step in enumerate(chain.steps):
            left = remaining()
            if left <= 0:
                raise ChainExecutionError(
                    "DEADLINE", trace, _best_effort_state(runtime, ctx, request)
                )
            step_started = time.monotonic()
            try:
                if step.kind is PrimitiveKind.QUERY_INDEX:
                    detail = _step_query_index(runtime, ctx, request, step.params)
                elif step.kind is PrimitiveKind.FETCH_PARSE:
                    detail = _step_fetch_parse(runtime, ctx, request, step.params, left)
                elif step.kind is PrimitiveKind.RUN_PERCEPTION:
                    detail = _step_run_perception(runtime, ctx, request, step.params, left)
                elif step.kind is PrimitiveKind.RUN_SANDBOX:
                    detail = _step_run_sandbox(runtime, ctx, request, step.params, left)
                else:
                    detail = _step_call_llm(runtime, ctx, request, left)
            except _StepFailure as failure:
                duration = (time.monotonic() - step_started) * 1000
                status = "timeout" if failure.timed_out else "error"
                trace.append(
                    StepRecord(chain.chain_id, index, step.kind.value, status, duration, str(failure))
                )
                if failure.deadline_bound:
                    raise ChainExecutionError(
                        "DEADLINE", trace, _best_effort_state(runtime, ctx, request)
                    ) from failure
                chain_ok = False
                break
            duration = (time.monotonic() - step_started) * 1000
            trace.append(
                StepRecord(chain.chain_id, index, step.kind.value, "ok", duration, detail)
            )
        if chain_ok:
            assert ctx.answer is not None
            return ChainResult(
                ctx.answer, ctx.state, tuple(trace), chain.chain_id, ctx.prompt, degraded
            )
    raise ChainExecutionError(
        "CHAINS_EXHAUSTED", trace, _best_effort_state(runtime, last_ctx, request)
    )
