"""Config file loading and validation.

One JSON file defines adapters, chains, estimates, budgets, rules, indexes,
and tuning defaults; every problem is reported with the offending path so a
bad deployment fails loudly at startup.  See docs/config.md for the schema.
"""

from __future__ import annotations

import json
from dataclasses import fields as dataclass_fields
from datetime import datetime, timezone
from pathlib import Path

from .adapters import AdapterDescriptor, AdapterRuntime, MockFailure, Tool, Transport, table_mock
from .audio import AudioConfig
from .controller import ChainEstimate, Primitive, PrimitiveKind, TaskRule, ToolChain
from .gateway import mock_llm_answer
from .ingress import Modality, load_safety_rules, parse_safety_rules
from .retrieval import load_index
from .runtime import Defaults, Runtime
from .schema import TIMESTAMP_FORMAT, TokenBudget

__all__ = ["ConfigError", "load_config", "load_runtime"]


class ConfigError(ValueError):
    """Startup-time configuration problem; message names the bad field."""


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"{context}: missing required field {key!r}")
    return mapping[key]


def _builtin_mock(kind: str, fixture: dict | None, context: str):
    if kind == "echo":
        return lambda request: request.payload
    if kind == "llm_digest":
        return lambda request: {"text": mock_llm_answer(request.payload["prompt"])}
    if kind == "sandbox_echo":
        return lambda request: {
            "stdout": request.payload["code"],
            "exit_status": 0,
            "truncated": False,
        }
    if kind == "table":
        if fixture is None:
            raise ConfigError(f"{context}: table mock needs a fixture")
        return table_mock(fixture)
    if kind == "fail":
        def failing(request):
            raise MockFailure("UNAVAILABLE", "configured to fail")
        return failing
    raise ConfigError(f"{context}: unknown mock kind {kind!r}")


def _load_adapters(raw: list, base: Path) -> tuple[AdapterRuntime, dict[Tool, str]]:
    runtime = AdapterRuntime()
    by_tool: dict[Tool, str] = {}
    for i, entry in enumerate(raw):
        context = f"adapters[{i}]"
        adapter_id = _require(entry, "adapter_id", context)
        try:
            tool = Tool(_require(entry, "tool", context))
            transport = Transport(entry.get("transport", "in_process_mock"))
        except ValueError as exc:
            raise ConfigError(f"{context}: {exc}") from exc
        descriptor = AdapterDescriptor(
            adapter_id=adapter_id,
            tool=tool,
            transport=transport,
            timeout_ms=int(entry.get("timeout_ms", 5000)),
            batch_max=int(entry.get("batch_max", 8)),
            cacheable=bool(entry.get("cacheable", False)),
            endpoint=str(entry.get("endpoint", "")),
        )
        mock = None
        if transport is Transport.IN_PROCESS_MOCK:
            mock_spec = entry.get("mock", {"kind": "echo"})
            fixture = None
            if "fixture" in mock_spec:
                fixture_path = base / mock_spec["fixture"]
                if not fixture_path.exists():
                    raise ConfigError(f"{context}: fixture {fixture_path} not found")
                fixture = json.loads(fixture_path.read_text(encoding="utf-8"))
            mock = _builtin_mock(mock_spec.get("kind", "echo"), fixture, context)
        runtime.register(descriptor, mock)
        by_tool.setdefault(tool, adapter_id)
    return runtime, by_tool


def _load_chain(entry: dict, index: int) -> ToolChain:
    context = f"chains[{index}]"
    steps = []
    for j, raw_step in enumerate(_require(entry, "steps", context)):
        try:
            kind = PrimitiveKind(_require(raw_step, "kind", f"{context}.steps[{j}]"))
        except ValueError as exc:
            raise ConfigError(f"{context}.steps[{j}]: {exc}") from exc
        steps.append(Primitive(kind, raw_step.get("params", {})))
    try:
        modalities = frozenset(Modality(m) for m in entry.get("required_modalities", []))
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc
    try:
        return ToolChain(
            chain_id=_require(entry, "chain_id", context),
            steps=tuple(steps),
            required_modalities=modalities,
            task_tags=tuple(entry.get("task_tags", ["*"])),
        )
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return data


def load_runtime(path: str | Path) -> Runtime:
    """Parse, validate, and wire a Runtime from one config file."""
    path = Path(path)
    data = load_config(path)
    base = path.parent

    adapters, by_tool = _load_adapters(data.get("adapters", []), base)
    for role_key, tool in (("llm_adapter", Tool.LLM), ("sandbox_adapter", Tool.SANDBOX)):
        if role_key in data:
            adapter_id = data[role_key]
            if adapter_id not in adapters.descriptors:
                raise ConfigError(f"{role_key}: adapter {adapter_id!r} is not registered")
            by_tool[tool] = adapter_id

    chains = tuple(_load_chain(entry, i) for i, entry in enumerate(data.get("chains", [])))
    seen_ids = set()
    for chain in chains:
        if chain.chain_id in seen_ids:
            raise ConfigError(f"chains: duplicate chain_id {chain.chain_id!r}")
        seen_ids.add(chain.chain_id)

    estimates = {}
    for chain_id, raw in data.get("estimates", {}).items():
        try:
            estimates[chain_id] = ChainEstimate(
                chain_id,
                float(_require(raw, "quality", f"estimates[{chain_id}]")),
                float(raw.get("cost", 0.0)),
                float(raw.get("latency_ms", 0.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"estimates[{chain_id}]: {exc}") from exc
    for chain in chains:
        if chain.chain_id not in estimates:
            raise ConfigError(f"estimates: missing entry for chain {chain.chain_id!r}")

    raw_budget = data.get("budgets", {})
    try:
        budgets = TokenBudget(
            int(raw_budget.get("observations_max", 400)),
            int(raw_budget.get("entities_max", 400)),
            int(raw_budget.get("relations_max", 200)),
            int(raw_budget.get("provenance_max", 200)),
        )
    except ValueError as exc:
        raise ConfigError(f"budgets: {exc}") from exc

    if "safety_rules_file" in data:
        rules_path = base / data["safety_rules_file"]
        if not rules_path.exists():
            raise ConfigError(f"safety_rules_file: {rules_path} not found")
        safety_rules = load_safety_rules(str(rules_path))
    else:
        try:
            safety_rules = parse_safety_rules(data.get("safety_rules", []))
        except ValueError as exc:
            raise ConfigError(f"safety_rules: {exc}") from exc

    task_rules = []
    for i, raw in enumerate(data.get("task_rules", [])):
        match = raw.get("match", "query")
        if match not in ("query", "modality"):
            raise ConfigError(f"task_rules[{i}]: match must be 'query' or 'modality'")
        task_rules.append(TaskRule(_require(raw, "task", f"task_rules[{i}]"), match,
                                   _require(raw, "pattern", f"task_rules[{i}]")))

    indexes = {}
    for kind, rel_path in data.get("indexes", {}).items():
        index_path = base / rel_path
        if not index_path.exists():
            raise ConfigError(f"indexes[{kind}]: {index_path} not found")
        indexes[kind] = load_index(index_path)
        if indexes[kind].index_kind != kind:
            raise ConfigError(
                f"indexes[{kind}]: file holds a {indexes[kind].index_kind!r} index"
            )

    defaults_raw = data.get("defaults", {})
    known = {f.name for f in dataclass_fields(Defaults)}
    unknown = set(defaults_raw) - known
    if unknown:
        raise ConfigError(f"defaults: unknown keys {sorted(unknown)}")
    defaults = Defaults(**defaults_raw)

    audio_raw = data.get("audio", {})
    known_audio = {f.name for f in dataclass_fields(AudioConfig)}
    unknown = set(audio_raw) - known_audio
    if unknown:
        raise ConfigError(f"audio: unknown keys {sorted(unknown)}")
    audio = AudioConfig(**audio_raw)

    if "fixed_time" in data:
        try:
            fixed = datetime.strptime(data["fixed_time"], TIMESTAMP_FORMAT).replace(
                tzinfo=timezone.utc
            )
        except ValueError as exc:
            raise ConfigError(f"fixed_time: expected {TIMESTAMP_FORMAT}: {exc}") from exc
        clock = lambda: fixed  # noqa: E731 (deterministic test clock)
    else:
        clock = lambda: datetime.now(timezone.utc)  # noqa: E731

    trace_log = (base / data["trace_log"]) if "trace_log" in data else None

    return Runtime(
        adapters=adapters,
        adapter_ids=by_tool,
        chains=chains,
        estimates=estimates,
        budgets=budgets,
        safety_rules=safety_rules,
        task_rules=tuple(task_rules),
        confidence_floors={
            str(k): float(v) for k, v in data.get("confidence_floors", {}).items()
        },
        indexes=indexes,
        defaults=defaults,
        audio=audio,
        clock=clock,
        trace_log=trace_log,
    )
