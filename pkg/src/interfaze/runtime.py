"""Shared runtime wiring: adapters, chain registry, budgets, rules, indexes.

Built once from the config file at startup and shared read-only across
requests; the adapter cache inside AdapterRuntime is the only mutable part
and is safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from .adapters import AdapterDescriptor, AdapterRuntime, Tool
from .audio import AudioConfig
from .ingress import SafetyRule
from .retrieval import SegmentIndex
from .schema import TokenBudget

__all__ = ["Defaults", "Runtime"]


@dataclass(frozen=True, slots=True)
class Defaults:
    """Frozen tuning constants; values documented in docs/config.md."""

    q_min: float = 0.7
    deadline_ms: int = 30000
    retrieval_k: int = 5
    theta_e: float = 0.35
    theta_iou: float = 0.5
    theta_sim: float = 0.6
    theta_ocr: float = 0.6
    theta_s: float = 0.5
    max_block_tokens: int = 120
    sandbox_wall_ms: int = 5000
    sandbox_output_bytes: int = 4096


@dataclass
class Runtime:
    adapters: AdapterRuntime
    adapter_ids: dict[Tool, str]
    chains: tuple = ()
    estimates: dict = field(default_factory=dict)
    budgets: TokenBudget = TokenBudget(400, 400, 200, 200)
    safety_rules: tuple[SafetyRule, ...] = ()
    task_rules: tuple = ()
    confidence_floors: dict[str, float] = field(default_factory=dict)
    indexes: dict[str, SegmentIndex] = field(default_factory=dict)
    defaults: Defaults = Defaults()
    audio: AudioConfig = AudioConfig()
    clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc)
    trace_log: Path | None = None

    def descriptor_for(self, tool: Tool) -> AdapterDescriptor:
        adapter_id = self.adapter_ids.get(tool)
        if adapter_id is None:
            raise KeyError(f"no adapter configured for tool {tool.value!r}")
        return self.adapters.descriptor(adapter_id)

    def by_tool(self) -> dict[Tool, AdapterDescriptor]:
        return {tool: self.adapters.descriptor(aid) for tool, aid in self.adapter_ids.items()}

    def close(self) -> None:
        self.adapters.close()
