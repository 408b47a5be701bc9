"""Task typing, chain enumeration/selection, execution and fallback."""

from __future__ import annotations

import random
import time

import pytest

from interfaze.adapters import MockFailure, Tool
from interfaze.controller import (
    ChainEstimate,
    ChainExecutionError,
    NoFeasibleChainError,
    Primitive,
    PrimitiveKind,
    TaskRule,
    ToolChain,
    enumerate_chains,
    execute_chain,
    predict_task_type,
    select_chain,
)
from interfaze.ingress import IngressSummary, Modality, Request, SafetyVerdict

from .runtime_fixtures import (
    FailSwitch,
    build_runtime,
    direct_chain,
    estimate,
    llm_step,
    probe_step,
)

RULES = (
    TaskRule("code", "query", r"```"),
    TaskRule("transcribe", "modality", "audio"),
    TaskRule("tool_usage", "query", r"how do i use"),
)


def summary(*modalities: Modality) -> IngressSummary:
    return IngressSummary(frozenset(modalities or (Modality.TEXT,)), SafetyVerdict.ALLOW, "")


def req(text="question", **kwargs) -> Request:
    return Request(id="r1", text=text, **kwargs)


class TestPredictTaskType:
    def test_fenced_code_block(self):
        assert predict_task_type(summary(), "run ```py\nx\n```", RULES) == "code"

    def test_audio_modality(self):
        assert predict_task_type(summary(Modality.AUDIO), "hello", RULES) == "transcribe"

    def test_default_general(self):
        assert predict_task_type(summary(), "plain question", RULES) == "general"


class TestChainValidation:
    def test_chain_must_end_in_llm(self):
        with pytest.raises(ValueError, match="call_llm"):
            ToolChain("bad", (probe_step(),))

    def test_llm_mid_chain_rejected(self):
        with pytest.raises(ValueError):
            ToolChain("bad", (llm_step(), probe_step(), llm_step()))


class TestEnumerateChains:
    def test_universal_chain_matches(self):
        registry = (direct_chain("u"),)
        assert enumerate_chains("anything", frozenset({Modality.TEXT}), registry) == [registry[0]]

    def test_modality_requirement_excludes(self):
        needs_audio = ToolChain("a", (llm_step(),), frozenset({Modality.AUDIO}))
        registry = (needs_audio, direct_chain("u"))
        got = enumerate_chains("general", frozenset({Modality.TEXT}), registry)
        assert [c.chain_id for c in got] == ["u"]

    def test_registry_order_preserved(self):
        rng = random.Random(7)
        ids = [f"c{i}" for i in range(8)]
        for _ in range(20):
            rng.shuffle(ids)
            registry = tuple(direct_chain(i) for i in ids)
            got = enumerate_chains("general", frozenset({Modality.TEXT}), registry)
            assert [c.chain_id for c in got] == ids

    def test_empty_result_is_error(self):
        registry = (ToolChain("a", (llm_step(),), frozenset({Modality.AUDIO})),)
        with pytest.raises(NoFeasibleChainError):
            enumerate_chains("general", frozenset({Modality.TEXT}), registry)


class TestSelectChain:
    def test_worked_example(self):
        chains = [direct_chain(c) for c in "ABC"]
        estimates = {
            "A": ChainEstimate("A", 0.9, 5, 0),
            "B": ChainEstimate("B", 0.8, 2, 0),
            "C": ChainEstimate("C", 0.6, 1, 0),
        }
        ordered, degraded = select_chain(chains, estimates, 0.75)
        assert [c.chain_id for c in ordered] == ["B", "A"]
        assert degraded is False

    def test_degraded_mode_by_quality(self):
        chains = [direct_chain(c) for c in "AB"]
        estimates = {
            "A": ChainEstimate("A", 0.5, 9, 0),
            "B": ChainEstimate("B", 0.6, 1, 0),
        }
        ordered, degraded = select_chain(chains, estimates, 0.75)
        assert [c.chain_id for c in ordered] == ["B", "A"]
        assert degraded is True

    def test_matches_exhaustive_sort_oracle(self):
        rng = random.Random(11)
        for _ in range(100):
            n = rng.randint(1, 8)
            chains = [direct_chain(f"c{i}") for i in range(n)]
            estimates = {
                f"c{i}": ChainEstimate(
                    f"c{i}",
                    round(rng.random(), 2),
                    round(rng.uniform(0, 10), 2),
                    round(rng.uniform(0, 500), 1),
                )
                for i in range(n)
            }
            q_min = round(rng.random(), 2)
            ordered, degraded = select_chain(chains, estimates, q_min)
            feasible = [c for c in chains if estimates[c.chain_id].predicted_quality >= q_min]
            if feasible:
                expected = sorted(
                    feasible,
                    key=lambda c: (
                        estimates[c.chain_id].cost_proxy,
                        estimates[c.chain_id].latency_proxy_ms,
                        c.chain_id,
                    ),
                )
                assert not degraded
            else:
                expected = sorted(
                    chains,
                    key=lambda c: (
                        -estimates[c.chain_id].predicted_quality,
                        estimates[c.chain_id].cost_proxy,
                        c.chain_id,
                    ),
                )
                assert degraded
            assert [c.chain_id for c in ordered] == [c.chain_id for c in expected]

    def test_missing_estimate_is_error(self):
        with pytest.raises(KeyError):
            select_chain([direct_chain("x")], {}, 0.5)

    def test_determinism(self):
        chains = [direct_chain(f"c{i}") for i in range(5)]
        estimates = {f"c{i}": ChainEstimate(f"c{i}", 0.8, 1.0, 5.0) for i in range(5)}
        a = select_chain(chains, estimates, 0.5)
        b = select_chain(list(reversed(chains)), estimates, 0.5)
        assert [c.chain_id for c in a[0]] == [c.chain_id for c in b[0]]


class TestExecuteChain:
    def test_single_healthy_chain(self):
        runtime = build_runtime()
        result = execute_chain(runtime, [direct_chain()], req())
        assert result.answer.startswith("ANSWER(")
        assert all(r.status == "ok" for r in result.trace)
        assert result.trace[-1].kind == "call_llm"
        runtime.close()

    def test_failed_perception_falls_back(self):
        switch = FailSwitch()
        switch.failing = True
        chain_a = ToolChain("with-probe", (probe_step(), llm_step()))
        chain_b = direct_chain("plain")
        runtime = build_runtime(
            chains=(chain_a, chain_b),
            estimates={"with-probe": estimate("with-probe", cost=1), "plain": estimate("plain", cost=2)},
            extra_mocks={"probe-switch": (Tool.CLASSIFY, switch)},
        )
        result = execute_chain(runtime, [chain_a, chain_b], req())
        assert result.chain_id == "plain"
        statuses = [(r.chain_id, r.status) for r in result.trace]
        assert ("with-probe", "error") in statuses
        assert statuses[-1] == ("plain", "ok")
        runtime.close()

    def test_exactly_one_llm_call_in_success(self):
        runtime = build_runtime()
        result = execute_chain(runtime, [direct_chain()], req())
        executed = [r for r in result.trace if r.chain_id == result.chain_id and r.status == "ok"]
        assert [r.kind for r in executed].count("call_llm") == 1
        assert executed[-1].kind == "call_llm"
        runtime.close()

    def test_deadline_shorter_than_first_step(self):
        def sleepy(request):
            time.sleep(0.5)
            return {"label": "late"}

        chain = ToolChain("slow", (probe_step(), llm_step()))
        runtime = build_runtime(
            chains=(chain,),
            estimates={"slow": estimate("slow")},
            extra_mocks={"sleepy": (Tool.CLASSIFY, sleepy)},
        )
        with pytest.raises(ChainExecutionError) as err:
            execute_chain(runtime, [chain], req(), deadline_ms=50)
        assert err.value.code == "DEADLINE"
        runtime.close()

    def test_all_chains_exhausted(self):
        switch = FailSwitch()
        switch.failing = True
        chain = ToolChain("only", (probe_step(), llm_step()))
        runtime = build_runtime(
            chains=(chain,),
            estimates={"only": estimate("only")},
            extra_mocks={"probe": (Tool.CLASSIFY, switch)},
        )
        with pytest.raises(ChainExecutionError) as err:
            execute_chain(runtime, [chain], req())
        assert err.value.code == "CHAINS_EXHAUSTED"
        assert err.value.trace
        runtime.close()

    def test_sandbox_chain_records_observation(self):
        chain = ToolChain("code-run", (Primitive(PrimitiveKind.RUN_SANDBOX), llm_step()))
        runtime = build_runtime(chains=(chain,), estimates={"code-run": estimate("code-run")})
        result = execute_chain(runtime, [chain], req("run this ```py\nprint(1)\n```"))
        assert any("print(1)" in o.text for o in result.state.observations)
        runtime.close()

    def test_sandbox_timeout_engages_fallback(self):
        def hanging(request):
            time.sleep(5)

        chain_a = ToolChain("sandboxed", (Primitive(PrimitiveKind.RUN_SANDBOX), llm_step()))
        chain_b = direct_chain("plain")
        runtime = build_runtime(
            chains=(chain_a, chain_b),
            estimates={"sandboxed": estimate("sandboxed", cost=1), "plain": estimate("plain", cost=2)},
            extra_mocks={"hanging-sandbox": (Tool.SANDBOX, hanging)},
        )
        result = execute_chain(
            runtime, [chain_a, chain_b], req("``` d ```"), deadline_ms=30000
        )
        assert result.chain_id == "plain"
        assert any(r.chain_id == "sandboxed" and r.status == "timeout" for r in result.trace)
        runtime.close()
