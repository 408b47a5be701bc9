"""CLI surfaces: run, index build, compile."""

from __future__ import annotations

import json

from click.testing import CliRunner

from interfaze.cli import main
from interfaze.schema import canonical_serialize

from .goldens import ensure_e2e_fixtures
from .helpers import obs, random_state


def test_run_text_matches_golden():
    directory = ensure_e2e_fixtures()
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["run", "--config", str(directory / "config.json"), "--query", "What is 2 plus 2?"],
    )
    assert result.exit_code == 0, result.output
    assert result.output.strip() == (directory / "response_text.json").read_text()


def test_run_with_file_attachment():
    directory = ensure_e2e_fixtures()
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "run",
            "--config", str(directory / "config.json"),
            "--query", "total amount due",
            "--file", str(directory / "invoice.pdf"),
            "--emit-trace",
        ],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.splitlines()[0])
    assert payload["interfaze"]["chain_id"] == "document"


def test_run_missing_config_exits_2(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, ["run", "--config", str(tmp_path / "nope.json"), "--query", "x"])
    assert result.exit_code == 2


def test_index_build(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "a.txt").write_text("def parse(): pass\n\nsecond paragraph here")
    out = tmp_path / "code.json"
    runner = CliRunner()
    result = runner.invoke(
        main, ["index", "build", "--kind", "code", "--input", str(corpus), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert out.exists()
    from interfaze.retrieval import load_index, search

    index = load_index(out)
    assert search(index, "parse", 3)


def test_compile_command(tmp_path):
    import random

    fragments = tmp_path / "fragments"
    fragments.mkdir()
    state = random_state(random.Random(1))
    (fragments / "frag0.json").write_bytes(canonical_serialize(state))
    budgets = tmp_path / "budgets.json"
    budgets.write_text(json.dumps({
        "observations_max": 50, "entities_max": 50, "relations_max": 50, "provenance_max": 50,
    }))
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["compile", "--fragments", str(fragments), "--query", "alpha beta",
         "--budgets", str(budgets), "--emit-json"],
    )
    assert result.exit_code == 0, result.output
    compiled = json.loads(result.output)
    assert set(compiled) == {"observations", "entities", "relations", "provenance_index"}


def test_compile_bad_budgets_exits_2(tmp_path):
    fragments = tmp_path / "fragments"
    fragments.mkdir()
    budgets = tmp_path / "budgets.json"
    budgets.write_text("{}")
    runner = CliRunner()
    result = runner.invoke(
        main, ["compile", "--fragments", str(fragments), "--query", "x", "--budgets", str(budgets)]
    )
    assert result.exit_code == 2


def test_env_var_config_fallback():
    directory = ensure_e2e_fixtures()
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["run", "--query", "What is 2 plus 2?"],
        env={"INTERFAZE_CONFIG": str(directory / "config.json")},
    )
    assert result.exit_code == 0, result.output
    assert result.output.strip() == (directory / "response_text.json").read_text()
