"""Command line: serve the gateway, run one request, build indexes, compile.

Exit codes: 0 ok, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import base64
import json
import os
import sys
from pathlib import Path

import click

from .compiler import CompileInput, compile_context
from .config import ConfigError, load_runtime
from .gateway import handle_completion
from .retrieval import build_index_from_directory, dump_index
from .schema import TokenBudget, canonical_json, canonical_parse, canonical_serialize

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _config_path(config: str | None) -> str:
    path = config or os.environ.get("INTERFAZE_CONFIG")
    if not path:
        raise click.ClickException("no config given (use --config or INTERFAZE_CONFIG)")
    return path


def _load(config: str | None):
    try:
        return load_runtime(_config_path(config))
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
def main() -> None:
    """Context-centric gateway: perception tools build the state, one LLM answers."""


@main.command()
@click.option("--config", "-c", type=click.Path(), default=None, help="Config file path.")
@click.option("--port", "-p", type=int, default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(config: str | None, port: int, host: str) -> None:
    """Serve POST /v1/chat/completions."""
    import uvicorn

    from .server import create_app

    runtime = _load(config)
    uvicorn.run(create_app(runtime), host=host, port=port, log_level="warning")


@main.command()
@click.option("--config", "-c", type=click.Path(), default=None)
@click.option("--query", "-q", required=True)
@click.option("--file", "files", type=click.Path(exists=True), multiple=True,
              help="Attachment file (repeatable).")
@click.option("--url", "urls", multiple=True, help="Declared URL (repeatable).")
@click.option("--emit-trace", is_flag=True, help="Print the step trace to stderr.")
def run(config: str | None, query: str, files: tuple[str, ...], urls: tuple[str, ...],
        emit_trace: bool) -> None:
    """Run one request through the full pipeline and print the response."""
    runtime = _load(config)
    message: dict = {"role": "user", "content": query}
    if files:
        message["attachments"] = [
            {
                "name": Path(f).name,
                "encoding": "base64",
                "data": base64.b64encode(Path(f).read_bytes()).decode("ascii"),
            }
            for f in files
        ]
    if urls:
        message["urls"] = list(urls)
    body = {"model": "interfaze-beta", "messages": [message]}
    try:
        status, response = handle_completion(runtime, body)
    finally:
        runtime.close()
    click.echo(canonical_json(response))
    if emit_trace:
        trace = response.get("interfaze", {}).get("trace") or (
            response.get("error", {}).get("interfaze", {}).get("trace", [])
        )
        for record in trace:
            click.echo(canonical_json(record), err=True)
    if status != 200:
        sys.exit(EXIT_RUNTIME)


@main.group()
def index() -> None:
    """Standing index maintenance."""


@index.command("build")
@click.option("--kind", type=click.Choice(["code", "docs", "web"]), required=True)
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--max-block-tokens", type=int, default=120, show_default=True)
def index_build(kind: str, input_dir: str, out: str, max_block_tokens: int) -> None:
    """Index every file under a directory into a single dump file."""
    try:
        built = build_index_from_directory(kind, input_dir, max_block_tokens)
        dump_index(built, out)
    except (OSError, ValueError) as exc:
        click.echo(f"index build failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"indexed {len(built.segments)} segments -> {out}")


@main.command()
@click.option("--fragments", "fragments_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of canonical state fragment files.")
@click.option("--query", required=True)
@click.option("--budgets", "budgets_file", type=click.Path(exists=True), required=True,
              help="JSON file with the four *_max fields.")
@click.option("--emit-json", is_flag=True, default=False,
              help="Print the compiled state as canonical JSON.")
def compile(fragments_dir: str, query: str, budgets_file: str, emit_json: bool) -> None:
    """Compile fragment files into one budgeted context state."""
    try:
        raw = json.loads(Path(budgets_file).read_text(encoding="utf-8"))
        budgets = TokenBudget(
            raw["observations_max"], raw["entities_max"],
            raw["relations_max"], raw["provenance_max"],
        )
    except (OSError, KeyError, ValueError) as exc:
        click.echo(f"config error: bad budgets file: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    fragments = []
    for path in sorted(Path(fragments_dir).glob("*.json")):
        try:
            fragments.append(canonical_parse(path.read_bytes()))
        except (ValueError, KeyError) as exc:
            click.echo(f"bad fragment {path.name}: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    try:
        state = compile_context(CompileInput(tuple(fragments), query, budgets, {}))
    except ValueError as exc:
        click.echo(f"compile failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    if emit_json:
        click.echo(canonical_serialize(state).decode("utf-8"))
    else:
        click.echo(
            f"compiled: {len(state.observations)} observations, "
            f"{len(state.entities)} entities, {len(state.relations)} relations"
        )


if __name__ == "__main__":
    main()
