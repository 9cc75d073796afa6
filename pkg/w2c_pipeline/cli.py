"""Command-line interface for the annotation pipeline."""

import asyncio
import json
import logging
import sys
from pathlib import Path

import click
import structlog
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table
from structlog.stdlib import LoggerFactory

from . import __version__
from .backends import HttpModelBackend, ModelBackend, ReplayBackend, ReplayRecorder
from .codegen import record_from_json
from .config import load_pipeline_config, settings
from .errors import CodegenError, W2CError
from .models import DropPolicy, OutputFormat, PipelineConfig
from .orchestrator import (
    count_cached_answers,
    load_run_meta,
    read_stats,
    resume,
    run_pipeline,
)
from .prompts import PromptBook
from .validation import validate_record

structlog.configure(
    processors=[
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.dev.ConsoleRenderer(),
    ],
    context_class=dict,
    logger_factory=LoggerFactory(),
    cache_logger_on_first_use=True,
)

logger = structlog.get_logger()


@click.group()
@click.version_option(version=__version__)
def cli():
    """W2C - visual concept annotation with self-consistency filtering."""
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(message)s",
        stream=sys.stderr,
    )


def _make_backend(replay: Path | None, record: bool) -> ModelBackend:
    if record:
        if replay is None:
            raise click.UsageError("--record needs --replay FILE to record into")
        return HttpModelBackend(settings, recorder=ReplayRecorder(replay))
    if replay is not None:
        return ReplayBackend(replay)
    return HttpModelBackend(settings)


@cli.command()
@click.option(
    "--manifest",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="JSONL manifest of images; optional with --resume",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="JSON file with pipeline settings",
)
@click.option(
    "--out",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Run directory",
)
@click.option(
    "--replay",
    type=click.Path(dir_okay=False, path_type=Path),
    help="Answer from this replay file (or record into it with --record)",
)
@click.option("--record", is_flag=True, help="Call live services and record answers")
@click.option(
    "--format",
    "output_format",
    type=click.Choice([f.value for f in OutputFormat]),
    help="Training-data layout",
)
@click.option("--no-counting-filter", is_flag=True, help="Skip the counting check")
@click.option("--no-reranking", is_flag=True, help="Always keep the top caption beam")
@click.option(
    "--drop-policy",
    type=click.Choice([p.value for p in DropPolicy]),
    help="Drop whole records or only inconsistent groups",
)
@click.option("--concurrency", type=click.IntRange(min=1), help="Concurrent backend calls")
@click.option("--resume", "resume_run", is_flag=True, help="Continue an interrupted run")
def run(
    manifest: Path | None,
    config_path: Path | None,
    out: Path,
    replay: Path | None,
    record: bool,
    output_format: str | None,
    no_counting_filter: bool,
    no_reranking: bool,
    drop_policy: str | None,
    concurrency: int | None,
    resume_run: bool,
):
    """Annotate every image in a manifest."""
    if manifest is None and not resume_run:
        raise click.UsageError("--manifest is required unless --resume is given")
    if replay is not None and not record and not replay.exists():
        raise click.UsageError(f"replay file {replay} does not exist")

    overrides = {
        "output_format": output_format,
        "counting_filter_enabled": False if no_counting_filter else None,
        "reranking_enabled": False if no_reranking else None,
        "drop_policy": drop_policy,
        "max_concurrent_requests": concurrency,
    }

    async def go():
        backend = _make_backend(replay, record)
        try:
            if manifest is None:
                meta = await load_run_meta(out)
                config = None
                wants_change = config_path is not None or any(
                    v is not None for v in overrides.values()
                )
                if meta is not None and wants_change:
                    base = json.loads(meta.config_json)
                    if config_path is not None:
                        base = load_pipeline_config(config_path).model_dump()
                    config = PipelineConfig.model_validate(
                        {**base, **{k: v for k, v in overrides.items() if v is not None}}
                    )
                return await resume(out, backend, config)
            config = load_pipeline_config(config_path, overrides)
            prompts = PromptBook.from_file(settings.prompt_file)
            return await run_pipeline(
                manifest, config, backend, out, prompts=prompts, resume=resume_run
            )
        finally:
            await backend.close()

    try:
        records_path, stats = asyncio.run(go())
    except W2CError as e:
        logger.error("Run aborted", error_type=type(e).__name__, error=str(e))
        sys.exit(1)

    click.echo(
        f"✓ {stats.images_out}/{stats.images_in} images written to {records_path} "
        f"({stats.images_dropped} dropped, {stats.images_errored} errored)"
    )


@cli.command()
@click.argument("jsonl", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def validate(jsonl: Path):
    """Check every record in a JSONL file, including the code round trip."""
    total = 0
    invalid = 0
    for lineno, line in enumerate(jsonl.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        total += 1
        try:
            row = json.loads(line)
            violations = validate_record(record_from_json(row))
            label = row.get("id", "?")
        except (ValueError, KeyError, TypeError, CodegenError) as e:
            # ValidationError is a ValueError
            detail = e.errors()[0]["msg"] if isinstance(e, ValidationError) else str(e)
            violations, label = [f"unreadable record: {detail}"], "?"
        if violations:
            invalid += 1
            for violation in violations:
                click.echo(f"✗ line {lineno} ({label}): {violation}")

    click.echo(f"{total} records checked, {invalid} invalid")
    if invalid:
        sys.exit(1)


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
def stats(run_dir: Path):
    """Show the counters of a finished run."""
    try:
        run_stats = read_stats(run_dir)
    except FileNotFoundError:
        raise click.ClickException(f"no stats.json in {run_dir}") from None

    table = Table(title=f"Run stats: {run_dir}")
    table.add_column("Counter")
    table.add_column("Value", justify="right")
    for name, value in run_stats.model_dump(exclude={"drop_reasons", "error_reasons"}).items():
        table.add_row(name, str(value))
    for reason, count in sorted(run_stats.drop_reasons.items()):
        table.add_row(f"dropped: {reason}", str(count))
    for reason, count in sorted(run_stats.error_reasons.items()):
        table.add_row(f"errored: {reason}", str(count))
    cached = asyncio.run(count_cached_answers(run_dir))
    if cached is not None:
        table.add_row("cached answers", str(cached))
    Console().print(table)


def main():
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
