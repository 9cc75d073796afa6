"""
Pipeline driver: manifest in, records out.

Each image goes through the same eight steps (captions, phrase extraction,
grounding, region captions and OCR, grouping, counting filter, re-ranking,
formatting) inside a bounded worker pool. Every backend call passes through
the run store's stage cache, every finished image is stored as an outcome,
and the output files are written once at the end from the stored outcomes
in manifest order. That last part is what makes output independent of
completion order and lets an interrupted run pick up where it stopped.
"""

import asyncio
import hashlib
import json
from collections.abc import Awaitable, Callable
from pathlib import Path
from typing import TypeVar

import structlog
from pydantic import BaseModel, ValidationError

from .backends import (
    BackendClient,
    GroundingRequest,
    GroundingResponse,
    VlmRequest,
    VlmResponse,
    request_key,
)
from .codegen import build_record, emit_multi_round, emit_single_round, record_to_json
from .consistency import (
    ValidationMemo,
    counting_filter,
    group_concepts,
    rerank_candidates,
    select_caption,
)
from .errors import ConfigMismatch, ManifestError, W2CError
from .models import (
    AnnotationGroup,
    CaptionCandidate,
    ConceptAnnotation,
    ConceptGroup,
    DetectedConcept,
    DropPolicy,
    GroupVerdict,
    ImageOutcome,
    ImageRecord,
    OutcomeStatus,
    OutputFormat,
    PipelineConfig,
    RunStats,
    Stage,
    StageCacheEntry,
    W2CRecord,
)
from .prompts import PromptBook
from .stages import extract_concepts, extract_ocr, gen_global_captions, gen_region_captions
from .store import DB_FILENAME, RunMeta, RunStore
from .tasks import gather_or_cancel

logger = structlog.get_logger()

RECORDS_FILENAME = "w2c.jsonl"
CONVERSATIONS_FILENAME = "conversations.jsonl"
STATS_FILENAME = "stats.json"

DROP_NO_CONCEPTS = "no_concepts"
DROP_COUNTING = "counting_inconsistent"

ResponseT = TypeVar("ResponseT", bound=BaseModel)


def load_manifest(path: Path) -> list[ImageRecord]:
    """
    Read a JSONL manifest of {"id", "path", "width", "height"} rows.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    images: list[ImageRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            image = ImageRecord.model_validate_json(line)
        except ValidationError as e:
            raise ManifestError(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
        if image.id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image id {image.id!r}")
        seen.add(image.id)
        if image.path is not None and not image.path.is_absolute():
            image = image.model_copy(update={"path": path.parent / image.path})
        images.append(image)
    return images


def run_fingerprint(config: PipelineConfig, prompts: PromptBook) -> str:
    """Hash of everything that can change a run's output."""
    payload = config.fingerprint() + json.dumps(prompts.as_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CachedBackend:
    """
    Stage cache in front of a backend.

    Answers come from the run store when present; otherwise the backend is
    called under a global concurrency limit and the parsed response stored.
    Identical requests already in flight wait for the first one instead of
    calling again. Counters go to the RunStats of the session making the call.
    """

    def __init__(self, backend: BackendClient, store: RunStore, max_concurrent_requests: int):
        self.backend = backend
        self.store = store
        self._semaphore = asyncio.Semaphore(max_concurrent_requests)
        self._inflight: dict[str, asyncio.Future[str]] = {}

    def session(self, stats: RunStats) -> "CacheSession":
        return CacheSession(self, stats)

    async def resolve(
        self,
        key: str,
        stage: Stage,
        fetch: Callable[[], Awaitable[ResponseT]],
        response_type: type[ResponseT],
        stats: RunStats,
    ) -> ResponseT:
        while (pending := self._inflight.get(key)) is not None:
            try:
                payload = await asyncio.shield(pending)
            except asyncio.CancelledError:
                # The owning image was cancelled, not this one; ask again
                if pending.cancelled():
                    continue
                raise
            stats.cache_hits += 1
            return response_type.model_validate_json(payload)

        future: asyncio.Future[str] = asyncio.get_running_loop().create_future()
        self._inflight[key] = future
        try:
            entry = await self.store.get_cached(key)
            if entry is not None:
                stats.cache_hits += 1
                payload = entry.payload
            else:
                async with self._semaphore:
                    response = await fetch()
                stats.backend_calls += 1
                payload = response.model_dump_json()
                await self.store.put_cached(
                    StageCacheEntry(request_key=key, stage=stage, payload=payload)
                )
            future.set_result(payload)
        except asyncio.CancelledError:
            future.cancel()
            raise
        except Exception as e:
            future.set_exception(e)
            # Mark retrieved; waiters re-raise it themselves
            future.exception()
            raise
        finally:
            del self._inflight[key]
        return response_type.model_validate_json(payload)


class CacheSession:
    """One image's view of the cached backend; implements BackendClient."""

    def __init__(self, cache: CachedBackend, stats: RunStats):
        self.cache = cache
        self.stats = stats

    async def vlm_complete(self, request: VlmRequest, stage: Stage | None = None) -> VlmResponse:
        if stage is None:
            raise ValueError("cached calls must name their stage")
        return await self.cache.resolve(
            request_key(request),
            stage,
            lambda: self.cache.backend.vlm_complete(request, stage),
            VlmResponse,
            self.stats,
        )

    async def ground_phrases(
        self, request: GroundingRequest, stage: Stage | None = None
    ) -> GroundingResponse:
        if stage is None:
            raise ValueError("cached calls must name their stage")
        return await self.cache.resolve(
            request_key(request),
            stage,
            lambda: self.cache.backend.ground_phrases(request, stage),
            GroundingResponse,
            self.stats,
        )


def apply_drop_policy(
    record: W2CRecord, verdicts: dict[str, GroupVerdict], policy: DropPolicy
) -> W2CRecord | None:
    """
    Apply counting verdicts to a record.

    Args:
        record: Record holding every group
        verdicts: Verdict per group name; missing names count as unchecked
        policy: DROP_RECORD discards the record on any inconsistent group,
            DROP_GROUP removes only those groups

    Returns:
        W2CRecord | None: The record to write, or None when it is dropped
    """
    bad = {
        name for name, verdict in verdicts.items() if verdict is GroupVerdict.INCONSISTENT
    }
    kept = [group for group in record.groups if group.name not in bad]
    if len(kept) == len(record.groups):
        return record
    if policy is DropPolicy.DROP_RECORD or not kept:
        return None
    return build_record(record.image, record.global_caption, kept)


class ImageProcessor:
    """Runs the per-image steps against a cached backend."""

    def __init__(self, config: PipelineConfig, cache: CachedBackend, prompts: PromptBook):
        self.config = config
        self.cache = cache
        self.prompts = prompts

    async def process(self, image: ImageRecord, index: int) -> ImageOutcome:
        """Never raises for per-image failures; they come back as ERRORED outcomes."""
        stats = RunStats(images_in=1)
        try:
            return await self._process(image, index, stats)
        except Exception as e:
            reason = type(e).__name__
            logger.error(
                "💥 Image failed",
                image_id=image.id,
                error_type=reason,
                error=str(e),
            )
            failed = stats.model_copy(deep=True)
            failed.images_errored = 1
            failed.error_reasons[reason] = 1
            return ImageOutcome(
                image_id=image.id,
                index=index,
                status=OutcomeStatus.ERRORED,
                reason=reason,
                stats=failed,
            )

    def _dropped(
        self, image: ImageRecord, index: int, reason: str, stats: RunStats
    ) -> ImageOutcome:
        stats.images_dropped = 1
        stats.drop_reasons[reason] = 1
        logger.info("Image dropped", image_id=image.id, reason=reason)
        return ImageOutcome(
            image_id=image.id,
            index=index,
            status=OutcomeStatus.DROPPED,
            reason=reason,
            stats=stats,
        )

    async def _process(self, image: ImageRecord, index: int, stats: RunStats) -> ImageOutcome:
        client = self.cache.session(stats)
        config, prompts = self.config, self.prompts

        captions = await gen_global_captions(client, image, prompts, config)
        concepts = await extract_concepts(client, image, captions, config)
        stats.concepts_detected = len(concepts)
        if not concepts:
            return self._dropped(image, index, DROP_NO_CONCEPTS, stats)

        described = await gather_or_cancel(
            *(self._describe(client, image, concept) for concept in concepts)
        )
        descriptions = dict(zip(concepts, described))

        groups = group_concepts(concepts)
        stats.groups_total = len(groups)
        if config.counting_filter_enabled:
            verdicts = await gather_or_cancel(
                *(counting_filter(client, image, group, prompts) for group in groups)
            )
            groups = [g.model_copy(update={"verdict": v}) for g, v in zip(groups, verdicts)]
        inconsistent = [g for g in groups if g.verdict is GroupVerdict.INCONSISTENT]
        stats.groups_inconsistent = len(inconsistent)

        # Groups that are going to be dropped are not worth validating
        if inconsistent and config.drop_policy is DropPolicy.DROP_RECORD:
            ranked_names: set[str] = set()
        else:
            ranked_names = {g.name for g in groups if g.verdict is not GroupVerdict.INCONSISTENT}

        memo = ValidationMemo(image)
        annotation_groups = []
        for group in groups:
            rerank = config.reranking_enabled and group.name in ranked_names
            chosen = await gather_or_cancel(
                *(
                    self._choose_caption(
                        client, image, group, descriptions[m][0], memo, rerank, stats
                    )
                    for m in group.members
                )
            )
            annotation_groups.append(
                AnnotationGroup(
                    name=group.name,
                    annotations=[
                        ConceptAnnotation(
                            name=group.name,
                            caption=candidate.text,
                            text=descriptions[member][1],
                            box=member.box,
                        )
                        for member, candidate in zip(group.members, chosen)
                    ],
                )
            )

        record = build_record(image, captions.general, annotation_groups)
        final = apply_drop_policy(
            record, {g.name: g.verdict for g in groups}, config.drop_policy
        )
        if final is None:
            return self._dropped(image, index, DROP_COUNTING, stats)
        stats.images_out = 1
        return ImageOutcome(
            image_id=image.id,
            index=index,
            status=OutcomeStatus.WRITTEN,
            record=final,
            stats=stats,
        )

    async def _describe(
        self, client: BackendClient, image: ImageRecord, concept: DetectedConcept
    ) -> tuple[list[CaptionCandidate], str | None]:
        return await gather_or_cancel(
            gen_region_captions(client, image, concept, self.prompts, self.config),
            extract_ocr(client, image, concept, self.prompts, self.config),
        )

    async def _choose_caption(
        self,
        client: BackendClient,
        image: ImageRecord,
        group: ConceptGroup,
        candidates: list[CaptionCandidate],
        memo: ValidationMemo,
        rerank: bool,
        stats: RunStats,
    ) -> CaptionCandidate:
        if not rerank:
            return candidates[0]
        scored = await rerank_candidates(
            client, image, group.merged_box, candidates, memo, self.prompts
        )
        stats.candidates_scored += len(scored)
        return select_caption(scored)


async def _drain(
    queue: "asyncio.Queue[tuple[int, ImageRecord]]",
    processor: ImageProcessor,
    store: RunStore,
):
    while True:
        try:
            index, image = queue.get_nowait()
        except asyncio.QueueEmpty:
            return
        outcome = await processor.process(image, index)
        await store.save_outcome(outcome)


def total_stats(outcomes: list[ImageOutcome]) -> RunStats:
    total = RunStats()
    for outcome in outcomes:
        total.absorb(outcome.stats)
    return total


def write_outputs(out_dir: Path, outcomes: list[ImageOutcome], config: PipelineConfig) -> Path:
    """
    Write the record file, the conversation file and the stats.

    Returns:
        Path: The record JSONL
    """
    records = [o.record for o in outcomes if o.status is OutcomeStatus.WRITTEN and o.record]
    records_path = out_dir / RECORDS_FILENAME
    with records_path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_json(record), ensure_ascii=False) + "\n")

    conversations_path = out_dir / CONVERSATIONS_FILENAME
    if config.output_format is OutputFormat.CODE:
        conversations_path.unlink(missing_ok=True)
    else:
        emit = (
            emit_single_round
            if config.output_format is OutputFormat.SINGLE_ROUND
            else emit_multi_round
        )
        with conversations_path.open("w", encoding="utf-8") as handle:
            for record in records:
                row = {"id": record.image.id, **emit(record)}
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")

    stats = total_stats(outcomes)
    (out_dir / STATS_FILENAME).write_text(
        json.dumps(stats.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return records_path


async def run_pipeline(
    manifest_path: Path,
    config: PipelineConfig,
    backend: BackendClient,
    out_dir: Path,
    prompts: PromptBook | None = None,
    resume: bool = False,
) -> tuple[Path, RunStats]:
    """
    Annotate every image in a manifest.

    Args:
        manifest_path: JSONL manifest of images
        config: Pipeline configuration
        backend: Model services (HTTP, replay or scripted)
        out_dir: Run directory for the store and the output files
        prompts: Template book, defaults when omitted
        resume: Keep finished outcomes instead of starting over; the stored
            fingerprint must match

    Returns:
        tuple[Path, RunStats]: Path of the record JSONL and the run totals
    """
    prompts = prompts or PromptBook.default()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = load_manifest(manifest_path)
    fingerprint = run_fingerprint(config, prompts)

    async with RunStore(out_dir) as store:
        meta = await store.get_meta()
        if resume and meta is not None and meta.fingerprint != fingerprint:
            raise ConfigMismatch(
                f"run in {out_dir} was started with a different configuration or prompts"
            )
        if not resume:
            await store.delete_outcomes()
        await store.save_meta(
            RunMeta(
                fingerprint=fingerprint,
                manifest_path=str(Path(manifest_path).resolve()),
                config_json=config.model_dump_json(),
                prompts=prompts.as_dict(),
            )
        )

        done = {o.image_id for o in await store.load_outcomes()}
        queue: asyncio.Queue[tuple[int, ImageRecord]] = asyncio.Queue()
        for index, image in enumerate(images):
            if image.id not in done:
                queue.put_nowait((index, image))
        logger.info(
            "🚀 Starting run",
            images=len(images),
            already_done=len(images) - queue.qsize(),
            workers=config.max_concurrent_requests,
            out_dir=str(out_dir),
        )

        cache = CachedBackend(backend, store, config.max_concurrent_requests)
        processor = ImageProcessor(config, cache, prompts)
        workers = min(config.max_concurrent_requests, max(queue.qsize(), 1))
        await asyncio.gather(*(_drain(queue, processor, store) for _ in range(workers)))

        manifest_ids = {image.id for image in images}
        outcomes = [o for o in await store.load_outcomes() if o.image_id in manifest_ids]

    records_path = write_outputs(out_dir, outcomes, config)
    stats = total_stats(outcomes)
    logger.info(
        "✅ Run finished",
        images_in=stats.images_in,
        images_out=stats.images_out,
        dropped=stats.images_dropped,
        errored=stats.images_errored,
        backend_calls=stats.backend_calls,
        cache_hits=stats.cache_hits,
    )
    return records_path, stats


async def load_run_meta(run_dir: Path) -> RunMeta | None:
    if not (Path(run_dir) / DB_FILENAME).exists():
        return None
    async with RunStore(run_dir) as store:
        return await store.get_meta()


async def count_cached_answers(run_dir: Path) -> int | None:
    """Number of backend answers in a run's stage cache, or None without a store."""
    if not (Path(run_dir) / DB_FILENAME).exists():
        return None
    async with RunStore(run_dir) as store:
        return await store.cache_size()


async def resume(
    run_dir: Path, backend: BackendClient, config: PipelineConfig | None = None
) -> tuple[Path, RunStats]:
    """
    Continue an interrupted run from its stored manifest, config and prompts.

    Raises:
        ConfigMismatch: A config was given and differs from the stored one
    """
    meta = await load_run_meta(run_dir)
    if meta is None:
        raise W2CError(f"no run to resume in {run_dir}")
    stored = PipelineConfig.model_validate_json(meta.config_json)
    if config is not None and config.fingerprint() != stored.fingerprint():
        raise ConfigMismatch(f"config differs from the one stored in {run_dir}")
    prompts = PromptBook.model_validate(
        {"templates": {k: {"name": k, "template": v} for k, v in meta.prompts.items()}}
    )
    return await run_pipeline(
        Path(meta.manifest_path),
        config or stored,
        backend,
        Path(run_dir),
        prompts=prompts,
        resume=True,
    )


def read_stats(run_dir: Path) -> RunStats:
    """Stats of a finished run."""
    path = Path(run_dir) / STATS_FILENAME
    return RunStats.model_validate_json(path.read_text(encoding="utf-8"))
