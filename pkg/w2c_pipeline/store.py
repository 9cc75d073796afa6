"""
SQLite run store: stage cache, per-image outcomes and run metadata.

One database per output directory. The stage cache is what makes a rerun
free: every backend answer is stored under its request key. Outcomes are
what resume reads to skip finished images. Everything goes through one
async engine; writes are serialized with a lock because SQLite allows a
single writer anyway and aiosqlite would otherwise surface "database is
locked" under a busy worker pool.
"""

import asyncio
import json
from pathlib import Path

import structlog
from pydantic import BaseModel, Field
from sqlalchemy import Column, Integer, String, Text, delete, func, select
from sqlalchemy.ext.asyncio import AsyncSession, create_async_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from .models import ImageOutcome, Stage, StageCacheEntry

logger = structlog.get_logger()
Base = declarative_base()

DB_FILENAME = "w2c.db"


class StageCacheRow(Base):
    """Parsed backend response keyed by request hash."""

    __tablename__ = "stage_cache"

    request_key = Column(String, primary_key=True)
    stage = Column(String, nullable=False, index=True)
    payload = Column(Text, nullable=False)


class OutcomeRow(Base):
    """
    What happened to one manifest image.

    The full ImageOutcome (record and per-image stats) is kept as JSON; the
    index and status columns are there for ordering and quick counts.
    """

    __tablename__ = "image_outcomes"

    image_id = Column(String, primary_key=True)
    manifest_index = Column(Integer, nullable=False, index=True)
    status = Column(String, nullable=False)
    outcome_json = Column(Text, nullable=False)


class RunMetaRow(Base):
    __tablename__ = "run_meta"

    id = Column(Integer, primary_key=True)
    fingerprint = Column(String, nullable=False)
    manifest_path = Column(String, nullable=False)
    config_json = Column(Text, nullable=False)
    prompts_json = Column(Text, nullable=False)


class RunMeta(BaseModel):
    """Stored identity of a run."""

    fingerprint: str = Field(description="Config plus prompt hash")
    manifest_path: str
    config_json: str
    prompts: dict[str, str]


class RunStore:
    """
    Async access to a run directory's database.

    Use as `async with RunStore(out_dir) as store:`.
    """

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / DB_FILENAME
        self.engine = create_async_engine(f"sqlite+aiosqlite:///{self.path}", echo=False)
        self.async_session = sessionmaker(
            self.engine, class_=AsyncSession, expire_on_commit=False
        )
        self._write_lock = asyncio.Lock()

    async def init(self):
        """Create the schema if needed."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        async with self.engine.begin() as conn:
            await conn.run_sync(Base.metadata.create_all)
        logger.debug("Run store ready", path=str(self.path))

    async def close(self):
        await self.engine.dispose()

    async def __aenter__(self) -> "RunStore":
        await self.init()
        return self

    async def __aexit__(self, *exc_info) -> None:
        await self.close()

    # Stage cache

    async def get_cached(self, request_key: str) -> StageCacheEntry | None:
        async with self.async_session() as session:
            row = await session.get(StageCacheRow, request_key)
            if row is None:
                return None
            return StageCacheEntry(
                request_key=row.request_key, stage=Stage(row.stage), payload=row.payload
            )

    async def put_cached(self, entry: StageCacheEntry):
        async with self._write_lock, self.async_session() as session:
            await session.merge(
                StageCacheRow(
                    request_key=entry.request_key,
                    stage=entry.stage.value,
                    payload=entry.payload,
                )
            )
            await session.commit()

    async def cache_size(self) -> int:
        async with self.async_session() as session:
            result = await session.execute(select(func.count()).select_from(StageCacheRow))
            return result.scalar_one()

    # Outcomes

    async def save_outcome(self, outcome: ImageOutcome):
        async with self._write_lock, self.async_session() as session:
            await session.merge(
                OutcomeRow(
                    image_id=outcome.image_id,
                    manifest_index=outcome.index,
                    status=outcome.status.value,
                    outcome_json=outcome.model_dump_json(),
                )
            )
            await session.commit()

    async def load_outcomes(self) -> list[ImageOutcome]:
        """All stored outcomes in manifest order."""
        async with self.async_session() as session:
            result = await session.execute(
                select(OutcomeRow.outcome_json).order_by(OutcomeRow.manifest_index)
            )
            return [ImageOutcome.model_validate_json(row[0]) for row in result]

    async def delete_outcomes(self, image_ids: list[str] | None = None):
        """Forget outcomes for the given images, or for all images."""
        async with self._write_lock, self.async_session() as session:
            stmt = delete(OutcomeRow)
            if image_ids is not None:
                stmt = stmt.where(OutcomeRow.image_id.in_(image_ids))
            await session.execute(stmt)
            await session.commit()

    # Run metadata

    async def get_meta(self) -> RunMeta | None:
        async with self.async_session() as session:
            row = await session.get(RunMetaRow, 1)
            if row is None:
                return None
            return RunMeta(
                fingerprint=row.fingerprint,
                manifest_path=row.manifest_path,
                config_json=row.config_json,
                prompts=json.loads(row.prompts_json),
            )

    async def save_meta(self, meta: RunMeta):
        async with self._write_lock, self.async_session() as session:
            await session.merge(
                RunMetaRow(
                    id=1,
                    fingerprint=meta.fingerprint,
                    manifest_path=meta.manifest_path,
                    config_json=meta.config_json,
                    prompts_json=json.dumps(meta.prompts, sort_keys=True),
                )
            )
            await session.commit()
