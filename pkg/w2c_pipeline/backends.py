"""
Model service contracts and clients.

Two services sit behind the pipeline: a vision-language model answering
prompts about an image (or a crop of it) and a phrase-grounding detector.
Every backend returns the raw wire payload; the shared base class checks it
against the contract, applies the detector thresholds, and optionally
records it into a replay file. That keeps the replay backend and the HTTP
client behaving identically byte for byte.
"""

import asyncio
import base64
import hashlib
import io
import json
import re
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Protocol

import httpx
import structlog
from cachetools import LRUCache, cached
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tenacity import (
    AsyncRetrying,
    RetryError,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .config import Settings
from .errors import ContractError, ImageUnavailable, ReplayMiss, TransportError
from .models import Answer, BoundingBox, DetectedConcept, ImageRecord, Stage

logger = structlog.get_logger()

_WORD_RE = re.compile(r"[a-z]+")


class VlmRequest(BaseModel):
    """A prompt about an image or a crop of it."""

    model_config = ConfigDict(frozen=True)

    image: ImageRecord
    crop: BoundingBox | None = Field(None, description="Absent means the full image")
    prompt: str
    beam_width: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _crop_inside_image(self) -> "VlmRequest":
        if self.crop is not None and not self.crop.fits(
            self.image.width, self.image.height
        ):
            raise ValueError(f"crop {self.crop.as_list()} outside image {self.image.id}")
        return self


class VlmResponse(BaseModel):
    """Beam-ordered candidates; index 0 is the top beam."""

    model_config = ConfigDict(frozen=True)

    candidates: list[str] = Field(min_length=1)


class GroundingRequest(BaseModel):
    """Phrases to locate in one image."""

    model_config = ConfigDict(frozen=True)

    image: ImageRecord
    phrases: list[str] = Field(min_length=1)
    box_threshold: float = Field(ge=0.0, le=1.0)
    text_threshold: float = Field(ge=0.0, le=1.0)


class GroundingResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    detections: list[DetectedConcept] = Field(default_factory=list)


@cached(cache=LRUCache(maxsize=4096), lock=threading.Lock())
def _file_digest(path: str) -> str:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ImageUnavailable(f"cannot read image file {path}: {e}") from e
    return hashlib.sha256(data).hexdigest()


def image_digest(image: ImageRecord) -> str:
    """SHA-256 of the image file contents."""
    if image.path is None:
        raise ImageUnavailable(f"image {image.id} has no file path")
    return _file_digest(str(image.path))


def request_key(request: VlmRequest | GroundingRequest) -> str:
    """
    Stable hash identifying a backend request.

    Covers the image content digest plus every request field that can change
    the answer, so it serves as both cache key and replay key.
    """
    if isinstance(request, VlmRequest):
        payload: dict[str, Any] = {
            "kind": "vlm",
            "image": image_digest(request.image),
            "crop": request.crop.as_list() if request.crop else None,
            "prompt": request.prompt,
            "beam_width": request.beam_width,
        }
    else:
        payload = {
            "kind": "grounding",
            "image": image_digest(request.image),
            "phrases": list(request.phrases),
            "box_threshold": request.box_threshold,
            "text_threshold": request.text_threshold,
        }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_yes_no(answer: str) -> Answer:
    """Classify a validation answer by its first word; never raises."""
    words = _WORD_RE.findall(answer.lower())
    if not words:
        return Answer.UNKNOWN
    if words[0] == "yes":
        return Answer.YES
    if words[0] == "no":
        return Answer.NO
    return Answer.UNKNOWN


def parse_vlm_payload(payload: Any, request: VlmRequest) -> VlmResponse:
    """Check a VLM wire payload and trim it to the requested beam count."""
    if not isinstance(payload, dict) or not isinstance(payload.get("candidates"), list):
        raise ContractError("VLM response must be an object with a candidates list")
    candidates = payload["candidates"]
    if not candidates or not all(isinstance(c, str) for c in candidates):
        raise ContractError("VLM candidates must be a nonempty list of strings")
    return VlmResponse(candidates=candidates[: request.beam_width])


def _coerce_box(raw: Any, image: ImageRecord) -> BoundingBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise ContractError(f"detection box must have 4 coordinates, got {raw!r}")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise ContractError(f"detection box must be numeric, got {raw!r}")
    coords = [int(round(v)) for v in raw]
    x1, y1, x2, y2 = coords
    if not (0 <= x1 < x2 <= image.width and 0 <= y1 < y2 <= image.height):
        raise ContractError(
            f"detection box {coords} invalid for {image.width}x{image.height} image"
        )
    return BoundingBox.from_list(coords)


def parse_grounding_payload(payload: Any, request: GroundingRequest) -> GroundingResponse:
    """
    Check a grounding wire payload and apply both detector thresholds.

    Phrases with no surviving detection are simply absent from the result.
    """
    if not isinstance(payload, dict) or not isinstance(payload.get("detections"), list):
        raise ContractError("grounding response must be an object with a detections list")
    requested = set(request.phrases)
    kept = []
    for raw in payload["detections"]:
        if not isinstance(raw, dict):
            raise ContractError(f"detection must be an object, got {raw!r}")
        phrase = raw.get("phrase")
        if phrase not in requested:
            raise ContractError(f"detection for unrequested phrase {phrase!r}")
        score = raw.get("score")
        if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ContractError(f"detection score {score!r} outside [0, 1]")
        text_score = raw.get("text_score", score)
        if not isinstance(text_score, (int, float)):
            raise ContractError(f"detection text_score {text_score!r} is not a number")
        if score < request.box_threshold or text_score < request.text_threshold:
            continue
        box = _coerce_box(raw.get("box"), request.image)
        kept.append(DetectedConcept(name=phrase, box=box, confidence=float(score)))
    return GroundingResponse(detections=kept)


class BackendClient(Protocol):
    """What the stages need from a backend."""

    async def vlm_complete(
        self, request: VlmRequest, stage: Stage | None = None
    ) -> VlmResponse: ...

    async def ground_phrases(
        self, request: GroundingRequest, stage: Stage | None = None
    ) -> GroundingResponse: ...


class ReplayRecorder:
    """Appends {"key", "response"} lines to a replay file, once per key."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = asyncio.Lock()
        self._written: set[str] = set()
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._written.add(json.loads(line)["key"])

    async def record(self, key: str, response: Any) -> None:
        async with self._lock:
            if key in self._written:
                return
            line = json.dumps({"key": key, "response": response}, ensure_ascii=False)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")
            self._written.add(key)


class ModelBackend(ABC):
    """
    Base class for model services.

    Subclasses only fetch raw payloads; contract checks, thresholding and
    record mode are shared here.
    """

    def __init__(self, recorder: ReplayRecorder | None = None):
        self.recorder = recorder

    @abstractmethod
    async def _fetch_vlm(self, request: VlmRequest, key: str) -> Any:
        """Return the raw VLM payload for a request."""

    @abstractmethod
    async def _fetch_grounding(self, request: GroundingRequest, key: str) -> Any:
        """Return the raw grounding payload for a request."""

    async def vlm_complete(
        self, request: VlmRequest, stage: Stage | None = None
    ) -> VlmResponse:
        key = request_key(request)
        payload = await self._fetch_vlm(request, key)
        response = parse_vlm_payload(payload, request)
        if self.recorder is not None:
            await self.recorder.record(key, payload)
        logger.debug(
            "VLM call answered",
            image_id=request.image.id,
            stage=stage.value if stage else None,
            beams=len(response.candidates),
        )
        return response

    async def ground_phrases(
        self, request: GroundingRequest, stage: Stage | None = None
    ) -> GroundingResponse:
        key = request_key(request)
        payload = await self._fetch_grounding(request, key)
        response = parse_grounding_payload(payload, request)
        if self.recorder is not None:
            await self.recorder.record(key, payload)
        logger.debug(
            "Grounding call answered",
            image_id=request.image.id,
            phrases=len(request.phrases),
            detections=len(response.detections),
        )
        return response

    async def close(self) -> None:
        """Release any held resources."""


class ReplayBackend(ModelBackend):
    """Answers from a replay file; read-only and safe to share."""

    def __init__(self, path: Path):
        super().__init__(recorder=None)
        self.path = Path(path)
        self._responses: dict[str, Any] = {}
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            self._responses[entry["key"]] = entry["response"]
        logger.info("Loaded replay file", path=str(self.path), entries=len(self._responses))

    def _lookup(self, key: str) -> Any:
        try:
            return self._responses[key]
        except KeyError:
            raise ReplayMiss(key) from None

    async def _fetch_vlm(self, request: VlmRequest, key: str) -> Any:
        return self._lookup(key)

    async def _fetch_grounding(self, request: GroundingRequest, key: str) -> Any:
        return self._lookup(key)


def encode_image(image: ImageRecord, crop: BoundingBox | None = None) -> str:
    """Base64 PNG of the image, or of the crop when given."""
    if image.path is None:
        raise ImageUnavailable(f"image {image.id} has no file path")
    try:
        with Image.open(image.path) as img:
            region = img.convert("RGB")
            if crop is not None:
                region = region.crop((crop.x1, crop.y1, crop.x2, crop.y2))
            buffer = io.BytesIO()
            region.save(buffer, format="PNG")
    except OSError as e:
        raise ImageUnavailable(f"cannot decode image {image.path}: {e}") from e
    return base64.b64encode(buffer.getvalue()).decode("ascii")


class _Retryable(Exception):
    """Internal marker for answers worth another attempt."""


class HttpModelBackend(ModelBackend):
    """
    HTTP client for both model services.

    Region prompts are sent with the crop already cut out, so the service
    never needs the full image for them.
    """

    def __init__(
        self,
        settings: Settings,
        recorder: ReplayRecorder | None = None,
        client: httpx.AsyncClient | None = None,
    ):
        super().__init__(recorder=recorder)
        self.settings = settings
        headers = {
            "Accept": "application/json",
            "User-Agent": "w2c-pipeline/0.1",
        }
        if settings.backend_token:
            headers["Authorization"] = f"Bearer {settings.backend_token}"
        self.client = client or httpx.AsyncClient(timeout=settings.request_timeout)
        self.client.headers.update(headers)

    async def _post(self, url: str, body: dict[str, Any]) -> Any:
        retrying = AsyncRetrying(
            stop=stop_after_attempt(self.settings.max_retries),
            wait=wait_exponential(multiplier=self.settings.retry_backoff, max=60),
            retry=retry_if_exception_type((httpx.TransportError, _Retryable)),
        )
        try:
            async for attempt in retrying:
                with attempt:
                    response = await self.client.post(url, json=body)
                    if response.status_code == 429 or response.status_code >= 500:
                        logger.warning(
                            "Model service busy, retrying",
                            url=url,
                            status=response.status_code,
                            attempt=attempt.retry_state.attempt_number,
                        )
                        raise _Retryable(f"HTTP {response.status_code}")
        except RetryError as e:
            raise TransportError(
                f"{url} failed after {self.settings.max_retries} attempts: "
                f"{e.last_attempt.exception()}"
            ) from e
        if response.status_code >= 400:
            raise ContractError(f"{url} rejected request: HTTP {response.status_code}")
        try:
            return response.json()
        except ValueError as e:
            raise ContractError(f"{url} returned non-JSON body") from e

    async def _fetch_vlm(self, request: VlmRequest, key: str) -> Any:
        image_b64 = await asyncio.to_thread(encode_image, request.image, request.crop)
        body = {
            "prompt": request.prompt,
            "image_b64": image_b64,
            "num_beams": request.beam_width,
        }
        return await self._post(self.settings.vlm_url, body)

    async def _fetch_grounding(self, request: GroundingRequest, key: str) -> Any:
        image_b64 = await asyncio.to_thread(encode_image, request.image, None)
        body = {
            "image_b64": image_b64,
            "phrases": list(request.phrases),
            "box_threshold": request.box_threshold,
            "text_threshold": request.text_threshold,
        }
        return await self._post(self.settings.grounding_url, body)

    async def close(self) -> None:
        await self.client.aclose()
