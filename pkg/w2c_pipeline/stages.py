"""
Generation stages: captions, concept grounding, region captions and OCR.

Each function is one step of the per-image flow and talks to the model
services only through a BackendClient, so the same code runs against live
services, a replay file or the run cache.
"""

import structlog
from pydantic import BaseModel, ConfigDict, Field

from .backends import BackendClient, GroundingRequest, VlmRequest
from .errors import EmptyGeneration
from .geometry import iou, pad_box
from .models import (
    CaptionCandidate,
    DetectedConcept,
    ImageRecord,
    PipelineConfig,
    Stage,
)
from .nlp import dedup_phrases, extract_noun_phrases
from .prompts import PromptBook, PromptName
from .tasks import gather_or_cancel

logger = structlog.get_logger()

_NO_TEXT_SENTINEL = "no"


class GlobalCaptions(BaseModel):
    """Nonblank beams of both full-image captions, top beam first."""

    model_config = ConfigDict(frozen=True)

    general_beams: list[str] = Field(min_length=1)
    detail_beams: list[str] = Field(min_length=1)

    @property
    def general(self) -> str:
        return self.general_beams[0]

    @property
    def detail(self) -> str:
        return self.detail_beams[0]


def _nonblank(candidates: list[str]) -> list[str]:
    return [c.strip() for c in candidates if c.strip()]


async def gen_global_captions(
    client: BackendClient,
    image: ImageRecord,
    prompts: PromptBook,
    config: PipelineConfig,
) -> GlobalCaptions:
    """Ask for the general and the detail caption of the full image."""
    general, detail = await gather_or_cancel(
        client.vlm_complete(
            VlmRequest(
                image=image,
                prompt=prompts.render(PromptName.GLOBAL),
                beam_width=config.beam_width,
            ),
            stage=Stage.GLOBAL_CAPTION,
        ),
        client.vlm_complete(
            VlmRequest(
                image=image,
                prompt=prompts.render(PromptName.DETAIL),
                beam_width=config.beam_width,
            ),
            stage=Stage.DETAIL_CAPTION,
        ),
    )
    general_beams = _nonblank(general.candidates)
    detail_beams = _nonblank(detail.candidates)
    if not general_beams or not detail_beams:
        raise EmptyGeneration(f"blank caption for image {image.id}")
    return GlobalCaptions(general_beams=general_beams, detail_beams=detail_beams)


def collapse_duplicates(
    detections: list[DetectedConcept], iou_threshold: float
) -> list[DetectedConcept]:
    """
    Keep the highest-confidence box among same-name boxes overlapping above the threshold.

    Survivors come out ordered by (-confidence, x1, y1).
    """
    ordered = sorted(detections, key=lambda d: (-d.confidence, d.box.x1, d.box.y1))
    kept: list[DetectedConcept] = []
    for detection in ordered:
        if all(iou(detection.box, other.box) <= iou_threshold for other in kept):
            kept.append(detection)
    return kept


async def extract_concepts(
    client: BackendClient,
    image: ImageRecord,
    captions: GlobalCaptions,
    config: PipelineConfig,
) -> list[DetectedConcept]:
    """
    Turn the captions into grounded visual concepts.

    Phrases are chunked from the top general and detail beams (all beams with
    use_all_caption_beams), deduplicated, stoplisted and grounded; phrases the
    detector cannot place are dropped as false positives.
    """
    if config.use_all_caption_beams:
        texts = [*captions.general_beams, *captions.detail_beams]
    else:
        texts = [captions.general, captions.detail]
    phrases = []
    for text in texts:
        phrases.extend(extract_noun_phrases(text))
    names = [p.normalized for p in dedup_phrases(phrases, config.stoplist)]
    if not names:
        logger.info("No noun phrases in captions", image_id=image.id)
        return []

    response = await client.ground_phrases(
        GroundingRequest(
            image=image,
            phrases=names,
            box_threshold=config.detector_box_threshold,
            text_threshold=config.detector_text_threshold,
        ),
        stage=Stage.GROUNDING,
    )
    concepts: list[DetectedConcept] = []
    for name in names:
        same_name = [d for d in response.detections if d.name == name]
        concepts.extend(collapse_duplicates(same_name, config.duplicate_iou_threshold))
    logger.debug(
        "Grounded concepts",
        image_id=image.id,
        phrases=len(names),
        concepts=len(concepts),
    )
    return concepts


async def gen_region_captions(
    client: BackendClient,
    image: ImageRecord,
    concept: DetectedConcept,
    prompts: PromptBook,
    config: PipelineConfig,
) -> list[CaptionCandidate]:
    """
    Beam-search captions for one concept crop.

    Identical beams collapse onto the lowest beam index; every candidate keeps
    its backend rank as beam_index.
    """
    response = await client.vlm_complete(
        VlmRequest(
            image=image,
            crop=pad_box(concept.box, config.crop_pad_fraction, image),
            prompt=prompts.render(PromptName.REGION_DESC, e=concept.name),
            beam_width=config.beam_width,
        ),
        stage=Stage.REGION_CAPTION,
    )
    seen: set[str] = set()
    candidates = []
    for rank, text in enumerate(response.candidates):
        text = text.strip()
        if not text or text in seen:
            continue
        seen.add(text)
        candidates.append(CaptionCandidate(text=text, beam_index=rank))
    if not candidates:
        raise EmptyGeneration(f"blank region captions for {concept.name!r} in {image.id}")
    return candidates


def _is_no_text(answer: str) -> bool:
    return answer.strip().strip(".!").strip().lower() == _NO_TEXT_SENTINEL


async def extract_ocr(
    client: BackendClient,
    image: ImageRecord,
    concept: DetectedConcept,
    prompts: PromptBook,
    config: PipelineConfig,
) -> str | None:
    """Read the text inside a concept crop; None when the model answers 'No'."""
    response = await client.vlm_complete(
        VlmRequest(
            image=image,
            crop=pad_box(concept.box, config.crop_pad_fraction, image),
            prompt=prompts.render(PromptName.OCR),
            beam_width=1,
        ),
        stage=Stage.OCR,
    )
    answer = response.candidates[0].strip()
    if not answer or _is_no_text(answer):
        return None
    return answer
