"""
Data structures shared by every pipeline stage.

All of these are frozen pydantic models: once a stage has produced a value
it is passed around between concurrent workers without copying. Invariants
that belong to a single value are checked by validators here; invariants
that span a whole record (boxes inside the image, unique group names, code
round-trip) live in the validation module.
"""

import hashlib
from enum import Enum
from pathlib import Path

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_serializer,
    field_validator,
    model_validator,
)

DEFAULT_STOPLIST = frozenset(
    {"image", "picture", "photo", "background", "scene", "view", "side", "part"}
)


class Answer(str, Enum):
    """Parsed yes/no answer from a validation prompt."""

    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"  # Neither word came first


class GroupVerdict(str, Enum):
    """Outcome of the counting filter for a concept group."""

    UNCHECKED = "unchecked"
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"


class DropPolicy(str, Enum):
    """How counting inconsistency is applied to a record."""

    DROP_RECORD = "record"  # Any inconsistent group discards the image
    DROP_GROUP = "group"  # Only the offending groups are removed


class OutputFormat(str, Enum):
    """Training-data layout written next to the record file."""

    CODE = "code"
    SINGLE_ROUND = "single"
    MULTI_ROUND = "multi"


class Stage(str, Enum):
    """Pipeline step that issued a backend call."""

    GLOBAL_CAPTION = "global_caption"
    DETAIL_CAPTION = "detail_caption"
    GROUNDING = "grounding"
    REGION_CAPTION = "region_caption"
    OCR = "ocr"
    COUNTING = "counting"
    CONCEPT_VALIDATION = "concept_validation"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True)


class ImageRecord(_Frozen):
    """One raw image from the manifest."""

    id: str = Field(min_length=1, description="Opaque identifier, unique per dataset")
    path: Path | None = Field(None, description="Image file; absent on reloaded records")
    width: int = Field(gt=0, description="Width in pixels")
    height: int = Field(gt=0, description="Height in pixels")


class BoundingBox(_Frozen):
    """Axis-aligned box in absolute integer pixels, [x1, y1, x2, y2]."""

    x1: int = Field(ge=0)
    y1: int = Field(ge=0)
    x2: int = Field(ge=0)
    y2: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_order(self) -> "BoundingBox":
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise ValueError(f"degenerate box {self.as_list()}")
        return self

    @classmethod
    def from_list(cls, coords: list[int] | tuple[int, ...]) -> "BoundingBox":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        x1, y1, x2, y2 = coords
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def fits(self, width: int, height: int) -> bool:
        """Whether the box lies inside an image of the given size."""
        return self.x2 <= width and self.y2 <= height

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and self.x2 >= other.x2
            and self.y2 >= other.y2
        )


class NounPhrase(_Frozen):
    """A chunked noun phrase and its normalized concept name."""

    surface: str = Field(description="Text as it appeared in the caption")
    normalized: str = Field(min_length=1, description="Lowercase lemmatized form")


class DetectedConcept(_Frozen):
    """A grounded noun phrase."""

    name: str = Field(min_length=1, description="Normalized phrase")
    box: BoundingBox
    confidence: float = Field(ge=0.0, le=1.0, description="Detector score")


class ConceptGroup(_Frozen):
    """All same-name concepts of one image with their merged box."""

    name: str = Field(min_length=1)
    members: list[DetectedConcept] = Field(min_length=1)
    count: int = Field(ge=1, description="Number of members, n_i")
    merged_box: BoundingBox
    verdict: GroupVerdict = GroupVerdict.UNCHECKED

    @model_validator(mode="after")
    def _check_members(self) -> "ConceptGroup":
        if self.count != len(self.members):
            raise ValueError(f"count {self.count} != {len(self.members)} members")
        for member in self.members:
            if member.name != self.name:
                raise ValueError(f"member {member.name!r} in group {self.name!r}")
            if not self.merged_box.contains(member.box):
                raise ValueError(f"merged box does not contain {member.box.as_list()}")
        return self


class SubConcept(_Frozen):
    """A noun phrase found inside a caption candidate, with its verdict."""

    phrase: NounPhrase
    verdict: Answer = Answer.UNKNOWN


class CaptionCandidate(_Frozen):
    """One beam of a region caption."""

    text: str
    beam_index: int = Field(ge=0, description="Backend rank, 0 is the top beam")
    sub_concepts: list[SubConcept] = Field(default_factory=list)
    score: int | None = Field(None, description="Yes count minus No count once scored")


class ConceptAnnotation(_Frozen):
    """Final annotation of one visual concept."""

    name: str = Field(min_length=1)
    caption: str
    text: str | None = Field(None, description="OCR text; None when there is none")
    box: BoundingBox

    @field_validator("caption")
    @classmethod
    def _caption_nonempty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("caption must not be empty")
        return value

    @field_validator("text")
    @classmethod
    def _text_nonblank(cls, value: str | None) -> str | None:
        if value is not None and not value.strip():
            raise ValueError("text must be absent rather than blank")
        return value


class AnnotationGroup(_Frozen):
    """Annotations sharing one concept name, in detection order."""

    name: str = Field(min_length=1)
    annotations: list[ConceptAnnotation] = Field(min_length=1)


class W2CRecord(_Frozen):
    """One finished dataset element with its emitted code."""

    image: ImageRecord
    global_caption: str
    groups: list[AnnotationGroup]
    code: str


class CodeContent(_Frozen):
    """Structured content a code document encodes."""

    class_name: str
    global_caption: str
    width: int
    height: int
    groups: list[AnnotationGroup]


class CodeDocument(_Frozen):
    """Emitted code text together with the content it encodes."""

    text: str
    structure: CodeContent


class PipelineConfig(_Frozen):
    """Per-run pipeline configuration."""

    beam_width: int = Field(default=4, ge=1)
    detector_box_threshold: float = Field(default=0.35, ge=0.0, le=1.0)
    detector_text_threshold: float = Field(default=0.25, ge=0.0, le=1.0)
    duplicate_iou_threshold: float = Field(default=0.9, ge=0.0, le=1.0)
    crop_pad_fraction: float = Field(default=0.0, ge=0.0)
    counting_filter_enabled: bool = True
    reranking_enabled: bool = True
    drop_policy: DropPolicy = DropPolicy.DROP_RECORD
    output_format: OutputFormat = OutputFormat.CODE
    max_concurrent_requests: int = Field(default=4, ge=1)
    stoplist: frozenset[str] = DEFAULT_STOPLIST
    use_all_caption_beams: bool = Field(
        default=False, description="Extract phrases from every caption beam"
    )

    @field_serializer("stoplist")
    def _sorted_stoplist(self, value: frozenset[str]) -> list[str]:
        return sorted(value)

    def fingerprint(self) -> str:
        """Hash of every field that can change output."""
        payload = self.model_dump_json(exclude={"max_concurrent_requests"})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class RunStats(BaseModel):
    """Counters reported for a run (and kept per image for resume)."""

    images_in: int = 0
    images_out: int = 0
    images_dropped: int = 0
    images_errored: int = 0
    concepts_detected: int = 0
    groups_total: int = 0
    groups_inconsistent: int = 0
    candidates_scored: int = 0
    backend_calls: int = 0
    cache_hits: int = 0
    drop_reasons: dict[str, int] = Field(default_factory=dict)
    error_reasons: dict[str, int] = Field(default_factory=dict)

    def absorb(self, other: "RunStats") -> None:
        """Add another set of counters into this one."""
        for name, value in other:
            if isinstance(value, int):
                setattr(self, name, getattr(self, name) + value)
        for reason, count in other.drop_reasons.items():
            self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + count
        for reason, count in other.error_reasons.items():
            self.error_reasons[reason] = self.error_reasons.get(reason, 0) + count

    def without_cache_counters(self) -> dict:
        return self.model_dump(exclude={"backend_calls", "cache_hits"})


class OutcomeStatus(str, Enum):
    WRITTEN = "written"
    DROPPED = "dropped"
    ERRORED = "errored"


class ImageOutcome(BaseModel):
    """What happened to one manifest image; persisted for resume."""

    image_id: str
    index: int = Field(ge=0, description="Position in the manifest")
    status: OutcomeStatus
    reason: str | None = None
    record: W2CRecord | None = None
    stats: RunStats = Field(default_factory=RunStats)


class StageCacheEntry(_Frozen):
    """A cached backend response."""

    request_key: str
    stage: Stage
    payload: str = Field(description="JSON of the stage's response model")
