"""
Generator-validator consistency checks.

The same VLM that wrote the captions is asked to confirm them: once per
concept group for the count ("is there n or more X?") and once per noun
phrase found in the region caption candidates ("is X visible?"). Confirmed
phrases score +1, rejected ones -1, and the best-scoring beam wins.
"""

import asyncio
from collections.abc import Iterable, Mapping

import structlog

from .backends import BackendClient, VlmRequest, parse_yes_no
from .errors import EmptyInput, MissingVerdict
from .geometry import merge_boxes
from .models import (
    Answer,
    BoundingBox,
    CaptionCandidate,
    ConceptGroup,
    DetectedConcept,
    GroupVerdict,
    ImageRecord,
    Stage,
    SubConcept,
)
from .nlp import dedup_phrases, extract_noun_phrases
from .prompts import PromptBook, PromptName

logger = structlog.get_logger()

__all__ = [
    "ValidationMemo",
    "counting_filter",
    "extract_candidate_concepts",
    "group_concepts",
    "merge_boxes",
    "rerank_candidates",
    "score_candidate",
    "select_caption",
    "validate_concepts",
]

_SCORE = {Answer.YES: 1, Answer.NO: -1, Answer.UNKNOWN: 0}


def group_concepts(concepts: Iterable[DetectedConcept]) -> list[ConceptGroup]:
    """
    Partition concepts by exact name.

    Groups come out in order of their first member; members keep input order.
    """
    by_name: dict[str, list[DetectedConcept]] = {}
    for concept in concepts:
        by_name.setdefault(concept.name, []).append(concept)
    return [
        ConceptGroup(
            name=name,
            members=members,
            count=len(members),
            merged_box=merge_boxes([m.box for m in members]),
        )
        for name, members in by_name.items()
    ]


async def counting_filter(
    client: BackendClient,
    image: ImageRecord,
    group: ConceptGroup,
    prompts: PromptBook,
) -> GroupVerdict:
    """
    Ask whether at least `count` instances of the group are visible.

    Only a Yes is consistent; No and unparseable answers are not.
    """
    prompt = prompts.render(
        PromptName.VALID_GROUP, parse_times=group.count, group_key=group.name
    )
    response = await client.vlm_complete(
        VlmRequest(image=image, crop=group.merged_box, prompt=prompt, beam_width=1),
        stage=Stage.COUNTING,
    )
    answer = parse_yes_no(response.candidates[0])
    verdict = GroupVerdict.CONSISTENT if answer is Answer.YES else GroupVerdict.INCONSISTENT
    if verdict is GroupVerdict.INCONSISTENT:
        logger.info(
            "Counting check failed",
            image_id=image.id,
            group=group.name,
            count=group.count,
            answer=answer.value,
        )
    return verdict


def extract_candidate_concepts(
    candidates: list[CaptionCandidate],
) -> list[CaptionCandidate]:
    """Fill each candidate's sub_concepts with its distinct noun phrases, all Unknown."""
    return [
        candidate.model_copy(
            update={
                "sub_concepts": [
                    SubConcept(phrase=phrase)
                    for phrase in dedup_phrases(extract_noun_phrases(candidate.text))
                ]
            }
        )
        for candidate in candidates
    ]


class ValidationMemo:
    """
    Per-image memo of concept validation answers keyed by (box, phrase).

    Entries are futures stored before the first await, so concurrent callers
    asking the same question share one backend call.
    """

    def __init__(self, image: ImageRecord):
        self.image = image
        self._answers: dict[tuple[tuple[int, ...], str], asyncio.Future[Answer]] = {}

    def __len__(self) -> int:
        return len(self._answers)

    def lookup(
        self, box: BoundingBox, phrase: str
    ) -> "asyncio.Future[Answer] | None":
        return self._answers.get((tuple(box.as_list()), phrase))

    def store(self, box: BoundingBox, phrase: str, future: "asyncio.Future[Answer]") -> None:
        self._answers[(tuple(box.as_list()), phrase)] = future


async def _ask_concept(
    client: BackendClient,
    image: ImageRecord,
    box: BoundingBox,
    phrase: str,
    prompts: PromptBook,
) -> Answer:
    response = await client.vlm_complete(
        VlmRequest(
            image=image,
            crop=box,
            prompt=prompts.render(PromptName.VALID_CONCEPT, e=phrase),
            beam_width=1,
        ),
        stage=Stage.CONCEPT_VALIDATION,
    )
    return parse_yes_no(response.candidates[0])


async def validate_concepts(
    client: BackendClient,
    image: ImageRecord,
    group_box: BoundingBox,
    phrases: Iterable[str],
    memo: ValidationMemo,
    prompts: PromptBook,
) -> dict[str, Answer]:
    """
    Validate each distinct phrase against the group crop.

    Args:
        client: Backend for the validation prompt
        image: Image the group belongs to; must be the memo's image
        group_box: Merged box of the concept group
        phrases: Normalized phrases, duplicates allowed
        memo: Answers already asked for this image
        prompts: Template book

    Returns:
        dict[str, Answer]: Verdict per distinct phrase
    """
    if memo.image.id != image.id:
        raise ValueError(f"memo for {memo.image.id} used with image {image.id}")
    distinct = sorted(set(phrases))
    if not distinct:
        raise EmptyInput("validate_concepts needs at least one phrase")

    pending: dict[str, asyncio.Future[Answer]] = {}
    for phrase in distinct:
        future = memo.lookup(group_box, phrase)
        if future is None:
            future = asyncio.ensure_future(
                _ask_concept(client, image, group_box, phrase, prompts)
            )
            memo.store(group_box, phrase, future)
        pending[phrase] = future
    # Memo futures are shared with concurrent callers for the same image
    answers = await asyncio.gather(*pending.values())
    return dict(zip(pending, answers))


def score_candidate(candidate: CaptionCandidate, verdicts: Mapping[str, Answer]) -> int:
    """Yes counts +1, No counts -1, Unknown counts 0."""
    score = 0
    for sub in candidate.sub_concepts:
        name = sub.phrase.normalized
        if name not in verdicts:
            raise MissingVerdict(name)
        score += _SCORE[verdicts[name]]
    return score


def select_caption(candidates: list[CaptionCandidate]) -> CaptionCandidate:
    """Highest score wins; ties go to the lowest beam index."""
    if not candidates:
        raise EmptyInput("select_caption needs at least one candidate")
    unscored = [c.beam_index for c in candidates if c.score is None]
    if unscored:
        raise ValueError(f"candidates at beams {unscored} have not been scored")
    return max(candidates, key=lambda c: (c.score, -c.beam_index))


async def rerank_candidates(
    client: BackendClient,
    image: ImageRecord,
    group_box: BoundingBox,
    candidates: list[CaptionCandidate],
    memo: ValidationMemo,
    prompts: PromptBook,
) -> list[CaptionCandidate]:
    """
    Score region caption candidates by their validated sub-concepts.

    Phrases are validated once over the union of all candidates.

    Returns:
        list[CaptionCandidate]: The candidates, in input order, with verdicts
        and scores filled in
    """
    parsed = extract_candidate_concepts(candidates)
    phrases = {sub.phrase.normalized for c in parsed for sub in c.sub_concepts}
    verdicts = (
        await validate_concepts(client, image, group_box, phrases, memo, prompts)
        if phrases
        else {}
    )
    scored = []
    for candidate in parsed:
        subs = [
            sub.model_copy(update={"verdict": verdicts[sub.phrase.normalized]})
            for sub in candidate.sub_concepts
        ]
        scored.append(
            candidate.model_copy(
                update={
                    "sub_concepts": subs,
                    "score": score_candidate(candidate, verdicts),
                }
            )
        )
    return scored
