"""Tests for grouping, box geometry, counting and caption re-ranking."""

import asyncio
import itertools
import random

import pytest

from w2c_pipeline.backends import VlmResponse
from w2c_pipeline.consistency import (
    ValidationMemo,
    counting_filter,
    extract_candidate_concepts,
    group_concepts,
    merge_boxes,
    rerank_candidates,
    score_candidate,
    select_caption,
    validate_concepts,
)
from w2c_pipeline.errors import EmptyInput, MissingVerdict
from w2c_pipeline.geometry import iou, pad_box
from w2c_pipeline.models import (
    Answer,
    BoundingBox,
    CaptionCandidate,
    DetectedConcept,
    GroupVerdict,
    ImageRecord,
    NounPhrase,
    Stage,
    SubConcept,
)
from w2c_pipeline.prompts import PromptBook


def _box(*coords: int) -> BoundingBox:
    return BoundingBox.from_list(list(coords))


def _concept(name, coords, confidence=0.9):
    return DetectedConcept(name=name, box=_box(*coords), confidence=confidence)


def _random_box(rng: random.Random, limit: int = 100) -> BoundingBox:
    x1, x2 = sorted(rng.sample(range(limit + 1), 2))
    y1, y2 = sorted(rng.sample(range(limit + 1), 2))
    return BoundingBox(x1=x1, y1=y1, x2=x2, y2=y2)


def _candidate_with(verdicts: list[Answer], beam_index: int = 0) -> tuple[CaptionCandidate, dict]:
    subs = [
        SubConcept(phrase=NounPhrase(surface=f"p{i}", normalized=f"p{i}"))
        for i in range(len(verdicts))
    ]
    return (
        CaptionCandidate(text="x", beam_index=beam_index, sub_concepts=subs),
        {f"p{i}": v for i, v in enumerate(verdicts)},
    )


class AnsweringClient:
    """Answers every VLM prompt from a phrase table and counts calls."""

    def __init__(self, answer_for):
        self.answer_for = answer_for
        self.requests = []

    async def vlm_complete(self, request, stage=None):
        self.requests.append((request, stage))
        await asyncio.sleep(0)
        return VlmResponse(candidates=[self.answer_for(request.prompt)])

    async def ground_phrases(self, request, stage=None):
        raise AssertionError("not used")


@pytest.fixture
def prompts():
    return PromptBook.default()


class TestGeometry:
    """Test IoU, padding and merging."""

    def test_iou(self):
        assert iou(_box(0, 0, 10, 10), _box(0, 0, 10, 10)) == 1.0
        assert iou(_box(0, 0, 10, 10), _box(10, 0, 20, 10)) == 0.0
        assert iou(_box(0, 0, 10, 10), _box(5, 0, 15, 10)) == pytest.approx(50 / 150)

    def test_pad_zero_is_identity(self):
        image = ImageRecord(id="i", width=64, height=48)
        box = _box(3, 4, 20, 30)
        assert pad_box(box, 0.0, image) == box

    def test_pad_contains_and_clamps(self):
        image = ImageRecord(id="i", width=64, height=48)
        rng = random.Random(3)
        for _ in range(500):
            box = _random_box(rng, limit=48)
            padded = pad_box(box, rng.choice([0.1, 0.25, 1.0]), image)
            assert padded.contains(box)
            assert padded.fits(64, 48)

    def test_merge_examples(self):
        single = _box(1, 2, 3, 4)
        assert merge_boxes([single]) == single
        assert merge_boxes([_box(0, 0, 50, 50), _box(10, 10, 20, 20)]) == _box(0, 0, 50, 50)
        assert merge_boxes([_box(10, 10, 20, 20), _box(15, 15, 30, 30)]) == _box(10, 10, 30, 30)

    def test_merge_empty(self):
        with pytest.raises(EmptyInput):
            merge_boxes([])

    def test_merge_matches_brute_force(self):
        """10,000 random box lists against corner min/max, containment and minimality."""
        rng = random.Random(20240611)
        for _ in range(10_000):
            boxes = [_random_box(rng) for _ in range(rng.randint(1, 8))]
            merged = merge_boxes(boxes)
            corners = [(b.x1, b.y1) for b in boxes] + [(b.x2, b.y2) for b in boxes]
            assert merged.x1 == min(x for x, _ in corners)
            assert merged.y1 == min(y for _, y in corners)
            assert merged.x2 == max(x for x, _ in corners)
            assert merged.y2 == max(y for _, y in corners)
            assert all(merged.contains(b) for b in boxes)
            assert any(b.x1 == merged.x1 for b in boxes)
            assert any(b.y1 == merged.y1 for b in boxes)
            assert any(b.x2 == merged.x2 for b in boxes)
            assert any(b.y2 == merged.y2 for b in boxes)


class TestGroupConcepts:
    """Test same-name grouping."""

    def test_partition_in_first_appearance_order(self):
        concepts = [
            _concept("dog", [0, 0, 5, 5]),
            _concept("bench", [10, 10, 30, 20]),
            _concept("dog", [20, 20, 30, 30]),
            _concept("dog", [1, 1, 6, 6]),
        ]
        groups = group_concepts(concepts)
        assert [(g.name, g.count) for g in groups] == [("dog", 3), ("bench", 1)]
        assert groups[0].merged_box == _box(0, 0, 30, 30)
        assert groups[0].members == [concepts[0], concepts[2], concepts[3]]
        assert sum(g.count for g in groups) == len(concepts)
        assert all(g.verdict is GroupVerdict.UNCHECKED for g in groups)

    def test_empty(self):
        assert group_concepts([]) == []


class TestCountingFilter:
    """Test the at-least-n counting check."""

    @pytest.mark.parametrize(
        "answer,verdict",
        [
            ("Yes", GroupVerdict.CONSISTENT),
            ("yes.", GroupVerdict.CONSISTENT),
            ("No", GroupVerdict.INCONSISTENT),
            ("maybe", GroupVerdict.INCONSISTENT),
        ],
    )
    @pytest.mark.asyncio
    async def test_verdicts(self, sample_image, prompts, answer, verdict):
        group = group_concepts([_concept("dog", [0, 0, 5, 5]), _concept("dog", [10, 10, 20, 20])])[0]
        client = AnsweringClient(lambda prompt: answer)
        assert await counting_filter(client, sample_image, group, prompts) is verdict

        request, stage = client.requests[0]
        assert stage is Stage.COUNTING
        assert request.prompt == (
            "Is there 2 or more dog in the image? Answer yes or no with a single word."
        )
        assert request.crop == _box(0, 0, 20, 20)
        assert request.beam_width == 1
        assert group.members[0].box == _box(0, 0, 5, 5)


class TestCandidateConcepts:
    """Test sub-concept extraction from caption candidates."""

    def test_extracts_distinct_phrases(self):
        candidates = [
            CaptionCandidate(text="A brown dog on grass", beam_index=0),
            CaptionCandidate(text="A dog and a dog.", beam_index=1),
            CaptionCandidate(text="is on with", beam_index=2),
        ]
        parsed = extract_candidate_concepts(candidates)
        assert [s.phrase.normalized for s in parsed[0].sub_concepts] == ["brown dog", "grass"]
        assert [s.phrase.normalized for s in parsed[1].sub_concepts] == ["dog"]
        assert parsed[2].sub_concepts == []
        assert all(s.verdict is Answer.UNKNOWN for c in parsed for s in c.sub_concepts)


class TestValidateConcepts:
    """Test concept validation and its memo."""

    @pytest.mark.asyncio
    async def test_scripted_answers(self, sample_image, prompts):
        table = {"dog": "Yes", "hat": "No"}
        client = AnsweringClient(lambda p: table[p.split("'")[1]])
        memo = ValidationMemo(sample_image)
        verdicts = await validate_concepts(
            client, sample_image, _box(0, 0, 20, 20), ["hat", "dog"], memo, prompts
        )
        assert verdicts == {"dog": Answer.YES, "hat": Answer.NO}
        request, stage = client.requests[0]
        assert stage is Stage.CONCEPT_VALIDATION
        assert request.prompt == (
            "Is 'dog' a valid and visible visual concept in the image? "
            "Answer yes or no with only one single word."
        )
        assert request.crop == _box(0, 0, 20, 20)

    @pytest.mark.asyncio
    async def test_each_phrase_asked_once(self, sample_image, prompts):
        client = AnsweringClient(lambda p: "Yes")
        memo = ValidationMemo(sample_image)
        box = _box(0, 0, 20, 20)
        await asyncio.gather(
            validate_concepts(client, sample_image, box, ["dog", "grass"], memo, prompts),
            validate_concepts(client, sample_image, box, ["dog", "dog"], memo, prompts),
        )
        await validate_concepts(client, sample_image, box, ["grass"], memo, prompts)
        assert len(client.requests) == 2

        await validate_concepts(client, sample_image, _box(0, 0, 10, 10), ["dog"], memo, prompts)
        assert len(client.requests) == 3

    @pytest.mark.asyncio
    async def test_memo_bound_to_image(self, sample_image, prompts):
        other = sample_image.model_copy(update={"id": "other"})
        with pytest.raises(ValueError):
            await validate_concepts(
                AnsweringClient(lambda p: "Yes"),
                other,
                _box(0, 0, 5, 5),
                ["dog"],
                ValidationMemo(sample_image),
                prompts,
            )

    @pytest.mark.asyncio
    async def test_empty_phrases(self, sample_image, prompts):
        with pytest.raises(EmptyInput):
            await validate_concepts(
                AnsweringClient(lambda p: "Yes"),
                sample_image,
                _box(0, 0, 5, 5),
                [],
                ValidationMemo(sample_image),
                prompts,
            )


class TestScoring:
    """Test candidate scoring and selection."""

    @pytest.mark.parametrize(
        "verdicts,score",
        [
            ([Answer.YES] * 3 + [Answer.NO], 2),
            ([], 0),
            ([Answer.YES, Answer.YES, Answer.NO, Answer.NO, Answer.UNKNOWN], 0),
        ],
    )
    def test_examples(self, verdicts, score):
        candidate, table = _candidate_with(verdicts)
        assert score_candidate(candidate, table) == score

    def test_all_assignments(self):
        """Every verdict assignment over up to four sub-concepts."""
        value = {Answer.YES: 1, Answer.NO: -1, Answer.UNKNOWN: 0}
        for size in range(5):
            for verdicts in itertools.product(list(Answer), repeat=size):
                candidate, table = _candidate_with(list(verdicts))
                score = score_candidate(candidate, table)
                assert score == sum(value[v] for v in verdicts)
                for i, v in enumerate(verdicts):
                    flipped = dict(table)
                    if v is Answer.NO:
                        flipped[f"p{i}"] = Answer.YES
                        assert score_candidate(candidate, flipped) == score + 2
                    elif v is Answer.UNKNOWN:
                        flipped[f"p{i}"] = Answer.YES
                        assert score_candidate(candidate, flipped) == score + 1

    def test_missing_verdict(self):
        candidate, _ = _candidate_with([Answer.YES])
        with pytest.raises(MissingVerdict):
            score_candidate(candidate, {})

    def test_select_examples(self):
        scored = [
            CaptionCandidate(text=t, beam_index=i, score=s)
            for i, (t, s) in enumerate([("a", 2), ("b", 0), ("c", -1)])
        ]
        assert select_caption(scored).text == "a"
        tie = [
            CaptionCandidate(text="b", beam_index=1, score=1),
            CaptionCandidate(text="a", beam_index=0, score=1),
        ]
        assert select_caption(tie).beam_index == 0

    def test_select_empty_and_unscored(self):
        with pytest.raises(EmptyInput):
            select_caption([])
        with pytest.raises(ValueError):
            select_caption([CaptionCandidate(text="a", beam_index=0)])

    def test_select_matches_exhaustive_oracle(self):
        """All score vectors for up to four candidates, random ones up to six."""

        def oracle(candidates):
            best = None
            for c in candidates:
                if best is None or c.score > best.score:
                    best = c
                elif c.score == best.score and c.beam_index < best.beam_index:
                    best = c
            return best

        def check(scores, rng):
            candidates = [
                CaptionCandidate(text=f"c{i}", beam_index=i, score=s)
                for i, s in enumerate(scores)
            ]
            expected = oracle(candidates)
            assert select_caption(candidates) == expected
            shuffled = candidates[:]
            rng.shuffle(shuffled)
            assert select_caption(shuffled) == expected
            worse = CaptionCandidate(text="w", beam_index=99, score=min(scores) - 1)
            assert select_caption(candidates + [worse]) == expected

        rng = random.Random(11)
        for size in range(1, 5):
            for scores in itertools.product(range(-4, 5), repeat=size):
                check(scores, rng)
        for _ in range(3000):
            check([rng.randint(-4, 4) for _ in range(rng.randint(5, 6))], rng)


class TestRerank:
    """Test end-to-end candidate re-ranking."""

    @pytest.mark.asyncio
    async def test_hallucinated_phrase_loses(self, sample_image, prompts):
        table = {"dog": "Yes", "red hat": "No", "grass": "Yes", "wooden bench": "Yes"}
        client = AnsweringClient(lambda p: table[p.split("'")[1]])
        candidates = [
            CaptionCandidate(text="dog with a red hat on the grass.", beam_index=0),
            CaptionCandidate(text="dog on a wooden bench.", beam_index=1),
        ]
        scored = await rerank_candidates(
            client, sample_image, _box(0, 0, 40, 40), candidates, ValidationMemo(sample_image), prompts
        )
        assert [c.score for c in scored] == [1, 2]
        assert select_caption(scored).beam_index == 1
        assert len(client.requests) == 4
        assert scored[0].sub_concepts[1].verdict is Answer.NO

    @pytest.mark.asyncio
    async def test_no_phrases_keeps_top_beam(self, sample_image, prompts):
        client = AnsweringClient(lambda p: "Yes")
        candidates = [
            CaptionCandidate(text="is on.", beam_index=0),
            CaptionCandidate(text="with it.", beam_index=1),
        ]
        scored = await rerank_candidates(
            client, sample_image, _box(0, 0, 5, 5), candidates, ValidationMemo(sample_image), prompts
        )
        assert client.requests == []
        assert select_caption(scored).beam_index == 0
