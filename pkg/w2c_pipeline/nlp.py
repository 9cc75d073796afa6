"""
Noun-phrase extraction for captions.

A small deterministic replacement for a full NLP toolkit: a bundled lexicon
(word -> most frequent tag) with suffix fallbacks, a fixed chunk grammar
DET? NUM? ADJ* NOUN+, and a suffix-rule lemmatizer with an exception table.
Caption English is narrow enough that this gets the phrases the grounding
model needs, and it never changes output between machines.
"""

import re
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable

from pydantic import BaseModel, ConfigDict, Field

from .models import NounPhrase

_TOKEN_RE = re.compile(
    r"(?:[A-Za-z]\.){2,}|[A-Za-z0-9]+(?:[-'’][A-Za-z0-9]+)*|[^\sA-Za-z0-9]"
)
_POSSESSIVE = ("'s", "’s")

_ADJ_SUFFIXES = (
    "ous", "ful", "ive", "able", "ible", "al", "ic", "ish", "less", "ular", "ary", "ed",
)  # fmt: skip
_OTHER_SUFFIXES = ("ly", "ing")
_INVARIANT_ENDINGS = ("ss", "us", "is")
_ES_ENDINGS = ("sses", "shes", "ches", "xes", "zzes")


class PosTag(str, Enum):
    NOUN = "NOUN"
    PROPN = "PROPN"
    ADJ = "ADJ"
    DET = "DET"
    NUM = "NUM"
    OTHER = "OTHER"


class PosToken(BaseModel):
    """A tagged token with its character span in the source text."""

    model_config = ConfigDict(frozen=True)

    text: str = Field(min_length=1)
    tag: PosTag
    start: int = Field(default=0, ge=0)
    end: int = Field(default=0, ge=0)

    @property
    def is_noun(self) -> bool:
        return self.tag in (PosTag.NOUN, PosTag.PROPN)


def _read_table(name: str) -> dict[str, str]:
    table: dict[str, str] = {}
    source = resources.files("w2c_pipeline").joinpath("data").joinpath(name)
    for line in source.read_text("utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        key, value = line.split("\t")
        table.setdefault(key, value)
    return table


@lru_cache(maxsize=1)
def lexicon() -> dict[str, PosTag]:
    return {word: PosTag(tag) for word, tag in _read_table("lexicon.tsv").items()}


@lru_cache(maxsize=1)
def lemma_exceptions() -> dict[str, str]:
    return _read_table("lemma_exceptions.tsv")


def _guess_tag(word: str, position: int) -> PosTag:
    lowered = word.lower()
    known = lexicon().get(lowered)
    if known is not None:
        return known
    if lowered.endswith(_POSSESSIVE) and lexicon().get(lowered[:-2]) is PosTag.NOUN:
        return PosTag.NOUN
    if lowered.isdigit():
        return PosTag.NUM
    if not lowered[0].isalnum():
        return PosTag.OTHER
    if position > 0 and word[0].isupper():
        return PosTag.PROPN
    if lowered.endswith(_OTHER_SUFFIXES):
        return PosTag.OTHER
    if lowered.endswith(_ADJ_SUFFIXES):
        return PosTag.ADJ
    return PosTag.NOUN


def tag_tokens(sentence: str) -> list[PosToken]:
    """
    Tokenize and tag a sentence.

    Args:
        sentence: Any text; empty input gives an empty list

    Returns:
        list[PosToken]: Tokens left to right; joining their texts with spaces
        gives the tokenized sentence
    """
    tokens = []
    for position, match in enumerate(_TOKEN_RE.finditer(sentence)):
        word = match.group()
        tokens.append(
            PosToken(
                text=word,
                tag=_guess_tag(word, position),
                start=match.start(),
                end=match.end(),
            )
        )
    return tokens


def singularize(word: str) -> str:
    """Lemmatize a plural noun; idempotent."""
    exceptions = lemma_exceptions()
    if word in exceptions:
        return exceptions[word]
    if len(word) <= 3 or word.endswith(_INVARIANT_ENDINGS):
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(_ES_ENDINGS):
        return word[:-2]
    if word.endswith("s"):
        return word[:-1]
    return word


def strip_possessive(word: str) -> str:
    """"dog's" -> "dog"; anything else is returned unchanged."""
    if word.endswith(_POSSESSIVE) and len(word) > 2:
        return word[:-2]
    return word


def _normalize_tokens(tokens: list[PosToken]) -> str:
    # Punctuation never belongs to a concept name
    words = [token for token in tokens if token.text[0].isalnum()] or tokens
    start = 0
    while start < len(words) and words[start].tag in (PosTag.DET, PosTag.NUM):
        start += 1
    kept = [token.text.lower() for token in words[start:]]
    if not kept:
        return " ".join(token.text.lower() for token in words)
    if words[-1].is_noun:
        kept[-1] = singularize(strip_possessive(kept[-1]))
    return " ".join(kept)


def normalize_phrase(surface: str) -> str:
    """
    Normalize a noun phrase to its concept name.

    Lowercases, strips leading determiners and numerals, and lemmatizes the
    head noun: "The Buses" -> "bus", "three red cars" -> "red car".
    """
    tokens = tag_tokens(surface)
    if not tokens:
        return surface.strip().lower()
    return _normalize_tokens(tokens)


def _match_chunk(tokens: list[PosToken], start: int) -> int:
    """Return the end index of a DET? NUM? ADJ* NOUN+ chunk at start, or start."""
    i = start
    if i < len(tokens) and tokens[i].tag is PosTag.DET:
        i += 1
    if i < len(tokens) and tokens[i].tag is PosTag.NUM:
        i += 1
    while i < len(tokens) and tokens[i].tag is PosTag.ADJ:
        i += 1
    nouns_from = i
    while i < len(tokens) and tokens[i].is_noun:
        i += 1
    return i if i > nouns_from else start


def extract_noun_phrases(text: str) -> list[NounPhrase]:
    """
    Chunk every noun phrase in a caption, left to right.

    Args:
        text: Caption text

    Returns:
        list[NounPhrase]: One phrase per contiguous DET? NUM? ADJ* NOUN+ span
    """
    tokens = tag_tokens(text)
    phrases: list[NounPhrase] = []
    i = 0
    while i < len(tokens):
        end = _match_chunk(tokens, i)
        if end == i:
            i += 1
            continue
        span = tokens[i:end]
        phrases.append(
            NounPhrase(
                surface=text[span[0].start : span[-1].end],
                normalized=_normalize_tokens(span),
            )
        )
        i = end
    return phrases


def dedup_phrases(
    phrases: Iterable[NounPhrase], stoplist: Iterable[str] = ()
) -> list[NounPhrase]:
    """Keep the first phrase per normalized form and drop stoplisted ones."""
    stop = set(stoplist)
    seen: set[str] = set()
    kept = []
    for phrase in phrases:
        if phrase.normalized in stop or phrase.normalized in seen:
            continue
        seen.add(phrase.normalized)
        kept.append(phrase)
    return kept
