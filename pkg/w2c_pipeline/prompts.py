"""Instruction prompt templates for every generation and validation step."""

import json
import re
from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, model_validator

_PLACEHOLDER_RE = re.compile(r"\{([^{}]*)\}")


class PromptName(str, Enum):
    GLOBAL = "global"
    DETAIL = "detail"
    REGION_DESC = "region_desc"
    OCR = "ocr"
    VALID_CONCEPT = "valid_concept"
    VALID_GROUP = "valid_group"


# Which placeholders each template may use
_ALLOWED: dict[PromptName, frozenset[str]] = {
    PromptName.GLOBAL: frozenset(),
    PromptName.DETAIL: frozenset(),
    PromptName.REGION_DESC: frozenset({"e"}),
    PromptName.OCR: frozenset(),
    PromptName.VALID_CONCEPT: frozenset({"e"}),
    PromptName.VALID_GROUP: frozenset({"parse times", "group key"}),
}

DEFAULT_TEMPLATES: dict[PromptName, str] = {
    PromptName.GLOBAL: (
        "Please provide a simple sentence that describes this image accurately."
    ),
    PromptName.DETAIL: (
        "Please describe all the visual concepts in the image in detail, "
        "but use concise words with no more than 120 words."
    ),
    PromptName.REGION_DESC: (
        "From the image, provide one sentence that describes {e} (you should try "
        "your best to include attributes like shape, color or material), "
        "especially, using {e} as the beginning of your answer."
    ),
    PromptName.OCR: (
        "List all the text in the image, answer with the ocr tokens only, "
        "and answer 'No' with one word if there isn't any."
    ),
    PromptName.VALID_CONCEPT: (
        "Is '{e}' a valid and visible visual concept in the image? "
        "Answer yes or no with only one single word."
    ),
    PromptName.VALID_GROUP: (
        "Is there {parse times} or more {group key} in the image? "
        "Answer yes or no with a single word."
    ),
}


class PromptTemplate(BaseModel):
    """A named template with {e}, {parse times} or {group key} slots."""

    model_config = ConfigDict(frozen=True)

    name: PromptName
    template: str

    @model_validator(mode="after")
    def _known_placeholders(self) -> "PromptTemplate":
        unknown = set(_PLACEHOLDER_RE.findall(self.template)) - _ALLOWED[self.name]
        if unknown:
            raise ValueError(f"template {self.name.value} has unknown slots {sorted(unknown)}")
        return self

    def render(self, **values: str | int) -> str:
        """
        Fill the template's slots.

        Keyword names use underscores for the spaced slots:
        parse_times -> {parse times}, group_key -> {group key}.
        """
        text = self.template
        for key, value in values.items():
            text = text.replace("{" + key.replace("_", " ") + "}", str(value))
        leftover = _PLACEHOLDER_RE.findall(text)
        if leftover:
            raise ValueError(f"unfilled slots {leftover} in {self.name.value} prompt")
        return text


class PromptBook(BaseModel):
    """The six templates a run uses."""

    model_config = ConfigDict(frozen=True)

    templates: dict[PromptName, PromptTemplate]

    @classmethod
    def default(cls) -> "PromptBook":
        return cls(
            templates={
                name: PromptTemplate(name=name, template=text)
                for name, text in DEFAULT_TEMPLATES.items()
            }
        )

    @classmethod
    def from_file(cls, path: Path | None) -> "PromptBook":
        """Defaults overridden by a JSON {name: template} file."""
        book = cls.default()
        if path is None:
            return book
        overrides = json.loads(Path(path).read_text(encoding="utf-8"))
        templates = dict(book.templates)
        for name, text in overrides.items():
            prompt_name = PromptName(name)
            templates[prompt_name] = PromptTemplate(name=prompt_name, template=text)
        return cls(templates=templates)

    def render(self, name: PromptName, **values: str | int) -> str:
        return self.templates[name].render(**values)

    def as_dict(self) -> dict[str, str]:
        return {name.value: self.templates[name].template for name in PromptName}
