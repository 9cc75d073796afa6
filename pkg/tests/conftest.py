"""Shared fixtures: a scripted model backend and a tiny image corpus."""

import json
import re
from pathlib import Path
from typing import Any

import pytest
from PIL import Image
from pydantic import BaseModel, Field

from w2c_pipeline.backends import GroundingRequest, ModelBackend, ReplayRecorder, VlmRequest
from w2c_pipeline.prompts import DEFAULT_TEMPLATES, PromptName

IMAGE_WIDTH = 64
IMAGE_HEIGHT = 48

_REGION_RE = re.compile(r"^From the image, provide one sentence that describes (.+?) \(")
_VALID_CONCEPT_RE = re.compile(r"^Is '(.+)' a valid and visible visual concept")
_VALID_GROUP_RE = re.compile(r"^Is there (\d+) or more (.+) in the image\?")


def _default_detections() -> list[dict[str, Any]]:
    return [
        {"phrase": "dog", "box": [10, 10, 40, 40], "score": 0.9},
        {"phrase": "bench", "box": [5, 30, 60, 46], "score": 0.8},
    ]


def _default_regions() -> dict[str, list[str]]:
    # For "dog" the second beam wins re-ranking: "red hat" is scripted as
    # hallucinated below.
    return {
        "dog": ["dog with a red hat on the grass.", "dog on a wooden bench."],
        "bench": ["bench on the grass.", "bench under a tree."],
    }


class ImageScript(BaseModel):
    """Canned model answers for one image."""

    general: list[str] = Field(default_factory=lambda: ["A dog on a bench."])
    detail: list[str] = Field(default_factory=lambda: ["A brown dog and a wooden bench."])
    detections: list[dict[str, Any]] = Field(default_factory=_default_detections)
    region: dict[str, list[str]] = Field(default_factory=_default_regions)
    ocr: dict[str, str] = Field(default_factory=dict)
    counting: dict[str, str] = Field(default_factory=dict)
    validity: dict[str, str] = Field(default_factory=lambda: {"red hat": "No"})


class ScriptedBackend(ModelBackend):
    """
    In-process stand-in for both model services.

    Answers by image id and prompt, and logs every call it actually serves so
    tests can count backend traffic.
    """

    def __init__(self, scripts: dict[str, ImageScript], recorder: ReplayRecorder | None = None):
        super().__init__(recorder=recorder)
        self.scripts = scripts
        self.calls: list[tuple[str, str]] = []

    def prompts_for(self, image_id: str) -> list[str]:
        return [prompt for iid, prompt in self.calls if iid == image_id]

    async def _fetch_vlm(self, request: VlmRequest, key: str) -> Any:
        script = self.scripts[request.image.id]
        prompt = request.prompt
        self.calls.append((request.image.id, prompt))

        if prompt == DEFAULT_TEMPLATES[PromptName.GLOBAL]:
            return {"candidates": script.general}
        if prompt == DEFAULT_TEMPLATES[PromptName.DETAIL]:
            return {"candidates": script.detail}
        if prompt == DEFAULT_TEMPLATES[PromptName.OCR]:
            crop = request.crop.as_list() if request.crop else None
            for detection in script.detections:
                if detection["box"] == crop:
                    return {"candidates": [script.ocr.get(detection["phrase"], "No")]}
            return {"candidates": ["No"]}
        if match := _REGION_RE.match(prompt):
            name = match.group(1)
            return {"candidates": script.region.get(name, [f"{name} in the picture."])}
        if match := _VALID_CONCEPT_RE.match(prompt):
            return {"candidates": [script.validity.get(match.group(1), "Yes")]}
        if match := _VALID_GROUP_RE.match(prompt):
            return {"candidates": [script.counting.get(match.group(2), "Yes")]}
        raise AssertionError(f"unscripted prompt {prompt!r}")

    async def _fetch_grounding(self, request: GroundingRequest, key: str) -> Any:
        script = self.scripts[request.image.id]
        self.calls.append((request.image.id, "grounding"))
        wanted = set(request.phrases)
        return {"detections": [d for d in script.detections if d["phrase"] in wanted]}


class Corpus(BaseModel):
    manifest: Path
    scripts: dict[str, ImageScript]

    @property
    def ids(self) -> list[str]:
        return list(self.scripts)


def write_image(path: Path, index: int) -> None:
    """Small PNG whose bytes differ per index."""
    color = (index % 256, (index // 256) % 256, 90)
    Image.new("RGB", (IMAGE_WIDTH, IMAGE_HEIGHT), color).save(path, format="PNG")


@pytest.fixture
def make_corpus(tmp_path):
    """
    Factory writing n images plus a manifest.

    Images listed in `inconsistent` answer "No" to the counting prompt for
    "dog"; `scripts` entries replace the default script for their ids.
    """

    def _make(
        n: int = 3,
        inconsistent: set[str] | None = None,
        scripts: dict[str, ImageScript] | None = None,
        name: str = "corpus",
    ) -> Corpus:
        root = tmp_path / name
        images_dir = root / "images"
        images_dir.mkdir(parents=True)
        built: dict[str, ImageScript] = {}
        rows = []
        for i in range(n):
            image_id = f"img{i:03d}"
            write_image(images_dir / f"{image_id}.png", i)
            script = (scripts or {}).get(image_id) or ImageScript()
            if image_id in (inconsistent or set()):
                script = script.model_copy(update={"counting": {"dog": "No"}})
            built[image_id] = script
            rows.append(
                {
                    "id": image_id,
                    "path": f"images/{image_id}.png",
                    "width": IMAGE_WIDTH,
                    "height": IMAGE_HEIGHT,
                }
            )
        manifest = root / "manifest.jsonl"
        manifest.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        return Corpus(manifest=manifest, scripts=built)

    return _make


@pytest.fixture
def sample_image(tmp_path):
    """One 64x48 image on disk as an ImageRecord."""
    from w2c_pipeline.models import ImageRecord

    path = tmp_path / "sample.png"
    write_image(path, 7)
    return ImageRecord(id="sample", path=path, width=IMAGE_WIDTH, height=IMAGE_HEIGHT)
