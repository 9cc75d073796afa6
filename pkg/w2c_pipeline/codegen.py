"""
Record serialization: the Python-code format, conversation formats and
few-shot prompts.

The code format is one class per image. The global caption is the class
docstring, the image size sits in `width`/`height`, and every concept group
is an attribute holding a mapping (one instance) or a list of mappings
(several instances). Only literals are allowed, which is what lets
parse_code be a total inverse of emit_code. The grammar is written down in
docs/code_grammar.md.
"""

import ast
import json
import keyword
import re
from collections.abc import Sequence
from typing import Any

from pydantic import ValidationError

from .errors import CodeSyntaxError, SanitizationCollapse, SchemaError
from .models import (
    AnnotationGroup,
    BoundingBox,
    CodeContent,
    CodeDocument,
    ConceptAnnotation,
    ImageRecord,
    W2CRecord,
)

CLASS_PREFIX = "Image_"
CONCEPT_NAMES_ATTR = "__concept_names__"
RESERVED_ATTRIBUTES = frozenset({"width", "height"})
INDENT = "    "

SHOT_DELIMITER = "\n\n###\n\n"
SINGLE_ROUND_INSTRUCTION = (
    "Describe the image, then every visual concept in it with its bounding box."
)
GLOBAL_ROUND_QUESTION = "Describe the image in one sentence."

_NON_IDENT_RE = re.compile(r"[^a-z0-9]+")
_CLASS_UNSAFE_RE = re.compile(r"[^A-Za-z0-9_]")
_ANNOTATION_KEYS = ("caption", "text", "bbox")


def sanitize_attribute(name: str) -> str:
    """
    snake_case identifier for a concept name.

    "traffic light" -> "traffic_light", "3d glasses" -> "_3d_glasses",
    "class" -> "class_". Collisions are handled by the caller.
    """
    ident = _NON_IDENT_RE.sub("_", name.lower()).strip("_")
    if not ident:
        raise SanitizationCollapse(f"concept name {name!r} has no identifier characters")
    if ident[0].isdigit():
        ident = "_" + ident
    if keyword.iskeyword(ident) or ident in RESERVED_ATTRIBUTES:
        ident += "_"
    return ident


def class_name_for(image_id: str) -> str:
    return CLASS_PREFIX + _CLASS_UNSAFE_RE.sub("_", image_id)


def _assign_attributes(groups: Sequence[AnnotationGroup]) -> list[str]:
    used: set[str] = set()
    names = []
    for group in groups:
        base = sanitize_attribute(group.name)
        ident, suffix = base, 2
        while ident in used:
            ident = f"{base}_{suffix}"
            suffix += 1
        used.add(ident)
        names.append(ident)
    return names


def _literal(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def _annotation_literal(annotation: ConceptAnnotation) -> str:
    parts = [f'"caption": {_literal(annotation.caption)}']
    if annotation.text is not None:
        parts.append(f'"text": {_literal(annotation.text)}')
    parts.append(f'"bbox": [{", ".join(str(v) for v in annotation.box.as_list())}]')
    return "{" + ", ".join(parts) + "}"


def emit_code(record: W2CRecord) -> CodeDocument:
    """
    Serialize a record into the code format.

    Args:
        record: A record that passed validate_record

    Returns:
        CodeDocument: The code text and the content it encodes
    """
    attributes = _assign_attributes(record.groups)
    structure = CodeContent(
        class_name=class_name_for(record.image.id),
        global_caption=record.global_caption,
        width=record.image.width,
        height=record.image.height,
        groups=record.groups,
    )

    lines = [
        f"class {structure.class_name}:",
        f"{INDENT}{_literal(record.global_caption)}",
        "",
        f"{INDENT}width = {record.image.width}",
        f"{INDENT}height = {record.image.height}",
    ]
    renamed = {
        attr: group.name
        for attr, group in zip(attributes, record.groups)
        if attr.replace("_", " ") != group.name
    }
    if renamed:
        mapping = ", ".join(f"{_literal(k)}: {_literal(v)}" for k, v in renamed.items())
        lines.append(f"{INDENT}{CONCEPT_NAMES_ATTR} = {{{mapping}}}")

    for attr, group in zip(attributes, record.groups):
        if len(group.annotations) == 1:
            lines.append(f"{INDENT}{attr} = {_annotation_literal(group.annotations[0])}")
            continue
        lines.append(f"{INDENT}{attr} = [")
        for annotation in group.annotations:
            lines.append(f"{INDENT * 2}{_annotation_literal(annotation)},")
        lines.append(f"{INDENT}]")
    return CodeDocument(text="\n".join(lines) + "\n", structure=structure)


def _plain_literal(node: ast.expr, where: str) -> Any:
    """Evaluate a node made only of str/int constants, lists and str-keyed dicts."""
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (str, int)):
            raise SchemaError(f"{where}: only string and integer constants are allowed")
        return node.value
    if isinstance(node, ast.List):
        return [_plain_literal(item, where) for item in node.elts]
    if isinstance(node, ast.Dict):
        result = {}
        for key, value in zip(node.keys, node.values):
            if not (isinstance(key, ast.Constant) and isinstance(key.value, str)):
                raise SchemaError(f"{where}: mapping keys must be strings")
            if key.value in result:
                raise SchemaError(f"{where}: duplicate key {key.value!r}")
            result[key.value] = _plain_literal(value, where)
        return result
    raise SchemaError(
        f"{where}: {type(node).__name__} at line {node.lineno} is not a literal"
    )


def _int_attribute(value: Any, name: str) -> int:
    if not isinstance(value, int) or value <= 0:
        raise SchemaError(f"{name} must be a positive integer")
    return value


def _annotation_from(value: Any, name: str, where: str) -> ConceptAnnotation:
    if not isinstance(value, dict):
        raise SchemaError(f"{where}: annotation must be a mapping")
    unknown = set(value) - set(_ANNOTATION_KEYS)
    if unknown:
        raise SchemaError(f"{where}: unknown annotation keys {sorted(unknown)}")
    if "caption" not in value or "bbox" not in value:
        raise SchemaError(f"{where}: annotation needs caption and bbox")
    bbox = value["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4 or not all(isinstance(v, int) for v in bbox):
        raise SchemaError(f"{where}: bbox must be four integers")
    if not isinstance(value["caption"], str) or not isinstance(value.get("text", ""), str):
        raise SchemaError(f"{where}: caption and text must be strings")
    try:
        return ConceptAnnotation(
            name=name,
            caption=value["caption"],
            text=value.get("text"),
            box=BoundingBox.from_list(bbox),
        )
    except ValidationError as e:
        raise SchemaError(f"{where}: {e.errors()[0]['msg']}") from e


def parse_code(text: str) -> CodeContent:
    """
    Parse code-format text back into its content.

    Raises:
        CodeSyntaxError: The text is not valid Python
        SchemaError: Valid Python outside the record grammar
    """
    try:
        module = ast.parse(text)
    except SyntaxError as e:
        raise CodeSyntaxError(e.msg, e.lineno, e.offset) from e

    if len(module.body) != 1 or not isinstance(module.body[0], ast.ClassDef):
        raise SchemaError("code must hold exactly one class definition")
    cls = module.body[0]
    if cls.bases or cls.keywords or cls.decorator_list:
        raise SchemaError("record class takes no bases or decorators")
    if not cls.name.startswith(CLASS_PREFIX):
        raise SchemaError(f"class name {cls.name!r} lacks the {CLASS_PREFIX} prefix")

    first = cls.body[0]
    if not (
        isinstance(first, ast.Expr)
        and isinstance(first.value, ast.Constant)
        and isinstance(first.value.value, str)
    ):
        raise SchemaError("record class must start with its caption docstring")

    attributes: dict[str, Any] = {}
    for stmt in cls.body[1:]:
        if not (
            isinstance(stmt, ast.Assign)
            and len(stmt.targets) == 1
            and isinstance(stmt.targets[0], ast.Name)
        ):
            raise SchemaError(f"line {stmt.lineno}: only simple assignments are allowed")
        attr = stmt.targets[0].id
        if attr in attributes:
            raise SchemaError(f"line {stmt.lineno}: {attr} assigned twice")
        attributes[attr] = _plain_literal(stmt.value, f"line {stmt.lineno}")

    if "width" not in attributes or "height" not in attributes:
        raise SchemaError("record class needs width and height")
    width = _int_attribute(attributes.pop("width"), "width")
    height = _int_attribute(attributes.pop("height"), "height")
    names = attributes.pop(CONCEPT_NAMES_ATTR, {})
    if not isinstance(names, dict) or not all(isinstance(v, str) for v in names.values()):
        raise SchemaError(f"{CONCEPT_NAMES_ATTR} must map attributes to names")

    groups = []
    for attr, value in attributes.items():
        name = names.get(attr, attr.replace("_", " "))
        items = value if isinstance(value, list) else [value]
        if not items:
            raise SchemaError(f"{attr}: empty concept group")
        annotations = [_annotation_from(item, name, attr) for item in items]
        groups.append(AnnotationGroup(name=name, annotations=annotations))

    return CodeContent(
        class_name=cls.name,
        global_caption=first.value.value,
        width=width,
        height=height,
        groups=groups,
    )


def build_record(
    image: ImageRecord, global_caption: str, groups: list[AnnotationGroup]
) -> W2CRecord:
    """Assemble a record and attach its code text."""
    draft = W2CRecord(image=image, global_caption=global_caption, groups=groups, code="")
    return draft.model_copy(update={"code": emit_code(draft).text})


def record_to_json(record: W2CRecord) -> dict[str, Any]:
    """JSONL row for a record; key order is fixed."""
    groups = []
    for group in record.groups:
        items = []
        for annotation in group.annotations:
            item: dict[str, Any] = {"caption": annotation.caption}
            if annotation.text is not None:
                item["text"] = annotation.text
            item["bbox"] = annotation.box.as_list()
            items.append(item)
        groups.append({"name": group.name, "items": items})
    return {
        "id": record.image.id,
        "global_caption": record.global_caption,
        "groups": groups,
        "code": record.code,
    }


def record_from_json(row: dict[str, Any]) -> W2CRecord:
    """
    Rebuild a record from its JSONL row.

    The image size comes from the code's width/height; the file path is not
    part of the row and comes back as None.
    """
    content = parse_code(row["code"])
    groups = [
        AnnotationGroup(
            name=group["name"],
            annotations=[
                ConceptAnnotation(
                    name=group["name"],
                    caption=item["caption"],
                    text=item.get("text"),
                    box=BoundingBox.from_list(item["bbox"]),
                )
                for item in group["items"]
            ],
        )
        for group in row["groups"]
    ]
    return W2CRecord(
        image=ImageRecord(id=row["id"], width=content.width, height=content.height),
        global_caption=row["global_caption"],
        groups=groups,
        code=row["code"],
    )


def _describe(annotation: ConceptAnnotation) -> str:
    line = f"{annotation.name}: {annotation.caption} {annotation.box.as_list()}"
    if annotation.text is not None:
        line += f" Text: {annotation.text}"
    return line


def _turn(speaker: str, value: str) -> dict[str, str]:
    return {"from": speaker, "value": value}


def emit_single_round(record: W2CRecord) -> dict[str, Any]:
    """One instruction, one answer with the caption and every annotation."""
    lines = [record.global_caption]
    for group in record.groups:
        lines.extend(_describe(a) for a in group.annotations)
    return {
        "conversations": [
            _turn("human", f"<image>\n{SINGLE_ROUND_INSTRUCTION}"),
            _turn("gpt", "\n".join(lines)),
        ]
    }


def emit_multi_round(record: W2CRecord) -> dict[str, Any]:
    """A global-caption round followed by one round per concept group."""
    turns = [
        _turn("human", f"<image>\n{GLOBAL_ROUND_QUESTION}"),
        _turn("gpt", record.global_caption),
    ]
    for group in record.groups:
        turns.append(_turn("human", f"Describe every {group.name} in the image."))
        turns.append(_turn("gpt", "\n".join(_describe(a) for a in group.annotations)))
    return {"conversations": turns}


def build_few_shot_prompt(
    shots: Sequence[tuple[str, str, str]], query: tuple[str, str]
) -> str:
    """
    Few-shot prompt of (description, question, answer) shots plus a query.

    The description can be a detail caption or a record's code text; the
    query ends on an empty answer slot.
    """
    if not shots:
        raise ValueError("few-shot prompt needs at least one shot")
    blocks = [
        f"Description:\n{description}\nQuestion: {question}\nAnswer: {answer}"
        for description, question, answer in shots
    ]
    description, question = query
    blocks.append(f"Description:\n{description}\nQuestion: {question}\nAnswer:")
    return SHOT_DELIMITER.join(blocks)
