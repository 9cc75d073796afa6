"""Whole-record invariant checks."""

from .codegen import emit_code, parse_code
from .errors import CodegenError
from .models import W2CRecord


def validate_record(record: W2CRecord) -> list[str]:
    """
    List every invariant a record violates.

    Checks boxes against the image, blank captions and texts, group name
    uniqueness and shape, and that the code text parses back to the record.
    Records built through the pydantic constructors already satisfy the
    per-value rules; this also catches records assembled with model_construct
    or loaded from foreign files.

    Returns:
        list[str]: Human-readable violations, empty when the record is valid
    """
    violations: list[str] = []
    image = record.image
    if not record.global_caption.strip():
        violations.append("global caption is blank")

    seen: set[str] = set()
    for group in record.groups:
        if group.name in seen:
            violations.append(f"duplicate group name {group.name!r}")
        seen.add(group.name)
        if not group.annotations:
            violations.append(f"group {group.name!r} is empty")
        for annotation in group.annotations:
            where = f"{group.name!r}"
            if annotation.name != group.name:
                violations.append(f"annotation {annotation.name!r} filed under {where}")
            box = annotation.box
            if box.x1 >= box.x2 or box.y1 >= box.y2 or min(box.as_list()) < 0:
                violations.append(f"degenerate box {box.as_list()} in {where}")
            elif not box.fits(image.width, image.height):
                violations.append(
                    f"box {box.as_list()} in {where} outside "
                    f"{image.width}x{image.height} image"
                )
            if not annotation.caption.strip():
                violations.append(f"blank caption in {where}")
            if annotation.text is not None and not annotation.text.strip():
                violations.append(f"blank text in {where}")

    if violations:
        return violations

    try:
        expected = emit_code(record).structure
        parsed = parse_code(record.code)
    except CodegenError as e:
        return [f"code does not parse: {e}"]
    if parsed != expected:
        violations.append("code/structure mismatch")
    return violations
