"""Exception hierarchy for the annotation pipeline."""


class W2CError(Exception):
    """Base class for every pipeline error."""


class BackendError(W2CError):
    """A model service call failed."""


class TransportError(BackendError):
    """The service could not be reached after all retries."""


class ReplayMiss(BackendError):
    """The replay file holds no response for a request key."""

    def __init__(self, key: str):
        super().__init__(f"no replay entry for request key {key}")
        self.key = key


class ContractError(BackendError):
    """The service answered with something outside the wire contract."""


class ImageUnavailable(W2CError):
    """The image file behind an ImageRecord cannot be read."""


class EmptyGeneration(W2CError):
    """A backend returned only blank candidates."""


class EmptyInput(W2CError, ValueError):
    """An operation that needs at least one element got none."""


class MissingVerdict(W2CError, KeyError):
    """A sub-concept has no validation verdict."""


class CodegenError(W2CError):
    """Base class for code-format emission and parsing errors."""


class SanitizationCollapse(CodegenError):
    """A name sanitizes to an empty identifier."""


class CodeSyntaxError(CodegenError):
    """Code text is not valid Python syntax."""

    def __init__(self, message: str, lineno: int | None, col_offset: int | None):
        super().__init__(f"{message} (line {lineno}, column {col_offset})")
        self.lineno = lineno
        self.col_offset = col_offset


class SchemaError(CodegenError):
    """Code text parses but does not have the record shape."""


class ConfigMismatch(W2CError):
    """A resumed run was started with a different configuration."""


class ManifestError(W2CError):
    """The manifest is unreadable, malformed or repeats an image id."""
