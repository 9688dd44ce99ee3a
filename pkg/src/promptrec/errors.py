"""Exception hierarchy.

``ValidationError`` subclasses map to CLI exit code 2, everything else
raised from :class:`PromptRecError` maps to exit code 1.
"""


class PromptRecError(Exception):
    pass


class ValidationError(PromptRecError):
    pass


class MissingField(ValidationError):
    def __init__(self, index: int, field: str):
        self.index = index
        self.field = field
        super().__init__(f"record {index}: missing field {field!r}")


class BadGeometry(ValidationError):
    def __init__(self, image_id: str, box):
        self.image_id = image_id
        self.box = box
        super().__init__(f"image {image_id!r}: degenerate box {box!r}")


class DuplicateId(ValidationError):
    def __init__(self, image_id: str):
        self.image_id = image_id
        super().__init__(f"duplicate id {image_id!r}")


class ConfigError(ValidationError):
    pass


class BadTemplate(ValidationError):
    def __init__(self, template: str):
        self.template = template
        super().__init__(f"template must contain exactly one '{{}}': {template!r}")


class MaskRequired(ValidationError):
    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"prompt kind {kind} needs a mask")


class BackendUnavailable(PromptRecError):
    def __init__(self, name: str, reason: str = ""):
        self.name = name
        msg = f"backend {name!r} unavailable"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class RenderFailure(PromptRecError):
    def __init__(self, proposal: int, kind, cause: Exception | None = None):
        self.proposal = proposal
        self.kind = kind
        super().__init__(f"render failed for proposal {proposal}, kind {kind}: {cause}")


class NonFiniteWeight(PromptRecError):
    def __init__(self, position: tuple[int, int]):
        self.position = position
        super().__init__(f"non-finite weight at {position}")


class NonFiniteScore(PromptRecError):
    pass


class MissingGroundTruth(PromptRecError):
    def __init__(self, entry_id: str):
        self.entry_id = entry_id
        super().__init__(f"no ground truth for entry {entry_id!r}")
