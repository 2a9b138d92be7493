from __future__ import annotations


class AlignerError(ValueError):
    """Base class for every error raised by duration_aligner."""


class ConfigurationError(AlignerError):
    pass


class FormatError(AlignerError):
    """A file or serialized payload does not follow its declared layout."""


class UnsupportedCodecError(FormatError, NotImplementedError):
    pass


class ShapeError(AlignerError):
    pass


class ContractError(AlignerError):
    """An operation was called with inputs violating its preconditions."""


class InfeasibleAlignmentError(AlignerError):
    def __init__(self, required: int, available: int) -> None:
        self.required = required
        self.available = available
        super().__init__(
            f"CTC alignment needs at least {required} frames for this target, "
            f"but only {available} are available."
        )


class TrainingError(AlignerError):
    pass


class AlignmentError(AlignerError):
    pass


class EvaluationError(AlignerError):
    pass


class EmbeddingLookupError(ContractError, IndexError):
    """An embedding id lies outside its table."""
