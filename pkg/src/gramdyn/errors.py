"""Exception taxonomy shared by all gramdyn modules."""


class GramdynError(Exception):
    """Base class for all errors raised by this package."""


class NotFound(GramdynError):
    """A required file or directory does not exist."""


class FormatError(GramdynError):
    """A binary blob has a bad magic number or unsupported version."""


class SchemaError(GramdynError):
    """Tensor dimensions or metadata contradict the declared schema."""


class IoError(GramdynError):
    """A path could not be read or written."""


class ValidationError(GramdynError):
    """An input violates a documented precondition."""


class NumericalError(GramdynError):
    """Non-finite values or a degenerate numerical configuration."""


class ContractViolation(GramdynError):
    """An operation was called outside its stated contract."""


class DegenerateAttention(GramdynError):
    """Every key of an attention row was suppressed."""


class DegenerateRefinement(UserWarning):
    """Refinement produced no signal; the initial mask was kept."""


class SuppressionSkipped(UserWarning):
    """A fully-masked (layer, frame) plane was left unsuppressed."""
