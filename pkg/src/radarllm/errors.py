"""Exception hierarchy shared by every stage of the pipeline."""


class RadarLLMError(Exception):
    """Base class for all package errors."""


class ValidationError(RadarLLMError, ValueError):
    """An argument or configuration value violates its contract."""


class EmptyInputError(ValidationError):
    """An operation received no data (or too little) to work on."""


class DegenerateInputError(ValidationError):
    """The input is well-formed but mathematically degenerate (e.g. all-zero spectrum)."""


class NumericError(RadarLLMError, ArithmeticError):
    """A non-finite value appeared in a loss, gradient or parameter."""


class DatasetFileError(RadarLLMError, ValueError):
    """Base class for binary dataset file problems."""


class FormatError(DatasetFileError):
    """Magic number mismatch: the file is not a dataset file."""


class VersionError(DatasetFileError):
    """The file was written with an unsupported format version."""


class TruncatedFileError(DatasetFileError):
    """The file ends before the header-declared payload."""


class ArtifactMismatchError(RadarLLMError):
    """A chained artifact is missing or was produced under a different configuration."""
