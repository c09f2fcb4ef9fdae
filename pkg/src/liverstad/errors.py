"""Exception hierarchy shared by every module."""


class LiverStadError(Exception):
    """Base class for all package errors."""


class ValidationError(LiverStadError, ValueError):
    """Malformed input data, manifest, config, or model file."""


class ContractError(LiverStadError, ValueError):
    """A function precondition was violated by the caller."""


class DegenerateInputError(LiverStadError, ValueError):
    """Input is well formed but too small or empty for the computation."""


class NiftiFormatError(LiverStadError):
    """Not a single-file NIfTI-1 image."""


class UnsupportedDatatypeError(NiftiFormatError):
    pass


class CorruptFileError(NiftiFormatError):
    """Header parsed but the payload is truncated or inconsistent."""


class InvalidTransformError(ContractError):
    pass


class InsufficientOverlapError(LiverStadError):
    """Fewer than two valid samples overlap between fixed and moving images."""


class OptimizerError(LiverStadError):
    """Registration produced a non-finite metric value."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


class UndefinedMetricError(LiverStadError, ValueError):
    pass


class TrainingError(LiverStadError):
    pass


class ConfigurationError(LiverStadError, ValueError):
    pass
