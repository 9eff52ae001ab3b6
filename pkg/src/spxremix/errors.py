"""Exception hierarchy shared by all modules."""


class SpxError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class FormatError(SpxError):
    pass


class UnsupportedCodecError(SpxError):
    pass


class PreconditionError(SpxError, ValueError):
    pass


class ShapeError(PreconditionError):
    pass


class ConfigurationError(PreconditionError):
    """Bad or incomplete configuration; the CLI treats it as a usage error."""

    exit_code = 1


class InvalidReferenceError(PreconditionError):
    pass


class InvalidInputError(PreconditionError):
    pass


class TooShortError(PreconditionError):
    pass


class NumericalError(SpxError):
    exit_code = 3


class CheckpointError(SpxError):
    pass
