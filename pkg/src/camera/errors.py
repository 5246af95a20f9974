"""Exception types raised across the package."""


class CameraError(Exception):
    """Base class for all package errors."""


class SingularKernel(CameraError):
    pass


class InsufficientData(CameraError):
    pass


class DuplicatePoint(CameraError):
    pass


class EmptyCandidateSet(CameraError):
    pass


class UnknownFidelity(CameraError):
    pass


class EmptySample(CameraError):
    pass


class NonFiniteWeight(CameraError):
    pass


class DomainViolation(CameraError):
    pass


class EvaluationError(CameraError):
    """An evaluator failed; carries the offending point."""

    def __init__(self, message, x=None, s=None):
        super().__init__(message)
        self.x = x
        self.s = s


class ConfigError(CameraError):
    """Invalid configuration; ``field`` is a dotted path to the bad entry."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DegenerateSamples(CameraError, UserWarning):
    """All samples coincide; a floored single-component mixture is returned."""


class EmptyFailureRegion(CameraError, UserWarning):
    """The surrogate predicts no failure anywhere in the pool."""


class ExternalModelError(EvaluationError):
    """An external simulator call failed; ``command`` is the rendered argv."""

    def __init__(self, message, command, x=None, s=None):
        super().__init__(f"{message} [command: {' '.join(command)}]", x, s)
        self.command = list(command)


class Timeout(ExternalModelError):
    pass


class NonZeroExit(ExternalModelError):
    def __init__(self, message, command, code, stderr="", x=None, s=None):
        super().__init__(message, command, x, s)
        self.code = code
        self.stderr = stderr


class ParseFailure(ExternalModelError):
    pass
