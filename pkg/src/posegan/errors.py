"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ValidationError``, its subclasses and
``InvalidArgument`` exit 3; everything else derived from ``PoseGanError``
exits 1.
"""


class PoseGanError(Exception):
    category = "runtime"


class InvalidArgument(PoseGanError, ValueError):
    category = "invalid-argument"


class ValidationError(PoseGanError):
    category = "validation"


class ManifestParseError(ValidationError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(ValidationError):
    category = "checkpoint"


class EmptyForegroundError(PoseGanError):
    category = "empty-foreground"


class NonFiniteLossError(PoseGanError):
    category = "non-finite-loss"

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
