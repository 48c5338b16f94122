"""
Exception hierarchy for NIFT.

Library code raises the subclass matching its module; the CLI maps any
NiftError to exit code 1.
"""
from typing import Any, Optional


class NiftError(RuntimeError):
    pass


class ConfigError(NiftError):
    pass


class GeometryError(NiftError):
    pass


class ScfError(NiftError):
    pass


class IbsError(NiftError):
    pass


class FieldError(NiftError):
    pass


class FieldTrainingError(FieldError):
    """Training diverged. `checkpoint` holds the last weights with a finite loss."""

    def __init__(self, message: str, checkpoint: Optional[Any] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class TemplateError(NiftError):
    pass


class FingerprintMismatchError(TemplateError):
    def __init__(self, expected: str, actual: str):
        super().__init__(
            f"field fingerprint mismatch: template was built with '{expected}', "
            f"target field is '{actual}'"
        )
        self.expected = expected
        self.actual = actual


class ImitationError(NiftError):
    pass


class HarnessError(NiftError):
    pass
