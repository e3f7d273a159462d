"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation errors exit 2, backend
errors exit 3, numeric errors exit 4.
"""


class ContrastRecError(Exception):
    """Base class for all package errors."""


class ValidationError(ContrastRecError):
    """An input violates a documented contract."""


class BackendError(ContrastRecError):
    """A text-generation backend failed permanently.

    Carries the prompt fingerprint (when known) so a failed record can be
    located in the cache and retried on resume.
    """

    def __init__(self, message: str, fingerprint: str | None = None):
        super().__init__(message)
        self.fingerprint = fingerprint


class NumericError(ContrastRecError):
    """A computation produced non-finite values; message names the stage."""
