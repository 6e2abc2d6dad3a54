"""Error taxonomy shared by the library, service, and CLI.

The three leaf categories map onto the CLI exit codes: validation errors
exit 1, I/O and format errors exit 2, numerical failures exit 3.
"""


class IsoodError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ValidationError(IsoodError):
    """Invariant violation or malformed request input."""

    exit_code = 1


class StoreIOError(IsoodError):
    """File missing, unreadable, or not in the expected on-disk format."""

    exit_code = 2


class BadMagicError(StoreIOError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(StoreIOError):
    """File carries an unsupported format version."""


class TruncatedPayloadError(StoreIOError):
    """Payload byte count disagrees with the header's dim and count."""


class MetadataMismatchError(StoreIOError):
    """Metadata sidecar disagrees with the binary payload."""


class NumericalError(IsoodError):
    """Non-finite values or a failed numerical procedure."""

    exit_code = 3
