"""Exception hierarchy shared by both services, the HTTP layer and the CLI.

Every service-level error carries a ``code`` from the closed set that goes
over the wire in an ``ErrorResponse``.
"""

from __future__ import annotations

from typing import Any


class SBAError(Exception):
    code = "internal"

    def __init__(self, message: str = "", **detail: Any) -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail


class Unauthorized(SBAError):
    code = "unauthorized"


class NotRegistered(SBAError):
    code = "not_registered"


class ValidationFailed(SBAError):
    code = "validation_failed"

    def __init__(self, check: str, message: str = "", **detail: Any) -> None:
        super().__init__(message or f"validation failed: {check}", check=check, **detail)
        self.check = check


class NotFound(SBAError):
    code = "not_found"


class IntegrityViolation(SBAError):
    code = "integrity_violation"


class RemoteUnreachable(SBAError):
    code = "remote_unreachable"


class StorageError(SBAError):
    code = "internal"


ERROR_CLASSES: dict[str, type[SBAError]] = {
    cls.code: cls
    for cls in (Unauthorized, NotRegistered, ValidationFailed, NotFound, IntegrityViolation, RemoteUnreachable)
}
ERROR_CLASSES["internal"] = SBAError


def error_from_code(code: str, message: str, detail: dict[str, Any] | None = None) -> SBAError:
    """Rebuild a typed exception from a wire ``ErrorResponse``."""
    detail = dict(detail or {})
    cls = ERROR_CLASSES.get(code, SBAError)
    if cls is ValidationFailed:
        check = detail.pop("check", "unknown")
        return ValidationFailed(check, message, **detail)
    return cls(message, **detail)


# Codec-level errors. These are ValueErrors: they describe malformed bytes or
# caller bugs, not protocol outcomes.


class MalformedInput(ValueError):
    """An argument violates a fixed-width precondition."""


class BlobFormatError(ValueError):
    pass


class WrongFormat(BlobFormatError):
    pass


class Truncated(BlobFormatError):
    pass


class UnsupportedVersion(BlobFormatError):
    pass


class FormatCapacity(BlobFormatError):
    pass
