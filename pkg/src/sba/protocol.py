"""Wire protocol shared by the main cloud, the remote server and clients.

Metadata travels as JSON, file and blob bodies as raw bytes. Uploads carry
their declared length and SHA-256 in headers so the server can validate
before anything is written.
"""

from __future__ import annotations

import enum
import hmac
import secrets
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Mapping, Optional

from pydantic import BaseModel, Field

from .codec import check_file_id, compute_digest
from .errors import Unauthorized, ValidationFailed
from .storage import ClientRecord, FileRecord

API_PREFIX = "/v1"

HEADER_AUTH = "Authorization"
HEADER_LENGTH = "X-Content-Length"
HEADER_DIGEST = "X-Content-SHA256"

TOKEN_BYTES = 32


class ErrorCode(str, enum.Enum):
    UNAUTHORIZED = "unauthorized"
    NOT_REGISTERED = "not_registered"
    VALIDATION_FAILED = "validation_failed"
    NOT_FOUND = "not_found"
    INTEGRITY_VIOLATION = "integrity_violation"
    REMOTE_UNREACHABLE = "remote_unreachable"
    INTERNAL = "internal"


HTTP_STATUS: dict[ErrorCode, int] = {
    ErrorCode.UNAUTHORIZED: 401,
    ErrorCode.NOT_REGISTERED: 403,
    ErrorCode.VALIDATION_FAILED: 400,
    ErrorCode.NOT_FOUND: 404,
    ErrorCode.INTEGRITY_VIOLATION: 409,
    ErrorCode.REMOTE_UNREACHABLE: 503,
    ErrorCode.INTERNAL: 500,
}

# CLI exit codes. 1 is reserved for internal errors, 7 for drill infrastructure.
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CODES: dict[ErrorCode, int] = {
    ErrorCode.UNAUTHORIZED: 2,
    ErrorCode.NOT_REGISTERED: 2,
    ErrorCode.VALIDATION_FAILED: 3,
    ErrorCode.REMOTE_UNREACHABLE: 4,
    ErrorCode.INTEGRITY_VIOLATION: 5,
    ErrorCode.NOT_FOUND: 6,
    ErrorCode.INTERNAL: EXIT_INTERNAL,
}
EXIT_INFRA = 7


class ErrorResponse(BaseModel):
    code: ErrorCode
    message: str
    detail: dict[str, Any] = Field(default_factory=dict)


class RegisterResponse(BaseModel):
    client_id: str
    token: str


class FileRecordModel(BaseModel):
    client_id: str
    file_id: str
    length: int
    digest: str
    updated_at: datetime
    status: str

    @classmethod
    def from_record(cls, rec: FileRecord) -> FileRecordModel:
        return cls(
            client_id=rec.client_id.hex(),
            file_id=rec.file_id,
            length=rec.length,
            digest=rec.digest.hex(),
            updated_at=rec.updated_at,
            status=rec.status.value,
        )


class VerifyEntry(BaseModel):
    client_id: str
    file_id: str
    status: str


class MirrorProblem(BaseModel):
    client_id: str
    file_id: Optional[str] = None
    problem: str


class VerifyResponse(BaseModel):
    files: list[VerifyEntry]
    mirror_checked: bool = False
    mirror_problems: list[MirrorProblem] = Field(default_factory=list)


class RecoveryVerdict(BaseModel):
    client_id: str
    file_id: str
    prior_status: str
    outcome: str  # "restored" or an ErrorCode value
    message: str = ""


class RecoverAllResponse(BaseModel):
    results: list[RecoveryVerdict]

    @property
    def failed(self) -> list[RecoveryVerdict]:
        return [r for r in self.results if r.outcome != "restored"]


class SeedBody(BaseModel):
    seed: str = Field(..., min_length=32, max_length=32, pattern="^[0-9a-f]{32}$")


class SeedResponse(BaseModel):
    client_id: str
    seed: str


class BlobListEntry(BaseModel):
    file_id: str
    original_length: int
    original_digest: str


class HealthResponse(BaseModel):
    status: str
    role: str
    remote: Optional[str] = None
    pending_intents: int = 0


# -- tokens ------------------------------------------------------------


def new_token() -> str:
    return secrets.token_hex(TOKEN_BYTES)


def hash_token(token: str) -> bytes:
    """Digest of the raw token bytes. Only this is persisted."""
    try:
        raw = bytes.fromhex(token)
    except ValueError:
        raw = token.encode("utf-8")
    return compute_digest(raw)


def bearer_token(headers: Mapping[str, str]) -> Optional[str]:
    value = None
    for name, v in headers.items():
        if name.lower() == HEADER_AUTH.lower():
            value = v
            break
    if not value:
        return None
    scheme, _, token = value.partition(" ")
    if scheme.lower() != "bearer" or not token.strip():
        return None
    return token.strip()


def authenticate(headers: Mapping[str, str], clients: list[ClientRecord]) -> bytes:
    """Return the client id whose stored token digest matches the presented bearer token."""
    token = bearer_token(headers)
    if token is None:
        raise Unauthorized("missing bearer token")
    presented = hash_token(token)
    found = None
    # Compare against every record so timing does not reveal where a match sits.
    for rec in clients:
        if rec.auth_token_hash is not None and hmac.compare_digest(rec.auth_token_hash, presented):
            found = rec.client_id
    if found is None:
        raise Unauthorized("unknown token")
    return found


def secret_matches(headers: Mapping[str, str], secret: str) -> bool:
    token = bearer_token(headers)
    return token is not None and hmac.compare_digest(token.encode("utf-8"), secret.encode("utf-8"))


# -- uploads -----------------------------------------------------------


@dataclass
class UploadRequest:
    client_id: bytes
    file_id: str
    content_length: Optional[int]
    content_digest: Optional[bytes]
    body: bytes

    @classmethod
    def from_headers(cls, client_id: bytes, file_id: str, headers: Mapping[str, str], body: bytes) -> UploadRequest:
        lower = {k.lower(): v for k, v in headers.items()}
        length_text = lower.get(HEADER_LENGTH.lower())
        digest_text = lower.get(HEADER_DIGEST.lower())
        try:
            length = int(length_text) if length_text is not None else None
        except ValueError:
            raise ValidationFailed("length", f"{HEADER_LENGTH} is not an integer") from None
        try:
            digest = bytes.fromhex(digest_text) if digest_text is not None else None
        except ValueError:
            raise ValidationFailed("digest", f"{HEADER_DIGEST} is not hex") from None
        return cls(client_id, file_id, length, digest, body)


def validate_upload(req: UploadRequest) -> None:
    """Check file_id, declared length and declared digest, in that order."""
    try:
        check_file_id(req.file_id)
    except ValueError as exc:
        raise ValidationFailed("file_id", str(exc)) from None
    if req.content_length is None or req.content_length != len(req.body):
        raise ValidationFailed("length", f"declared length {req.content_length} but body has {len(req.body)} bytes")
    if req.content_digest is None or not hmac.compare_digest(req.content_digest, compute_digest(req.body)):
        raise ValidationFailed("digest", "declared digest does not match body")


def upload_headers(body: bytes) -> dict[str, str]:
    return {HEADER_LENGTH: str(len(body)), HEADER_DIGEST: compute_digest(body).hex()}


def parse_client_id(text: str) -> bytes:
    try:
        cid = bytes.fromhex(text)
    except ValueError:
        raise ValidationFailed("client_id", "client id must be 32 hex digits") from None
    if len(cid) != 16:
        raise ValidationFailed("client_id", "client id must be 32 hex digits")
    return cid
