"""Seed block math and the backup blob wire format.

Everything here is pure: no I/O, no shared state. The seed block is the
per-client 16-byte XOR of a random registration nonce and the client id;
backups are the file XORed with that seed repeated cyclically.

Tiled XOR is length-preserving and self-inverse, which is what makes
recovery exact. It is *not* confidentiality: XORing zeros exposes the
seed directly (see ``xor_tile(bytes(16 * k), seed) == seed * k``).
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass

from .errors import FormatCapacity, MalformedInput, Truncated, UnsupportedVersion, WrongFormat

SEED_SIZE = 16
DIGEST_SIZE = 32

MAGIC = b"SBA1"
VERSION = 1

# magic, version, client_id, file_id_len
_HEAD = struct.Struct(">4sB16sB")
# original_length, original_digest
_TAIL = struct.Struct(">Q32s")
MIN_BLOB_SIZE = _HEAD.size + 1 + _TAIL.size  # 63: one-byte file id, empty payload


def _check_width(name: str, value: bytes, width: int = SEED_SIZE) -> bytes:
    if not isinstance(value, (bytes, bytearray, memoryview)):
        raise MalformedInput(f"{name} must be bytes, got {type(value).__name__}")
    value = bytes(value)
    if len(value) != width:
        raise MalformedInput(f"{name} must be exactly {width} bytes, got {len(value)}")
    return value


def new_client_id() -> bytes:
    return secrets.token_bytes(SEED_SIZE)


def new_nonce() -> bytes:
    return secrets.token_bytes(SEED_SIZE)


def derive_seed(nonce: bytes, client_id: bytes) -> bytes:
    """Return the seed block ``nonce XOR client_id``.

    Because XOR cancels, ``derive_seed(derive_seed(r, cid), cid) == r``.
    """
    nonce = _check_width("nonce", nonce)
    client_id = _check_width("client_id", client_id)
    return (int.from_bytes(nonce, "big") ^ int.from_bytes(client_id, "big")).to_bytes(SEED_SIZE, "big")


def xor_tile(data: bytes, seed: bytes) -> bytes:
    """XOR ``data`` with ``seed`` repeated cyclically: ``out[i] = data[i] ^ seed[i % 16]``."""
    seed = _check_width("seed", seed)
    n = len(data)
    if n == 0:
        return b""
    reps, rem = divmod(n, SEED_SIZE)
    keystream = seed * reps + seed[:rem]
    # Big-int XOR keeps this linear-time without a per-byte Python loop.
    return (int.from_bytes(data, "big") ^ int.from_bytes(keystream, "big")).to_bytes(n, "big")


def recover_bytes(encoded: bytes, seed: bytes) -> bytes:
    """Decode a backup payload. Identical to :func:`xor_tile`; named for call-site intent."""
    return xor_tile(encoded, seed)


def compute_digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class BackupBlob:
    client_id: bytes
    file_id: str
    original_length: int
    original_digest: bytes
    payload: bytes
    version: int = VERSION

    @classmethod
    def encode(cls, client_id: bytes, file_id: str, content: bytes, seed: bytes) -> BackupBlob:
        """Build the blob for ``content``: payload is the seed-tiled XOR of it."""
        return cls(
            client_id=bytes(client_id),
            file_id=file_id,
            original_length=len(content),
            original_digest=compute_digest(content),
            payload=xor_tile(content, seed),
        )

    def decode(self, seed: bytes) -> bytes:
        return recover_bytes(self.payload, seed)


def serialize_blob(blob: BackupBlob) -> bytes:
    client_id = _check_width("client_id", blob.client_id)
    digest = _check_width("original_digest", blob.original_digest, DIGEST_SIZE)
    fid = blob.file_id.encode("utf-8")
    if len(fid) > 255:
        raise FormatCapacity(f"file_id is {len(fid)} bytes; the format holds at most 255")
    if len(blob.payload) != blob.original_length:
        raise MalformedInput(
            f"payload length {len(blob.payload)} does not match original_length {blob.original_length}"
        )
    return b"".join(
        (
            _HEAD.pack(MAGIC, blob.version, client_id, len(fid)),
            fid,
            _TAIL.pack(blob.original_length, digest),
            blob.payload,
        )
    )


def parse_blob(data: bytes) -> BackupBlob:
    """Parse a serialized blob. Raises a :class:`BlobFormatError` subclass on any defect."""
    data = bytes(data)
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data):
            raise Truncated(f"blob truncated at {len(data)} bytes (inside magic)")
        raise WrongFormat("not a backup blob (bad magic)")
    if data[:4] != MAGIC:
        raise WrongFormat("not a backup blob (bad magic)")
    if len(data) < _HEAD.size:
        raise Truncated(f"blob truncated at {len(data)} bytes (inside header)")
    _, version, client_id, fid_len = _HEAD.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported blob version {version}")
    pos = _HEAD.size
    if len(data) < pos + fid_len + _TAIL.size:
        raise Truncated(f"blob truncated at {len(data)} bytes (inside header)")
    try:
        file_id = data[pos : pos + fid_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WrongFormat("file_id is not valid UTF-8") from exc
    pos += fid_len
    length, digest = _TAIL.unpack_from(data, pos)
    pos += _TAIL.size
    payload = data[pos:]
    if len(payload) < length:
        raise Truncated(f"payload truncated: {len(payload)} of {length} bytes")
    if len(payload) > length:
        raise WrongFormat(f"{len(payload) - length} trailing bytes after payload")
    return BackupBlob(client_id, file_id, length, digest, payload, version)


_FORBIDDEN_IN_FILE_ID = ("/", "\x00")


def check_file_id(file_id: object) -> str:
    """Return ``file_id`` if it is a legal file name, else raise ``ValueError``.

    Legal: a str whose UTF-8 encoding is 1-255 bytes with no '/' and no NUL.
    """
    if not isinstance(file_id, str):
        raise ValueError("file_id must be a string")
    try:
        raw = file_id.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ValueError("file_id is not encodable as UTF-8") from exc
    if not 1 <= len(raw) <= 255:
        raise ValueError(f"file_id must be 1-255 UTF-8 bytes, got {len(raw)}")
    for ch in _FORBIDDEN_IN_FILE_ID:
        if ch in file_id:
            raise ValueError(f"file_id must not contain {ch!r}")
    return file_id
