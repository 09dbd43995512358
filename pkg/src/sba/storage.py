"""File-backed store used by both server roles.

Layout under a store root::

    manifest.json                    clients + file records, rewritten atomically
    blobs/<client_id_hex>/<escaped>  object bytes
    journal/<id>.json                redo record for an in-flight put
    audit.log                        seq<TAB>iso8601<TAB>actor<TAB>action<TAB>subject<TAB>outcome

Every replacement goes write-temp, fsync, rename, fsync-dir. A put is made
crash-safe by a redo journal written before the blob rename and removed
after the manifest rewrite; :class:`Store` replays leftover journals and
deletes stray temp files when it is opened.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Optional
from urllib.parse import unquote

from . import faults
from .codec import check_file_id, compute_digest
from .errors import IntegrityViolation, NotFound, NotRegistered, StorageError, ValidationFailed

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ROLES = ("main", "remote")
TMP_PREFIX = ".tmp-"

Key = tuple[bytes, str]


class Status(str, enum.Enum):
    PRESENT = "present"
    MISSING = "missing"
    CORRUPT = "corrupt"


class Action(str, enum.Enum):
    REGISTER = "register"
    PUT = "put"
    GET = "get"
    DELETE = "delete"
    RECOVER = "recover"
    VERIFY = "verify"


class Outcome(str, enum.Enum):
    OK = "ok"
    DENIED = "denied"
    ERROR = "error"


def utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_time(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def _hex(value: Optional[bytes]) -> Optional[str]:
    return None if value is None else value.hex()


def _unhex(value: Optional[str]) -> Optional[bytes]:
    return None if value is None else bytes.fromhex(value)


@dataclass
class ClientRecord:
    client_id: bytes
    registered_at: datetime
    nonce: Optional[bytes] = None  # main role only
    seed: Optional[bytes] = None  # remote role only
    auth_token_hash: Optional[bytes] = None

    def to_json(self) -> dict[str, Any]:
        return {
            "client_id": self.client_id.hex(),
            "registered_at": format_time(self.registered_at),
            "nonce": _hex(self.nonce),
            "seed": _hex(self.seed),
            "auth_token_hash": _hex(self.auth_token_hash),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> ClientRecord:
        return cls(
            client_id=bytes.fromhex(obj["client_id"]),
            registered_at=parse_time(obj["registered_at"]),
            nonce=_unhex(obj.get("nonce")),
            seed=_unhex(obj.get("seed")),
            auth_token_hash=_unhex(obj.get("auth_token_hash")),
        )


@dataclass
class FileRecord:
    client_id: bytes
    file_id: str
    length: int
    digest: bytes
    updated_at: datetime
    status: Status = Status.PRESENT
    meta: dict[str, Any] = field(default_factory=dict)
    rev: int = 0

    @property
    def key(self) -> Key:
        return (self.client_id, self.file_id)

    def to_json(self) -> dict[str, Any]:
        return {
            "client_id": self.client_id.hex(),
            "file_id": self.file_id,
            "length": self.length,
            "digest": self.digest.hex(),
            "updated_at": format_time(self.updated_at),
            "status": self.status.value,
            "meta": self.meta,
            "rev": self.rev,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> FileRecord:
        return cls(
            client_id=bytes.fromhex(obj["client_id"]),
            file_id=obj["file_id"],
            length=int(obj["length"]),
            digest=bytes.fromhex(obj["digest"]),
            updated_at=parse_time(obj["updated_at"]),
            status=Status(obj["status"]),
            meta=dict(obj.get("meta") or {}),
            rev=int(obj.get("rev", 0)),
        )


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: datetime
    actor: str
    action: Action
    subject: str
    outcome: Outcome

    def to_line(self) -> str:
        fields = (
            str(self.seq),
            format_time(self.timestamp),
            _audit_field(self.actor),
            self.action.value,
            _audit_field(self.subject),
            self.outcome.value,
        )
        return "\t".join(fields) + "\n"

    @classmethod
    def from_line(cls, line: str) -> AuditEntry:
        seq, ts, actor, action, subject, outcome = line.rstrip("\n").split("\t")
        return cls(int(seq), parse_time(ts), unquote(actor), Action(action), unquote(subject), Outcome(outcome))


def _audit_field(text: str) -> str:
    # Only these four are escaped, so urllib's unquote reverses it exactly.
    return text.replace("%", "%25").replace("\t", "%09").replace("\n", "%0A").replace("\r", "%0D") or "-"


_SAFE = frozenset(b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789._-")
_MAX_NAME = 200


def escape_file_id(file_id: str) -> str:
    """Percent-encode bytes outside ``[A-Za-z0-9._-]``.

    A leading '.' is also encoded so names never collide with temp files or
    '.'/'..'. Names too long for the filesystem fall back to ``~<sha256>``.
    """
    raw = file_id.encode("utf-8")
    name = "".join(chr(b) if b in _SAFE else f"%{b:02X}" for b in raw)
    if name.startswith("."):
        name = "%2E" + name[1:]
    if len(name) > _MAX_NAME:
        name = "~" + hashlib.sha256(raw).hexdigest()
    return name


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _write_durable(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())


def atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f"{TMP_PREFIX}{uuid.uuid4().hex}-{path.name}")
    try:
        _write_durable(tmp, data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    _fsync_dir(path.parent)


class Store:
    """Manifest, blob directory and audit log for one server role.

    Safe to share across threads. Manifest mutations and audit appends are
    each serialized by their own lock; blob bytes are read and written
    outside the manifest lock.
    """

    def __init__(self, root: str | os.PathLike[str], role: str, *, fault_hook: Optional[faults.FaultHook] = None):
        if role not in ROLES:
            raise ValueError(f"unknown store role {role!r}")
        self.root = Path(root)
        self.role = role
        self.hook = fault_hook or faults.noop
        self.blobs_dir = self.root / "blobs"
        self.journal_dir = self.root / "journal"
        self.manifest_path = self.root / "manifest.json"
        self.audit_path = self.root / "audit.log"
        self._lock = threading.RLock()
        self._audit_lock = threading.Lock()
        self._clients: dict[bytes, ClientRecord] = {}
        self._files: dict[Key, FileRecord] = {}
        self._rev = 0

        try:
            self.root.mkdir(parents=True, exist_ok=True)
            self.blobs_dir.mkdir(exist_ok=True)
            self.journal_dir.mkdir(exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create store at {self.root}: {exc}") from exc
        self._load_manifest()
        self._replay_journals()
        self._sweep_temp_files()
        self._next_seq = self._open_audit()

    # -- lifecycle -----------------------------------------------------

    def close(self) -> None:
        with self._audit_lock:
            if not self._audit_fh.closed:
                self._audit_fh.close()

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _load_manifest(self) -> None:
        if not self.manifest_path.exists():
            self._write_manifest()
            return
        try:
            doc = json.loads(self.manifest_path.read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise StorageError(f"unreadable manifest {self.manifest_path}: {exc}") from exc
        if doc.get("format_version") != FORMAT_VERSION:
            raise StorageError(f"unsupported manifest format_version {doc.get('format_version')!r}")
        if doc.get("role") != self.role:
            raise StorageError(f"{self.root} holds a {doc.get('role')!r} store, refusing to open it as {self.role!r}")
        for obj in doc.get("clients", []):
            rec = ClientRecord.from_json(obj)
            self._clients[rec.client_id] = rec
        for obj in doc.get("files", []):
            rec = FileRecord.from_json(obj)
            self._files[rec.key] = rec
            self._rev = max(self._rev, rec.rev)

    def _manifest_doc(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "role": self.role,
            "clients": [c.to_json() for _, c in sorted(self._clients.items())],
            "files": [f.to_json() for _, f in sorted(self._files.items())],
        }

    def _write_manifest(self) -> None:
        data = json.dumps(self._manifest_doc(), indent=1, sort_keys=True).encode("utf-8")
        atomic_write(self.manifest_path, data)

    def _next_rev(self) -> int:
        self._rev += 1
        return self._rev

    def _replay_journals(self) -> None:
        for path in sorted(self.journal_dir.glob("*.json")):
            try:
                doc = json.loads(path.read_text("utf-8"))
                rec = FileRecord.from_json(doc["record"])
            except (OSError, ValueError, KeyError) as exc:
                # A journal is renamed into place whole, so this is outside damage.
                log.warning("discarding unreadable journal %s: %s", path, exc)
                path.unlink(missing_ok=True)
                continue
            final = self.blob_path(rec.key)
            tmp = final.parent / doc["tmp"]
            if tmp.exists():
                os.replace(tmp, final)
                _fsync_dir(final.parent)
            if rec.client_id in self._clients:
                rec.rev = self._next_rev()
                self._files[rec.key] = rec
                self._write_manifest()
                log.info("replayed journal for %s/%s", rec.client_id.hex(), rec.file_id)
            path.unlink()

    def _sweep_temp_files(self) -> None:
        for path in self.root.rglob(f"{TMP_PREFIX}*"):
            path.unlink(missing_ok=True)

    def _open_audit(self) -> int:
        last = 0
        if self.audit_path.exists():
            raw = self.audit_path.read_bytes()
            if raw and not raw.endswith(b"\n"):
                # torn final line from a crash mid-append
                keep = raw.rfind(b"\n") + 1
                with open(self.audit_path, "r+b") as fh:
                    fh.truncate(keep)
                raw = raw[:keep]
            lines = raw.decode("utf-8").splitlines()
            if lines:
                last = AuditEntry.from_line(lines[-1]).seq
        self._audit_fh = open(self.audit_path, "a", encoding="utf-8")
        return last + 1

    # -- paths ---------------------------------------------------------

    def blob_path(self, key: Key) -> Path:
        cid, fid = key
        return self.blobs_dir / cid.hex() / escape_file_id(fid)

    # -- clients -------------------------------------------------------

    def clients(self) -> list[ClientRecord]:
        with self._lock:
            return [replace(c) for _, c in sorted(self._clients.items())]

    def get_client(self, client_id: bytes) -> Optional[ClientRecord]:
        with self._lock:
            rec = self._clients.get(client_id)
            return replace(rec) if rec else None

    def add_client(self, record: ClientRecord) -> None:
        with self._lock:
            if record.client_id in self._clients:
                raise ValidationFailed("client_id", f"client {record.client_id.hex()} already registered")
            self._clients[record.client_id] = replace(record)
            try:
                self._write_manifest()
            except BaseException:
                del self._clients[record.client_id]
                raise

    def remove_client(self, client_id: bytes) -> None:
        """Drop a client together with all of its file records and blobs."""
        with self._lock:
            if client_id not in self._clients:
                raise NotRegistered(f"client {client_id.hex()} is not registered")
            del self._clients[client_id]
            for key in [k for k in self._files if k[0] == client_id]:
                del self._files[key]
            self._write_manifest()
        for path in sorted((self.blobs_dir / client_id.hex()).glob("*"), reverse=True):
            path.unlink(missing_ok=True)

    # -- objects -------------------------------------------------------

    def records(self, client_id: Optional[bytes] = None) -> list[FileRecord]:
        with self._lock:
            return [replace(r) for k, r in sorted(self._files.items()) if client_id is None or k[0] == client_id]

    def record(self, key: Key) -> Optional[FileRecord]:
        with self._lock:
            rec = self._files.get(key)
            return replace(rec) if rec else None

    def put_object(self, key: Key, data: bytes, digest: bytes, meta: Optional[dict[str, Any]] = None) -> FileRecord:
        """Durably store ``data`` under ``key`` (last writer wins)."""
        cid, fid = key
        try:
            check_file_id(fid)
        except ValueError as exc:
            raise ValidationFailed("file_id", str(exc)) from exc
        if compute_digest(data) != digest:
            raise ValidationFailed("digest", "digest does not match object bytes")
        with self._lock:
            if cid not in self._clients:
                raise NotRegistered(f"client {cid.hex()} is not registered")

        final = self.blob_path(key)
        tmp = final.parent / f"{TMP_PREFIX}{uuid.uuid4().hex}"
        try:
            final.parent.mkdir(parents=True, exist_ok=True)
            _write_durable(tmp, data)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StorageError(f"writing {fid!r} failed: {exc}") from exc
        self.hook("storage.tmp_written")

        with self._lock:
            if cid not in self._clients:
                tmp.unlink(missing_ok=True)
                raise NotRegistered(f"client {cid.hex()} is not registered")
            record = FileRecord(cid, fid, len(data), digest, utcnow(), Status.PRESENT, dict(meta or {}), self._next_rev())
            journal = self.journal_dir / f"{uuid.uuid4().hex}.json"
            try:
                atomic_write(journal, json.dumps({"record": record.to_json(), "tmp": tmp.name}).encode("utf-8"))
            except OSError as exc:
                tmp.unlink(missing_ok=True)
                raise StorageError(f"journal write failed: {exc}") from exc
            self.hook("storage.journaled")
            os.replace(tmp, final)
            _fsync_dir(final.parent)
            self.hook("storage.renamed")
            self._files[key] = record
            self._write_manifest()
            self.hook("storage.manifest_written")
            journal.unlink()
            return replace(record)

    def read_raw(self, key: Key) -> Optional[bytes]:
        """Blob bytes as they are on disk, unverified; None when absent."""
        try:
            return self.blob_path(key).read_bytes()
        except FileNotFoundError:
            return None

    def _verdict(self, rec: FileRecord, data: Optional[bytes]) -> Status:
        if data is None:
            return Status.MISSING
        if len(data) != rec.length or compute_digest(data) != rec.digest:
            return Status.CORRUPT
        return Status.PRESENT

    def _set_status(self, snapshot: FileRecord, status: Status) -> bool:
        """Record ``status`` unless the record changed since ``snapshot``. Returns False on a race."""
        with self._lock:
            cur = self._files.get(snapshot.key)
            if cur is None or cur.rev != snapshot.rev:
                return False
            if cur.status != status:
                cur.status = status
                self._write_manifest()
            return True

    def get_object(self, key: Key) -> tuple[bytes, FileRecord]:
        """Return verified bytes; a digest mismatch marks the record corrupt and raises."""
        while True:
            rec = self.record(key)
            if rec is None:
                raise NotFound(f"no object {key[1]!r}")
            if rec.status == Status.MISSING:
                raise NotFound(f"object {key[1]!r} is missing; recovery required", status=Status.MISSING.value)
            data = self.read_raw(key)
            verdict = self._verdict(rec, data)
            if not self._set_status(rec, verdict):
                continue
            if verdict == Status.PRESENT:
                rec.status = verdict
                return data, rec  # type: ignore[return-value]
            if verdict == Status.MISSING:
                raise NotFound(f"object {key[1]!r} is missing; recovery required", status=verdict.value)
            raise IntegrityViolation(f"object {key[1]!r} failed digest verification", status=verdict.value)

    def delete_object(self, key: Key) -> None:
        """Remove the blob, keeping the record as a ``missing`` tombstone."""
        with self._lock:
            rec = self._files.get(key)
            if rec is None or rec.status == Status.MISSING:
                raise NotFound(f"no object {key[1]!r}")
            self.blob_path(key).unlink(missing_ok=True)
            rec.status = Status.MISSING
            rec.rev = self._next_rev()
            self._write_manifest()

    def restore_object(self, key: Key, record: Optional[FileRecord], raw: Optional[bytes]) -> None:
        """Put ``key`` back to an earlier state (rollback). ``record=None`` forgets the key."""
        final = self.blob_path(key)
        tmp = None
        if record is not None and raw is not None:
            final.parent.mkdir(parents=True, exist_ok=True)
            tmp = final.parent / f"{TMP_PREFIX}{uuid.uuid4().hex}"
            _write_durable(tmp, raw)
        with self._lock:
            if tmp is not None:
                os.replace(tmp, final)
            else:
                final.unlink(missing_ok=True)
            if final.parent.exists():
                _fsync_dir(final.parent)
            if record is None:
                self._files.pop(key, None)
            else:
                restored = replace(record, rev=self._next_rev())
                self._files[key] = restored
            self._write_manifest()

    def fsck(self, client_id: Optional[bytes] = None) -> list[tuple[Key, Status]]:
        """Re-verify every record against disk, update statuses, report them."""
        return self._check(self.records(client_id))

    def fsck_one(self, key: Key) -> list[tuple[Key, Status]]:
        rec = self.record(key)
        return self._check([rec] if rec else [])

    def _check(self, records: list[FileRecord]) -> list[tuple[Key, Status]]:
        report = []
        for rec in records:
            while True:
                verdict = self._verdict(rec, self.read_raw(rec.key))
                if self._set_status(rec, verdict):
                    break
                rec = self.record(rec.key)
                if rec is None:
                    break
            if rec is not None:
                report.append((rec.key, verdict))
        return report

    # -- audit ---------------------------------------------------------

    def append_audit(self, actor: str, action: Action | str, subject: str = "-", outcome: Outcome | str = Outcome.OK) -> int:
        """Append one audit line, fsynced before returning its seq."""
        with self._audit_lock:
            entry = AuditEntry(
                self._next_seq, utcnow(), actor, Action(action), subject or "-", Outcome(outcome)
            )
            try:
                self._audit_fh.write(entry.to_line())
                self._audit_fh.flush()
                os.fsync(self._audit_fh.fileno())
            except OSError as exc:
                raise StorageError(f"audit append failed: {exc}") from exc
            self._next_seq += 1
            return entry.seq

    def audit_entries(self) -> list[AuditEntry]:
        with self._audit_lock:
            self._audit_fh.flush()
            text = self.audit_path.read_text("utf-8")
        return [AuditEntry.from_line(line) for line in text.splitlines() if line]

    def iter_blob_files(self) -> Iterator[Path]:
        return (p for p in self.blobs_dir.rglob("*") if p.is_file())
