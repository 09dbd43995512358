"""The main cloud: primary storage, write-through mirroring, recovery.

A put is accepted only once the local store *and* the remote server hold
it. Before touching either side the body is staged as an intent under
``intents/``; intents left behind by a crash are rolled forward the next
time the service starts (or as soon as the remote is reachable again),
so a file is never left half-mirrored.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal, Optional

from pydantic import BaseModel

from . import faults
from .codec import BackupBlob, compute_digest, derive_seed, new_client_id, new_nonce, parse_blob, serialize_blob
from .errors import (
    BlobFormatError,
    IntegrityViolation,
    NotFound,
    NotRegistered,
    RemoteUnreachable,
    SBAError,
    Unauthorized,
    ValidationFailed,
)
from .protocol import (
    MirrorProblem,
    RecoveryVerdict,
    UploadRequest,
    VerifyEntry,
    VerifyResponse,
    authenticate,
    hash_token,
    new_token,
    secret_matches,
    validate_upload,
)
from .remote_client import RemoteClient
from .storage import TMP_PREFIX, Action, ClientRecord, FileRecord, Key, Outcome, Status, Store, atomic_write, utcnow

log = logging.getLogger(__name__)

ADMIN = "admin"
ANONYMOUS = "anonymous"


class MainConfig(BaseModel):
    listen_address: str = "127.0.0.1:8600"
    data_dir: Path
    remote_url: str
    remote_shared_secret: str
    admin_secret: str
    encryption_hook: Literal["none", "aead"] = "none"
    encryption_key: Optional[str] = None  # 64 hex digits, required for "aead"
    remote_timeout: float = 10.0


class AeadHook:
    """AES-256-GCM applied to content before it is seed-encoded and mirrored."""

    def __init__(self, key: bytes):
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM

        if len(key) != 32:
            raise ValueError("encryption key must be 32 bytes")
        self._aead = AESGCM(key)

    @staticmethod
    def _aad(client_id: bytes, file_id: str) -> bytes:
        return client_id + file_id.encode("utf-8")

    def seal(self, client_id: bytes, file_id: str, content: bytes) -> bytes:
        nonce = os.urandom(12)
        return nonce + self._aead.encrypt(nonce, content, self._aad(client_id, file_id))

    def open(self, client_id: bytes, file_id: str, sealed: bytes) -> bytes:
        from cryptography.exceptions import InvalidTag

        try:
            return self._aead.decrypt(sealed[:12], sealed[12:], self._aad(client_id, file_id))
        except (InvalidTag, ValueError):
            raise IntegrityViolation("backup failed authenticated decryption") from None


@dataclass
class Caller:
    actor: str
    client_id: Optional[bytes] = None

    @property
    def is_admin(self) -> bool:
        return self.actor == ADMIN


class MainCloud:
    def __init__(
        self,
        data_dir: str | Path,
        remote: RemoteClient,
        *,
        admin_secret: str,
        encryption: Optional[AeadHook] = None,
        fault_hook: Optional[faults.FaultHook] = None,
    ):
        self.hook = fault_hook or faults.noop
        self.store = Store(data_dir, "main", fault_hook=self.hook)
        self.remote = remote
        self.admin_secret = admin_secret
        self.encryption = encryption
        self.intents_dir = self.store.root / "intents"
        self.intents_dir.mkdir(exist_ok=True)
        self._guard = threading.Lock()
        self._key_locks: dict[Key, threading.Lock] = {}
        self._active: set[Path] = set()  # intents owned by in-flight puts
        try:
            self.reconcile()
        except RemoteUnreachable:
            log.warning("remote unreachable at startup; running degraded with %d pending intents", self.pending_intents())

    @classmethod
    def from_config(cls, config: MainConfig) -> MainCloud:
        encryption = None
        if config.encryption_hook == "aead":
            if not config.encryption_key:
                raise ValueError("encryption_hook 'aead' needs encryption_key")
            encryption = AeadHook(bytes.fromhex(config.encryption_key))
        remote = RemoteClient(config.remote_url, config.remote_shared_secret, timeout=config.remote_timeout)
        return cls(
            config.data_dir,
            remote,
            admin_secret=config.admin_secret,
            encryption=encryption,
            fault_hook=faults.from_env(),
        )

    def close(self) -> None:
        self.store.close()

    @contextmanager
    def _locked(self, key: Key) -> Iterator[None]:
        with self._guard:
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            yield

    # -- authentication ------------------------------------------------

    def authenticate(self, headers, action: Action, subject: str = "-", *, admin_only: bool = False) -> Caller:
        """Resolve the caller, auditing a ``denied`` entry on failure."""
        if secret_matches(headers, self.admin_secret):
            return Caller(ADMIN)
        if not admin_only:
            try:
                client_id = authenticate(headers, self.store.clients())
            except Unauthorized:
                pass
            else:
                return Caller(client_id.hex(), client_id)
        self.store.append_audit(ANONYMOUS, action, subject, Outcome.DENIED)
        raise Unauthorized("admin credentials required" if admin_only else "missing or unknown bearer token")

    def _audit(self, caller: Caller, action: Action, subject: str, outcome: Outcome = Outcome.OK) -> None:
        self.store.append_audit(caller.actor, action, subject, outcome)

    def _client(self, client_id: bytes) -> ClientRecord:
        rec = self.store.get_client(client_id)
        if rec is None:
            raise NotRegistered(f"client {client_id.hex()} is not registered")
        return rec

    # -- seeds ---------------------------------------------------------

    def seed_for(self, client_id: bytes) -> bytes:
        """Recompute the seed from the local nonce, or fetch it from the remote if that is lost."""
        rec = self.store.get_client(client_id)
        if rec is not None and rec.nonce is not None:
            return derive_seed(rec.nonce, client_id)
        return self.remote.get_seed(client_id)

    def register_client(self) -> tuple[bytes, str]:
        """Create a client, push its seed to the remote, persist it locally. All or nothing."""
        known = {c.client_id for c in self.store.clients()}
        client_id = new_client_id()
        while client_id in known:
            client_id = new_client_id()
        nonce = new_nonce()
        token = new_token()
        try:
            self.remote.put_seed(client_id, derive_seed(nonce, client_id))
        except SBAError:
            self.store.append_audit(ADMIN, Action.REGISTER, client_id.hex(), Outcome.ERROR)
            raise
        self.store.add_client(ClientRecord(client_id, utcnow(), nonce=nonce, auth_token_hash=hash_token(token)))
        self.store.append_audit(ADMIN, Action.REGISTER, client_id.hex())
        return client_id, token

    def remove_client(self, client_id: bytes) -> None:
        self.store.remove_client(client_id)
        self.store.append_audit(ADMIN, Action.DELETE, client_id.hex())

    # -- mirroring -----------------------------------------------------

    def _mirror_content(self, client_id: bytes, file_id: str, content: bytes) -> bytes:
        return self.encryption.seal(client_id, file_id, content) if self.encryption else content

    def _push(self, client_id: bytes, file_id: str, content: bytes) -> None:
        mirrored = self._mirror_content(client_id, file_id, content)
        blob = BackupBlob.encode(client_id, file_id, mirrored, self.seed_for(client_id))
        self.remote.put_blob(client_id, file_id, serialize_blob(blob))

    def _decode_backup(self, client_id: bytes, file_id: str, blob_bytes: bytes, seed: bytes) -> bytes:
        try:
            blob = parse_blob(blob_bytes)
        except BlobFormatError as exc:
            raise IntegrityViolation(f"backup blob is malformed: {exc}") from None
        if blob.client_id != client_id or blob.file_id != file_id:
            raise IntegrityViolation("backup blob belongs to a different file")
        decoded = blob.decode(seed)
        if compute_digest(decoded) != blob.original_digest:
            raise IntegrityViolation("decoded backup does not match its recorded digest")
        if self.encryption:
            decoded = self.encryption.open(client_id, file_id, decoded)
        return decoded

    # -- intents -------------------------------------------------------

    def _stage_intent(self, key: Key, body: bytes, digest: bytes) -> Path:
        meta_path = self.intents_dir / f"{uuid.uuid4().hex}.json"
        with self._guard:
            self._active.add(meta_path)
        atomic_write(meta_path.with_suffix(".body"), body)
        doc = {"client_id": key[0].hex(), "file_id": key[1], "digest": digest.hex(), "length": len(body)}
        atomic_write(meta_path, json.dumps(doc).encode("utf-8"))
        return meta_path

    def _drop_intent(self, meta_path: Path) -> None:
        meta_path.unlink(missing_ok=True)
        meta_path.with_suffix(".body").unlink(missing_ok=True)
        with self._guard:
            self._active.discard(meta_path)

    def _staged(self, pattern: str) -> list[Path]:
        return [p for p in self.intents_dir.glob(pattern) if not p.name.startswith(TMP_PREFIX)]

    def _intent_files(self) -> list[Path]:
        with self._guard:
            active = set(self._active)
        paths = []
        for p in self._staged("*.json"):
            try:
                paths.append((p.stat().st_mtime_ns, p))
            except FileNotFoundError:
                continue
        return [p for _, p in sorted(paths) if p not in active]

    def _intents(self) -> list[tuple[Path, Key, bytes]]:
        found = []
        for meta_path in self._intent_files():
            try:
                doc = json.loads(meta_path.read_text("utf-8"))
                key = (bytes.fromhex(doc["client_id"]), doc["file_id"])
                found.append((meta_path, key, bytes.fromhex(doc["digest"])))
            except (OSError, ValueError, KeyError):
                self._drop_intent(meta_path)
        return found

    def pending_intents(self) -> int:
        return len(self._intent_files())

    def reconcile(self) -> int:
        """Roll every staged intent forward to both stores. Returns how many were replayed."""
        with self._guard:
            staged = {p.with_suffix("") for p in self._active}
        staged.update(p.with_suffix("") for p in self._staged("*.json"))
        for body in self._staged("*.body"):
            if body.with_suffix("") not in staged:
                body.unlink(missing_ok=True)
        done = 0
        for meta_path, key, digest in self._intents():
            with self._locked(key):
                if not meta_path.exists():
                    continue  # superseded by a newer put
                try:
                    body = meta_path.with_suffix(".body").read_bytes()
                except FileNotFoundError:
                    body = None
                if body is None or compute_digest(body) != digest or self.store.get_client(key[0]) is None:
                    self._drop_intent(meta_path)
                    continue
                self.store.put_object(key, body, digest)
                self._push(key[0], key[1], body)
                self.store.append_audit(key[0].hex(), Action.PUT, key[1])
                self._drop_intent(meta_path)
                log.info("rolled forward interrupted put of %s/%s", key[0].hex(), key[1])
                done += 1
        return done

    def _supersede_intents(self, key: Key, keep: Path) -> None:
        for meta_path, other, _ in self._intents():
            if other == key and meta_path != keep:
                self._drop_intent(meta_path)

    # -- files ---------------------------------------------------------

    def put_file(self, caller: Caller, req: UploadRequest) -> FileRecord:
        key = (req.client_id, req.file_id)
        try:
            validate_upload(req)
        except ValidationFailed:
            self._audit(caller, Action.PUT, req.file_id, Outcome.ERROR)
            raise
        digest = compute_digest(req.body)
        with self._locked(key):
            self._client(req.client_id)
            intent = self._stage_intent(key, req.body, digest)
            try:
                rec = self._put_locked(caller, key, req.body, digest, intent)
            finally:
                with self._guard:
                    self._active.discard(intent)
            self._supersede_intents(key, intent)
        return rec

    def _put_locked(self, caller: Caller, key: Key, body: bytes, digest: bytes, intent: Path) -> FileRecord:
        self.hook("intent.staged")
        previous = self.store.record(key)
        previous_raw = self.store.read_raw(key) if previous is not None else None
        try:
            rec = self.store.put_object(key, body, digest)
        except SBAError:
            self._drop_intent(intent)
            self._audit(caller, Action.PUT, key[1], Outcome.ERROR)
            raise
        self.hook("main.local_written")
        try:
            self._push(key[0], key[1], body)
        except SBAError:
            self.store.restore_object(key, previous, previous_raw)
            self._drop_intent(intent)
            self._audit(caller, Action.PUT, key[1], Outcome.ERROR)
            raise
        self.hook("main.remote_pushed")
        self._audit(caller, Action.PUT, key[1])
        self.hook("main.audited")
        self._drop_intent(intent)
        return rec

    def get_file(self, caller: Caller, client_id: bytes, file_id: str) -> tuple[bytes, FileRecord]:
        try:
            data, rec = self.store.get_object((client_id, file_id))
        except SBAError:
            self._audit(caller, Action.GET, file_id, Outcome.ERROR)
            raise
        self._audit(caller, Action.GET, file_id)
        return data, rec

    def list_files(self, client_id: bytes) -> list[FileRecord]:
        return self.store.records(client_id)

    def delete_file(self, caller: Caller, client_id: bytes, file_id: str) -> None:
        with self._locked((client_id, file_id)):
            try:
                self.store.delete_object((client_id, file_id))
            except SBAError:
                self._audit(caller, Action.DELETE, file_id, Outcome.ERROR)
                raise
            self._audit(caller, Action.DELETE, file_id)

    def recover_file(self, caller: Caller, client_id: bytes, file_id: str, *, force: bool = False) -> FileRecord:
        """Rebuild a lost or corrupt file from its remote backup."""
        key = (client_id, file_id)
        with self._locked(key):
            try:
                rec = self._recover_locked(key, force)
            except SBAError:
                self._audit(caller, Action.RECOVER, file_id, Outcome.ERROR)
                raise
            self._audit(caller, Action.RECOVER, file_id)
            return rec

    def _recover_locked(self, key: Key, force: bool) -> FileRecord:
        client_id, file_id = key
        rec = self.store.record(key)
        if rec is None and not force:
            raise NotFound(f"no record of {file_id!r}")
        if rec is not None and not force:
            [(_, status)] = self.store.fsck_one(key)
            if status == Status.PRESENT:
                raise ValidationFailed("precondition", f"{file_id!r} is present and healthy; use force to recover anyway")
        seed = self.seed_for(client_id)
        try:
            blob_bytes = self.remote.get_blob(client_id, file_id)
        except NotFound:
            raise NotFound(f"{file_id!r} is unrecoverable: no backup at the remote server") from None
        content = self._decode_backup(client_id, file_id, blob_bytes, seed)
        digest = compute_digest(content)
        if rec is not None and digest != rec.digest:
            raise IntegrityViolation(f"backup of {file_id!r} does not match the recorded version")
        return self.store.put_object(key, content, digest)

    def recover_all(self, caller: Caller, client_id: Optional[bytes] = None) -> list[RecoveryVerdict]:
        """Recover every missing or corrupt file; failures are reported, never raised."""
        results = []
        for (cid, fid), status in self.store.fsck(client_id):
            if status == Status.PRESENT:
                continue
            verdict = RecoveryVerdict(client_id=cid.hex(), file_id=fid, prior_status=status.value, outcome="restored")
            try:
                self.recover_file(caller, cid, fid, force=True)
            except SBAError as exc:
                verdict.outcome = exc.code
                verdict.message = exc.message
            results.append(verdict)
        return results

    # -- verification --------------------------------------------------

    def verify(self, caller: Caller, client_id: Optional[bytes] = None, *, mirror: bool = False) -> VerifyResponse:
        files = [VerifyEntry(client_id=c.hex(), file_id=f, status=s.value) for (c, f), s in self.store.fsck(client_id)]
        resp = VerifyResponse(files=files)
        if mirror:
            resp.mirror_checked = True
            resp.mirror_problems = self.mirror_problems(client_id)
        self._audit(caller, Action.VERIFY, "-")
        return resp

    def mirror_problems(self, client_id: Optional[bytes] = None) -> list[MirrorProblem]:
        """Compare every present local file and every seed with what the remote holds."""
        problems = []
        for client in self.store.clients():
            cid = client.client_id
            if client_id is not None and cid != client_id:
                continue
            seed = derive_seed(client.nonce, cid) if client.nonce else None
            try:
                remote_seed = self.remote.get_seed(cid)
            except NotFound:
                remote_seed = None
            if remote_seed is None:
                problems.append(MirrorProblem(client_id=cid.hex(), problem="seed_missing"))
            elif seed is not None and remote_seed != seed:
                problems.append(MirrorProblem(client_id=cid.hex(), problem="seed_mismatch"))
            seed = seed or remote_seed
            if seed is None:
                continue
            for rec in self.store.records(cid):
                if rec.status != Status.PRESENT:
                    continue
                try:
                    content = self._decode_backup(cid, rec.file_id, self.remote.get_blob(cid, rec.file_id), seed)
                except NotFound:
                    problems.append(MirrorProblem(client_id=cid.hex(), file_id=rec.file_id, problem="blob_missing"))
                    continue
                except IntegrityViolation:
                    problems.append(MirrorProblem(client_id=cid.hex(), file_id=rec.file_id, problem="blob_corrupt"))
                    continue
                if compute_digest(content) != rec.digest:
                    problems.append(MirrorProblem(client_id=cid.hex(), file_id=rec.file_id, problem="digest_mismatch"))
        return problems

    def resync_seeds(self) -> int:
        """Re-push every client's seed (idempotent at the remote). Returns the number pushed."""
        n = 0
        for client in self.store.clients():
            if client.nonce is not None:
                self.remote.put_seed(client.client_id, derive_seed(client.nonce, client.client_id))
                n += 1
        return n
