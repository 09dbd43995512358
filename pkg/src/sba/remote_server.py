"""The remote backup server.

It keeps seed blocks and serialized backup blobs and hands them back
verbatim. It never XORs anything: decoding is the main cloud's job.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional

from pydantic import BaseModel

from . import faults
from .codec import SEED_SIZE, compute_digest, parse_blob
from .errors import BlobFormatError, IntegrityViolation, NotFound, NotRegistered, ValidationFailed
from .protocol import BlobListEntry
from .storage import Action, ClientRecord, Status, Store, utcnow


class RemoteConfig(BaseModel):
    listen_address: str = "127.0.0.1:8601"
    data_dir: Path
    shared_secret: str


class RemoteServer:
    def __init__(self, data_dir: str | Path, *, fault_hook: Optional[faults.FaultHook] = None):
        # Store refuses a directory whose manifest belongs to the main role.
        self.store = Store(data_dir, "remote", fault_hook=fault_hook)
        self._seed_lock = threading.Lock()

    @classmethod
    def from_config(cls, config: RemoteConfig) -> RemoteServer:
        return cls(config.data_dir, fault_hook=faults.from_env())

    def close(self) -> None:
        self.store.close()

    def store_seed(self, client_id: bytes, seed: bytes) -> bool:
        """Store a client's seed. Returns False when the identical seed was already there."""
        if len(seed) != SEED_SIZE:
            raise ValidationFailed("seed", f"seed must be {SEED_SIZE} bytes")
        with self._seed_lock:
            existing = self.store.get_client(client_id)
            if existing is not None:
                if existing.seed != seed:
                    # a new seed would make every existing backup undecodable
                    raise IntegrityViolation(f"client {client_id.hex()} already has a different seed")
                return False
            self.store.add_client(ClientRecord(client_id, utcnow(), seed=seed))
        self.store.append_audit(client_id.hex(), Action.REGISTER)
        return True

    def get_seed(self, client_id: bytes) -> bytes:
        rec = self.store.get_client(client_id)
        if rec is None or rec.seed is None:
            raise NotFound(f"no seed for client {client_id.hex()}")
        return rec.seed

    def store_blob(self, client_id: bytes, file_id: str, blob_bytes: bytes) -> BlobListEntry:
        try:
            blob = parse_blob(blob_bytes)
        except BlobFormatError as exc:
            raise ValidationFailed("blob", f"unparseable backup blob: {exc}") from None
        if blob.client_id != client_id:
            raise ValidationFailed("client_id", "blob client_id does not match the request path")
        if blob.file_id != file_id:
            raise ValidationFailed("file_id", "blob file_id does not match the request path")
        if self.store.get_client(client_id) is None:
            raise NotRegistered(f"no seed registered for client {client_id.hex()}")
        meta = {"original_length": blob.original_length, "original_digest": blob.original_digest.hex()}
        self.store.put_object((client_id, file_id), blob_bytes, compute_digest(blob_bytes), meta)
        self.store.append_audit(client_id.hex(), Action.PUT, file_id)
        return BlobListEntry(file_id=file_id, **meta)

    def get_blob(self, client_id: bytes, file_id: str) -> bytes:
        data, _ = self.store.get_object((client_id, file_id))
        return data

    def list_blobs(self, client_id: bytes) -> list[BlobListEntry]:
        if self.store.get_client(client_id) is None:
            raise NotFound(f"unknown client {client_id.hex()}")
        return [
            BlobListEntry(file_id=r.file_id, **r.meta)
            for r in sorted(self.store.records(client_id), key=lambda r: r.file_id)
            if r.status != Status.MISSING
        ]
