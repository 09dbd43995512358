import os
import random

import pytest
from fastapi.testclient import TestClient

from sba.codec import BackupBlob, compute_digest, serialize_blob
from sba.errors import IntegrityViolation, NotFound, NotRegistered, StorageError, ValidationFailed
from sba.remote_server import RemoteServer
from sba.service import create_remote_app
from sba.storage import Store

from .conftest import SHARED

CID = os.urandom(16)
SEED = os.urandom(16)


@pytest.fixture
def remote(tmp_path):
    r = RemoteServer(tmp_path / "remote")
    yield r
    r.close()


def blob_bytes(cid=CID, file_id="f", content=b"content", seed=SEED):
    return serialize_blob(BackupBlob.encode(cid, file_id, content, seed))


def test_seed_store_and_get(remote):
    assert remote.store_seed(CID, SEED) is True
    assert remote.get_seed(CID) == SEED


def test_seed_idempotent(remote):
    remote.store_seed(CID, SEED)
    assert remote.store_seed(CID, SEED) is False
    assert len(remote.store.clients()) == 1


def test_seed_conflict(remote):
    remote.store_seed(CID, SEED)
    changed = bytes([SEED[0] ^ 1]) + SEED[1:]
    with pytest.raises(IntegrityViolation):
        remote.store_seed(CID, changed)
    assert remote.get_seed(CID) == SEED


def test_blob_round_trip(remote):
    remote.store_seed(CID, SEED)
    raw = blob_bytes()
    remote.store_blob(CID, "f", raw)
    assert remote.get_blob(CID, "f") == raw


def test_blob_cid_mismatch(remote):
    remote.store_seed(CID, SEED)
    with pytest.raises(ValidationFailed) as exc:
        remote.store_blob(CID, "f", blob_bytes(cid=os.urandom(16)))
    assert exc.value.check == "client_id"


def test_blob_unparseable(remote):
    remote.store_seed(CID, SEED)
    with pytest.raises(ValidationFailed):
        remote.store_blob(CID, "f", b"garbage")


def test_blob_for_unregistered_client(tmp_path, remote):
    remote.store_seed(CID, SEED)
    raw = blob_bytes()
    remote.store_blob(CID, "f", raw)
    fresh = RemoteServer(tmp_path / "fresh")
    with pytest.raises(NotRegistered):
        fresh.store_blob(CID, "f", raw)
    fresh.close()


def test_list_sorted(remote):
    remote.store_seed(CID, SEED)
    remote.store_blob(CID, "b", blob_bytes(file_id="b", content=b"bb"))
    remote.store_blob(CID, "a", blob_bytes(file_id="a", content=b"a"))
    listing = remote.list_blobs(CID)
    assert [e.file_id for e in listing] == ["a", "b"]
    assert listing[0].original_length == 1 and listing[0].original_digest == compute_digest(b"a").hex()


def test_get_missing_blob(remote):
    remote.store_seed(CID, SEED)
    with pytest.raises(NotFound):
        remote.get_blob(CID, "never")


def test_random_blobs_bit_identical(remote):
    rng = random.Random(1)
    remote.store_seed(CID, SEED)
    stored = {}
    for i in range(30):
        raw = blob_bytes(file_id=f"f{i}", content=rng.randbytes(rng.randint(0, 5000)))
        remote.store_blob(CID, f"f{i}", raw)
        stored[f"f{i}"] = compute_digest(raw)
    for fid, digest in stored.items():
        assert compute_digest(remote.get_blob(CID, fid)) == digest


def test_at_rest_corruption_detected(remote):
    remote.store_seed(CID, SEED)
    remote.store_blob(CID, "f", blob_bytes())
    path = remote.store.blob_path((CID, "f"))
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityViolation):
        remote.get_blob(CID, "f")


def test_refuses_main_data_dir(tmp_path):
    Store(tmp_path / "main", "main").close()
    with pytest.raises(StorageError):
        RemoteServer(tmp_path / "main")


def test_remote_never_decodes(remote):
    # what comes back is exactly what was stored: the encoded payload, not the plaintext
    remote.store_seed(CID, SEED)
    content = b"A" * 100
    raw = blob_bytes(content=content)
    remote.store_blob(CID, "f", raw)
    assert content not in remote.get_blob(CID, "f")


# -- HTTP surface --------------------------------------------------------


@pytest.fixture
def http(remote):
    return TestClient(create_remote_app(remote, SHARED))


AUTH = {"Authorization": f"Bearer {SHARED}"}


def test_http_requires_shared_secret(http):
    assert http.get("/v1/health").status_code == 200
    r = http.get(f"/v1/seeds/{CID.hex()}")
    assert r.status_code == 401 and r.json()["code"] == "unauthorized"
    r = http.get(f"/v1/seeds/{CID.hex()}", headers={"Authorization": "Bearer wrong"})
    assert r.status_code == 401


def test_http_seed_and_blob_endpoints(http):
    r = http.put(f"/v1/seeds/{CID.hex()}", json={"seed": SEED.hex()}, headers=AUTH)
    assert r.status_code == 201
    assert http.put(f"/v1/seeds/{CID.hex()}", json={"seed": SEED.hex()}, headers=AUTH).status_code == 200
    conflict = http.put(f"/v1/seeds/{CID.hex()}", json={"seed": os.urandom(16).hex()}, headers=AUTH)
    assert conflict.status_code == 409 and conflict.json()["code"] == "integrity_violation"
    assert http.get(f"/v1/seeds/{CID.hex()}", headers=AUTH).json() == {"client_id": CID.hex(), "seed": SEED.hex()}

    raw = blob_bytes(file_id="x y", content=b"data")
    assert http.put(f"/v1/backups/{CID.hex()}/x%20y", content=raw, headers=AUTH).status_code == 200
    got = http.get(f"/v1/backups/{CID.hex()}/x%20y", headers=AUTH)
    assert got.status_code == 200 and got.content == raw
    listing = http.get(f"/v1/backups/{CID.hex()}", headers=AUTH).json()
    assert listing == [{"file_id": "x y", "original_length": 4, "original_digest": compute_digest(b"data").hex()}]
    missing = http.get(f"/v1/backups/{CID.hex()}/nope", headers=AUTH)
    assert missing.status_code == 404 and missing.json()["code"] == "not_found"


def test_http_bad_inputs(http):
    assert http.put("/v1/seeds/zz", json={"seed": SEED.hex()}, headers=AUTH).json()["code"] == "validation_failed"
    assert http.put(f"/v1/seeds/{CID.hex()}", json={"seed": "00"}, headers=AUTH).json()["code"] == "validation_failed"
    r = http.put(f"/v1/backups/{CID.hex()}/f", content=blob_bytes(), headers=AUTH)
    assert r.status_code == 403 and r.json()["code"] == "not_registered"
