import pytest

from sba.client import MainClient
from sba.codec import compute_digest
from sba.errors import IntegrityViolation, NotFound, Unauthorized, ValidationFailed
from sba.protocol import HEADER_DIGEST, HEADER_LENGTH

from .conftest import ADMIN_SECRET


@pytest.fixture
def http(env):
    with env.main_http() as tc:
        yield tc


def bearer(token):
    return {"Authorization": f"Bearer {token}"}


def put_headers(token, data):
    return {**bearer(token), HEADER_LENGTH: str(len(data)), HEADER_DIGEST: compute_digest(data).hex()}


def register(http):
    resp = http.post("/v1/clients", headers=bearer(ADMIN_SECRET))
    assert resp.status_code == 201
    return resp.json()


def assert_error(resp, status, code):
    assert resp.status_code == status, resp.text
    body = resp.json()
    assert body["code"] == code
    assert isinstance(body["message"], str) and body["message"]
    return body


def test_health(http):
    body = http.get("/v1/health").json()
    assert body["status"] == "ok" and body["role"] == "main" and body["remote"] == "reachable"


def test_register_response_shape(http):
    body = register(http)
    assert len(body["client_id"]) == 32 and len(body["token"]) == 64
    int(body["client_id"], 16), int(body["token"], 16)


def test_register_requires_admin(http):
    assert_error(http.post("/v1/clients"), 401, "unauthorized")
    assert_error(http.post("/v1/clients", headers=bearer("wrong")), 401, "unauthorized")
    client = register(http)
    assert_error(http.post("/v1/clients", headers=bearer(client["token"])), 401, "unauthorized")


def test_put_get_delete_cycle(http):
    token = register(http)["token"]
    data = b"file body"
    resp = http.put("/v1/files/notes.txt", content=data, headers=put_headers(token, data))
    assert resp.status_code == 200
    assert resp.json()["digest"] == compute_digest(data).hex() and resp.json()["status"] == "present"
    got = http.get("/v1/files/notes.txt", headers=bearer(token))
    assert got.content == data and got.headers[HEADER_DIGEST] == compute_digest(data).hex()
    assert http.delete("/v1/files/notes.txt", headers=bearer(token)).status_code == 204
    body = assert_error(http.get("/v1/files/notes.txt", headers=bearer(token)), 404, "not_found")
    assert body["detail"]["status"] == "missing"
    listed = http.get("/v1/files", headers=bearer(token)).json()
    assert [(f["file_id"], f["status"]) for f in listed] == [("notes.txt", "missing")]
    assert http.post("/v1/files/notes.txt/recover", headers=bearer(token)).status_code == 200
    assert http.get("/v1/files/notes.txt", headers=bearer(token)).content == data


@pytest.mark.parametrize(
    "headers_fn, check",
    [
        (lambda t, d: {**bearer(t), HEADER_DIGEST: compute_digest(d).hex()}, "length"),
        (lambda t, d: {**bearer(t), HEADER_LENGTH: "99", HEADER_DIGEST: compute_digest(d).hex()}, "length"),
        (lambda t, d: {**bearer(t), HEADER_LENGTH: str(len(d))}, "digest"),
        (lambda t, d: {**bearer(t), HEADER_LENGTH: str(len(d)), HEADER_DIGEST: compute_digest(b"x").hex()}, "digest"),
        (lambda t, d: {**bearer(t), HEADER_LENGTH: str(len(d)), HEADER_DIGEST: "zz"}, "digest"),
    ],
)
def test_upload_header_validation(env, http, headers_fn, check):
    token = register(http)["token"]
    body = assert_error(http.put("/v1/files/f", content=b"abc", headers=headers_fn(token, b"abc")), 400, "validation_failed")
    assert body["detail"]["check"] == check
    assert env.cloud.store.records() == []


@pytest.mark.parametrize("fid", ["a/b", "dir/", "%00"])
def test_bad_file_id(env, http, fid):
    token = register(http)["token"]
    resp = http.put(f"/v1/files/{fid}", content=b"abc", headers=put_headers(token, b"abc"))
    body = assert_error(resp, 400, "validation_failed")
    assert body["detail"]["check"] == "file_id"


def test_unauthorized_file_access(http):
    assert_error(http.get("/v1/files/f"), 401, "unauthorized")
    assert_error(http.put("/v1/files/f", content=b"", headers=put_headers("0" * 64, b"")), 401, "unauthorized")


def test_admin_cannot_use_file_endpoints(http):
    body = assert_error(http.get("/v1/files/f", headers=bearer(ADMIN_SECRET)), 400, "validation_failed")
    assert body["detail"]["check"] == "caller"


def test_clients_are_isolated(http):
    a, b = register(http), register(http)
    data = b"only for a"
    http.put("/v1/files/f", content=data, headers=put_headers(a["token"], data))
    assert_error(http.get("/v1/files/f", headers=bearer(b["token"])), 404, "not_found")
    assert http.get("/v1/files", headers=bearer(b["token"])).json() == []
    resp = http.get(f"/v1/verify?client_id={a['client_id']}", headers=bearer(b["token"]))
    assert_error(resp, 401, "unauthorized")
    resp = http.post(f"/v1/recover?client_id={a['client_id']}", headers=bearer(b["token"]))
    assert_error(resp, 401, "unauthorized")


def test_recover_precondition(http):
    token = register(http)["token"]
    http.put("/v1/files/f", content=b"ok", headers=put_headers(token, b"ok"))
    body = assert_error(http.post("/v1/files/f/recover", headers=bearer(token)), 400, "validation_failed")
    assert body["detail"]["check"] == "precondition"
    assert http.post("/v1/files/f/recover?force=true", headers=bearer(token)).status_code == 200


def test_corrupt_local_gives_409(env, http):
    reg = register(http)
    http.put("/v1/files/f", content=b"abcdef", headers=put_headers(reg["token"], b"abcdef"))
    env.cloud.store.blob_path((bytes.fromhex(reg["client_id"]), "f")).write_bytes(b"abcdeF")
    assert_error(http.get("/v1/files/f", headers=bearer(reg["token"])), 409, "integrity_violation")
    results = http.post("/v1/recover", headers=bearer(reg["token"])).json()["results"]
    assert [(r["file_id"], r["prior_status"], r["outcome"]) for r in results] == [("f", "corrupt", "restored")]


def test_remote_down_gives_503(env, http):
    token = register(http)["token"]
    env.take_remote_down()
    assert http.get("/v1/health").json()["status"] == "degraded"
    assert_error(http.put("/v1/files/f", content=b"x", headers=put_headers(token, b"x")), 503, "remote_unreachable")
    assert_error(http.post("/v1/clients", headers=bearer(ADMIN_SECRET)), 503, "remote_unreachable")


def test_verify_with_mirror(env, http):
    reg = register(http)
    for name in ("a", "b"):
        http.put(f"/v1/files/{name}", content=name.encode(), headers=put_headers(reg["token"], name.encode()))
    body = http.get("/v1/verify?mirror=true", headers=bearer(ADMIN_SECRET)).json()
    assert body["mirror_checked"] is True and body["mirror_problems"] == []
    assert sorted((f["file_id"], f["status"]) for f in body["files"]) == [("a", "present"), ("b", "present")]
    env.remote_server.store.blob_path((bytes.fromhex(reg["client_id"]), "a")).unlink()
    body = http.get("/v1/verify?mirror=true", headers=bearer(ADMIN_SECRET)).json()
    assert [(p["file_id"], p["problem"]) for p in body["mirror_problems"]] == [("a", "blob_missing")]


def test_deregister(http):
    reg = register(http)
    assert http.delete(f"/v1/clients/{reg['client_id']}", headers=bearer(ADMIN_SECRET)).status_code == 204
    assert_error(http.get("/v1/files", headers=bearer(reg["token"])), 401, "unauthorized")


def test_main_client_maps_errors(env, http):
    admin = MainClient("http://test", http=http)
    reg = admin.register(ADMIN_SECRET)
    c = MainClient("http://test", reg.token, http=http)
    c.put("dot..name", b"payload")
    assert c.get("dot..name") == b"payload"
    with pytest.raises(NotFound):
        c.get("absent")
    with pytest.raises(ValidationFailed):
        c.recover("dot..name")
    env.cloud.store.blob_path((bytes.fromhex(reg.client_id), "dot..name")).write_bytes(b"PAYLOAD")
    with pytest.raises(IntegrityViolation):
        c.get("dot..name")
    with pytest.raises(Unauthorized):
        MainClient("http://test", "f" * 64, http=http).list_files()
