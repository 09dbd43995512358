"""HTTP client the main cloud uses to talk to the remote server."""

from __future__ import annotations

from typing import Optional
from urllib.parse import quote

import httpx

from .errors import RemoteUnreachable, SBAError, error_from_code
from .protocol import BlobListEntry, SeedResponse


def quote_segment(text: str) -> str:
    # '.' is encoded too so '.'/'..' ids survive URL normalization.
    return quote(text, safe="").replace(".", "%2E")


def raise_for_error(resp: httpx.Response, who: str) -> None:
    if resp.is_success:
        return
    try:
        body = resp.json()
        code, message, detail = body["code"], body["message"], body.get("detail")
    except (ValueError, KeyError, TypeError):
        raise SBAError(f"{who} answered HTTP {resp.status_code}: {resp.text[:200]}") from None
    raise error_from_code(code, message, detail)


class RemoteClient:
    def __init__(
        self,
        base_url: str = "",
        shared_secret: str = "",
        *,
        http: Optional[httpx.Client] = None,
        timeout: float = 10.0,
    ):
        self.http = http or httpx.Client(base_url=base_url, timeout=timeout)
        self.headers = {"Authorization": f"Bearer {shared_secret}"}

    def close(self) -> None:
        self.http.close()

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            headers = {**self.headers, **kwargs.pop("headers", {})}
            resp = self.http.request(method, path, headers=headers, **kwargs)
        except httpx.TransportError as exc:
            raise RemoteUnreachable(f"remote server unreachable: {exc}") from None
        if resp.status_code in (502, 504):
            raise RemoteUnreachable(f"remote server gateway error {resp.status_code}")
        raise_for_error(resp, "remote server")
        return resp

    def health(self) -> bool:
        try:
            return self.http.get("/v1/health", timeout=2.0).is_success
        except httpx.TransportError:
            return False

    def put_seed(self, client_id: bytes, seed: bytes) -> None:
        self._request("PUT", f"/v1/seeds/{client_id.hex()}", json={"seed": seed.hex()})

    def get_seed(self, client_id: bytes) -> bytes:
        resp = self._request("GET", f"/v1/seeds/{client_id.hex()}")
        return bytes.fromhex(SeedResponse.model_validate(resp.json()).seed)

    def put_blob(self, client_id: bytes, file_id: str, blob_bytes: bytes) -> None:
        self._request(
            "PUT",
            f"/v1/backups/{client_id.hex()}/{quote_segment(file_id)}",
            content=blob_bytes,
            headers={"Content-Type": "application/octet-stream"},
        )

    def get_blob(self, client_id: bytes, file_id: str) -> bytes:
        return self._request("GET", f"/v1/backups/{client_id.hex()}/{quote_segment(file_id)}").content

    def list_blobs(self, client_id: bytes) -> list[BlobListEntry]:
        resp = self._request("GET", f"/v1/backups/{client_id.hex()}")
        return [BlobListEntry.model_validate(x) for x in resp.json()]
