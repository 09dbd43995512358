"""Thin HTTP client for the main cloud, used by the CLI and the drill harness."""

from __future__ import annotations

from typing import Optional

import httpx

from .codec import compute_digest
from .errors import IntegrityViolation, RemoteUnreachable
from .protocol import (
    HEADER_DIGEST,
    FileRecordModel,
    HealthResponse,
    RecoverAllResponse,
    RegisterResponse,
    VerifyResponse,
    upload_headers,
)
from .remote_client import quote_segment, raise_for_error


class MainClient:
    def __init__(self, base_url: str, token: Optional[str] = None, *, http: Optional[httpx.Client] = None, timeout: float = 60.0):
        self.http = http or httpx.Client(base_url=base_url, timeout=timeout)
        self.token = token

    def close(self) -> None:
        self.http.close()

    def __enter__(self) -> MainClient:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _request(self, method: str, path: str, *, token: Optional[str] = None, **kwargs) -> httpx.Response:
        headers = dict(kwargs.pop("headers", {}))
        token = token or self.token
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self.http.request(method, path, headers=headers, **kwargs)
        except httpx.TransportError as exc:
            raise RemoteUnreachable(f"cannot reach main cloud: {exc}") from None
        raise_for_error(resp, "main cloud")
        return resp

    def health(self) -> HealthResponse:
        return HealthResponse.model_validate(self._request("GET", "/v1/health").json())

    def register(self, admin_secret: str) -> RegisterResponse:
        return RegisterResponse.model_validate(self._request("POST", "/v1/clients", token=admin_secret).json())

    def deregister(self, client_id: str, admin_secret: str) -> None:
        self._request("DELETE", f"/v1/clients/{client_id}", token=admin_secret)

    def put(self, file_id: str, data: bytes) -> FileRecordModel:
        resp = self._request(
            "PUT",
            f"/v1/files/{quote_segment(file_id)}",
            content=data,
            headers={**upload_headers(data), "Content-Type": "application/octet-stream"},
        )
        return FileRecordModel.model_validate(resp.json())

    def get(self, file_id: str) -> bytes:
        """Fetch a file and check it against the digest the server reports."""
        resp = self._request("GET", f"/v1/files/{quote_segment(file_id)}")
        declared = resp.headers.get(HEADER_DIGEST)
        if declared is None or compute_digest(resp.content).hex() != declared.lower():
            raise IntegrityViolation(f"downloaded bytes of {file_id!r} do not match the server's digest")
        return resp.content

    def delete(self, file_id: str) -> None:
        self._request("DELETE", f"/v1/files/{quote_segment(file_id)}")

    def list_files(self) -> list[FileRecordModel]:
        return [FileRecordModel.model_validate(x) for x in self._request("GET", "/v1/files").json()]

    def recover(self, file_id: str, *, force: bool = False) -> FileRecordModel:
        resp = self._request("POST", f"/v1/files/{quote_segment(file_id)}/recover", params={"force": force})
        return FileRecordModel.model_validate(resp.json())

    def recover_all(self, *, client_id: Optional[str] = None, token: Optional[str] = None) -> RecoverAllResponse:
        params = {"client_id": client_id} if client_id else {}
        return RecoverAllResponse.model_validate(self._request("POST", "/v1/recover", params=params, token=token).json())

    def verify(self, *, mirror: bool = False, client_id: Optional[str] = None, token: Optional[str] = None) -> VerifyResponse:
        params: dict[str, object] = {"mirror": mirror}
        if client_id:
            params["client_id"] = client_id
        return VerifyResponse.model_validate(self._request("GET", "/v1/verify", params=params, token=token).json())
