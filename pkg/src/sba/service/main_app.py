"""HTTP surface of the main cloud."""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, Query, Request, Response
from fastapi.concurrency import run_in_threadpool

from ..errors import Unauthorized, ValidationFailed
from ..main_cloud import Caller, MainCloud
from ..protocol import (
    HEADER_DIGEST,
    HEADER_LENGTH,
    FileRecordModel,
    HealthResponse,
    RecoverAllResponse,
    RegisterResponse,
    UploadRequest,
    VerifyResponse,
    parse_client_id,
)
from ..storage import Action
from .common import install_error_handlers


def _own_client(caller: Caller) -> bytes:
    if caller.client_id is None:
        raise ValidationFailed("caller", "file endpoints act on a client's own files; use a client token")
    return caller.client_id


def create_main_app(cloud: MainCloud) -> FastAPI:
    app = FastAPI(title="sba main cloud")
    app.state.cloud = cloud
    install_error_handlers(app)

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        reachable = cloud.remote.health()
        return HealthResponse(
            status="ok" if reachable else "degraded",
            role="main",
            remote="reachable" if reachable else "unreachable",
            pending_intents=cloud.pending_intents(),
        )

    @app.post("/v1/clients", status_code=201)
    def register(request: Request) -> RegisterResponse:
        cloud.authenticate(request.headers, Action.REGISTER, admin_only=True)
        client_id, token = cloud.register_client()
        return RegisterResponse(client_id=client_id.hex(), token=token)

    @app.delete("/v1/clients/{client_id}", status_code=204)
    def deregister(client_id: str, request: Request) -> Response:
        cloud.authenticate(request.headers, Action.DELETE, client_id, admin_only=True)
        cloud.remove_client(parse_client_id(client_id))
        return Response(status_code=204)

    @app.get("/v1/files")
    def list_files(request: Request) -> list[FileRecordModel]:
        caller = cloud.authenticate(request.headers, Action.VERIFY)
        return [FileRecordModel.from_record(r) for r in cloud.list_files(_own_client(caller))]

    @app.put("/v1/files/{file_id:path}")
    async def put_file(file_id: str, request: Request) -> FileRecordModel:
        body = await request.body()

        def work():
            caller = cloud.authenticate(request.headers, Action.PUT, file_id)
            req = UploadRequest.from_headers(_own_client(caller), file_id, request.headers, body)
            if cloud.pending_intents():
                cloud.reconcile()
            return cloud.put_file(caller, req)

        return FileRecordModel.from_record(await run_in_threadpool(work))

    @app.get("/v1/files/{file_id:path}")
    def get_file(file_id: str, request: Request) -> Response:
        caller = cloud.authenticate(request.headers, Action.GET, file_id)
        data, rec = cloud.get_file(caller, _own_client(caller), file_id)
        headers = {HEADER_LENGTH: str(rec.length), HEADER_DIGEST: rec.digest.hex()}
        return Response(data, media_type="application/octet-stream", headers=headers)

    @app.delete("/v1/files/{file_id:path}", status_code=204)
    def delete_file(file_id: str, request: Request) -> Response:
        caller = cloud.authenticate(request.headers, Action.DELETE, file_id)
        cloud.delete_file(caller, _own_client(caller), file_id)
        return Response(status_code=204)

    @app.post("/v1/files/{file_id:path}/recover")
    def recover_file(file_id: str, request: Request, force: bool = False) -> FileRecordModel:
        caller = cloud.authenticate(request.headers, Action.RECOVER, file_id)
        return FileRecordModel.from_record(cloud.recover_file(caller, _own_client(caller), file_id, force=force))

    @app.post("/v1/recover")
    def recover_all(request: Request, client_id: Optional[str] = Query(None)) -> RecoverAllResponse:
        caller = cloud.authenticate(request.headers, Action.RECOVER)
        target = _scope(caller, client_id)
        return RecoverAllResponse(results=cloud.recover_all(caller, target))

    @app.get("/v1/verify")
    def verify(request: Request, mirror: bool = False, client_id: Optional[str] = Query(None)) -> VerifyResponse:
        caller = cloud.authenticate(request.headers, Action.VERIFY)
        return cloud.verify(caller, _scope(caller, client_id), mirror=mirror)

    return app


def _scope(caller: Caller, client_id: Optional[str]) -> Optional[bytes]:
    """Admins may target one client or all; clients only ever see their own files."""
    if caller.is_admin:
        return parse_client_id(client_id) if client_id else None
    if client_id and parse_client_id(client_id) != caller.client_id:
        raise Unauthorized("clients may only act on their own files")
    return caller.client_id
