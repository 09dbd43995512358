"""HTTP surface of the remote backup server. Only the main cloud calls it."""

from __future__ import annotations

from fastapi import Depends, FastAPI, Request, Response
from fastapi.concurrency import run_in_threadpool

from ..errors import Unauthorized
from ..protocol import BlobListEntry, HealthResponse, SeedBody, SeedResponse, parse_client_id, secret_matches
from ..remote_server import RemoteServer
from .common import install_error_handlers


def create_remote_app(server: RemoteServer, shared_secret: str) -> FastAPI:
    app = FastAPI(title="sba remote server")
    app.state.server = server
    install_error_handlers(app)

    def require_main(request: Request) -> None:
        if not secret_matches(request.headers, shared_secret):
            raise Unauthorized("server-to-server secret required")

    guarded = [Depends(require_main)]

    @app.get("/v1/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", role="remote")

    @app.put("/v1/seeds/{client_id}", dependencies=guarded)
    def put_seed(client_id: str, body: SeedBody, response: Response) -> SeedResponse:
        created = server.store_seed(parse_client_id(client_id), bytes.fromhex(body.seed))
        response.status_code = 201 if created else 200
        return SeedResponse(client_id=client_id, seed=body.seed)

    @app.get("/v1/seeds/{client_id}", dependencies=guarded)
    def get_seed(client_id: str) -> SeedResponse:
        return SeedResponse(client_id=client_id, seed=server.get_seed(parse_client_id(client_id)).hex())

    @app.put("/v1/backups/{client_id}/{file_id:path}", dependencies=guarded)
    async def put_backup(client_id: str, file_id: str, request: Request) -> BlobListEntry:
        cid = parse_client_id(client_id)
        body = await request.body()
        return await run_in_threadpool(server.store_blob, cid, file_id, body)

    @app.get("/v1/backups/{client_id}/{file_id:path}", dependencies=guarded)
    def get_backup(client_id: str, file_id: str) -> Response:
        data = server.get_blob(parse_client_id(client_id), file_id)
        return Response(data, media_type="application/octet-stream")

    @app.get("/v1/backups/{client_id}", dependencies=guarded)
    def list_backups(client_id: str) -> list[BlobListEntry]:
        return server.list_blobs(parse_client_id(client_id))

    return app
