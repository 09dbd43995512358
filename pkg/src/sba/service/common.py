from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..errors import SBAError
from ..protocol import HTTP_STATUS, ErrorCode, ErrorResponse

log = logging.getLogger(__name__)


def error_response(code: ErrorCode, message: str, detail: dict | None = None) -> JSONResponse:
    body = ErrorResponse(code=code, message=message, detail=detail or {})
    return JSONResponse(body.model_dump(mode="json"), status_code=HTTP_STATUS[code])


def install_error_handlers(app: FastAPI) -> None:
    @app.exception_handler(SBAError)
    async def _sba_error(request: Request, exc: SBAError) -> JSONResponse:
        detail = {k: v for k, v in exc.detail.items() if isinstance(v, (str, int, float, bool))}
        return error_response(ErrorCode(exc.code), exc.message, detail)

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        return error_response(ErrorCode.VALIDATION_FAILED, "malformed request", {"check": "request"})

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception) -> JSONResponse:
        log.exception("unhandled error on %s %s", request.method, request.url.path)
        return error_response(ErrorCode.INTERNAL, "internal server error")
