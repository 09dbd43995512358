"""Run both services on local ephemeral ports inside one process."""

from __future__ import annotations

import secrets
import socket
import threading
import time
from pathlib import Path
from typing import Optional

import uvicorn
from fastapi import FastAPI

from . import faults
from .client import MainClient
from .main_cloud import AeadHook, MainCloud
from .remote_client import RemoteClient
from .remote_server import RemoteServer
from .service import create_main_app, create_remote_app


class InfraError(RuntimeError):
    """The test infrastructure (ports, threads, subprocesses) failed, not the product."""


class ServerThread:
    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        self.app = app
        self.host = host
        self.port = port
        self._server: Optional[uvicorn.Server] = None
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> ServerThread:
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.host, self.port))
        except OSError as exc:
            raise InfraError(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        self.port = sock.getsockname()[1]
        config = uvicorn.Config(self.app, log_level="warning", lifespan="off", timeout_keep_alive=30)
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, kwargs={"sockets": [sock]}, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                raise InfraError(f"server on port {self.port} did not start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10)


class LocalCluster:
    """A remote server and a main cloud wired together over real HTTP on localhost."""

    def __init__(
        self,
        workdir: str | Path,
        *,
        admin_secret: Optional[str] = None,
        shared_secret: Optional[str] = None,
        encryption_key: Optional[bytes] = None,
        main_fault_hook: Optional[faults.FaultHook] = None,
    ):
        self.workdir = Path(workdir)
        self.main_dir = self.workdir / "main"
        self.remote_dir = self.workdir / "remote"
        self.admin_secret = admin_secret or secrets.token_hex(16)
        self.shared_secret = shared_secret or secrets.token_hex(16)
        self.encryption_key = encryption_key
        self.main_fault_hook = main_fault_hook
        self.remote_server: Optional[RemoteServer] = None
        self.cloud: Optional[MainCloud] = None
        self._remote_thread: Optional[ServerThread] = None
        self._main_thread: Optional[ServerThread] = None

    @property
    def main_url(self) -> str:
        assert self._main_thread is not None
        return self._main_thread.url

    @property
    def remote_url(self) -> str:
        assert self._remote_thread is not None
        return self._remote_thread.url

    def start_remote(self) -> None:
        self.remote_server = RemoteServer(self.remote_dir)
        self._remote_thread = ServerThread(create_remote_app(self.remote_server, self.shared_secret)).start()

    def stop_remote(self) -> None:
        if self._remote_thread is not None:
            self._remote_thread.stop()
            self._remote_thread = None
        if self.remote_server is not None:
            self.remote_server.close()
            self.remote_server = None

    def restart_remote(self) -> None:
        """Bring the remote back on the same port it had before."""
        port = int(self.cloud.remote.http.base_url.port) if self.cloud else 0
        self.remote_server = RemoteServer(self.remote_dir)
        self._remote_thread = ServerThread(create_remote_app(self.remote_server, self.shared_secret), port=port).start()

    def make_cloud(self, fault_hook: Optional[faults.FaultHook] = None) -> MainCloud:
        encryption = AeadHook(self.encryption_key) if self.encryption_key else None
        return MainCloud(
            self.main_dir,
            RemoteClient(self.remote_url, self.shared_secret),
            admin_secret=self.admin_secret,
            encryption=encryption,
            fault_hook=fault_hook,
        )

    def start_main(self) -> None:
        self.cloud = self.make_cloud(self.main_fault_hook)
        self._main_thread = ServerThread(create_main_app(self.cloud)).start()

    def stop_main(self) -> None:
        if self._main_thread is not None:
            self._main_thread.stop()
            self._main_thread = None
        if self.cloud is not None:
            self.cloud.remote.close()
            self.cloud.close()
            self.cloud = None

    def start(self) -> LocalCluster:
        self.start_remote()
        self.start_main()
        return self

    def stop(self) -> None:
        self.stop_main()
        self.stop_remote()

    def __enter__(self) -> LocalCluster:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()

    def client(self, token: Optional[str] = None) -> MainClient:
        return MainClient(self.main_url, token)

    def admin(self) -> MainClient:
        return MainClient(self.main_url, self.admin_secret)
