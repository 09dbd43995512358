import socket

import pytest
from fastapi.testclient import TestClient

from sba.cluster import LocalCluster
from sba.codec import compute_digest
from sba.main_cloud import ADMIN, Caller, MainCloud
from sba.protocol import UploadRequest
from sba.remote_client import RemoteClient
from sba.remote_server import RemoteServer
from sba.service import create_main_app, create_remote_app

SHARED = "shared-secret"
ADMIN_SECRET = "admin-secret"


def closed_port_url() -> str:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    return f"http://127.0.0.1:{port}"


def upload(cloud: MainCloud, caller: Caller, file_id: str, data: bytes):
    return cloud.put_file(caller, UploadRequest(caller.client_id, file_id, len(data), compute_digest(data), data))


class Env:
    """A remote server behind a TestClient and a main cloud talking to it."""

    def __init__(self, tmp_path, **cloud_kwargs):
        self.tmp_path = tmp_path
        self.remote_server = RemoteServer(tmp_path / "remote")
        self.remote_http = TestClient(create_remote_app(self.remote_server, SHARED))
        self.cloud_kwargs = cloud_kwargs
        self.cloud = self.make_cloud()
        self.admin = Caller(ADMIN)

    def make_cloud(self, **overrides) -> MainCloud:
        kwargs = {"admin_secret": ADMIN_SECRET, **self.cloud_kwargs, **overrides}
        return MainCloud(self.tmp_path / "main", RemoteClient(shared_secret=SHARED, http=self.remote_http), **kwargs)

    def restart(self, **overrides) -> MainCloud:
        self.cloud.close()
        self.cloud = self.make_cloud(**overrides)
        return self.cloud

    def register(self) -> tuple[Caller, str]:
        cid, token = self.cloud.register_client()
        return Caller(cid.hex(), cid), token

    def put(self, caller: Caller, file_id: str, data: bytes):
        return upload(self.cloud, caller, file_id, data)

    def take_remote_down(self) -> None:
        self.cloud.remote = RemoteClient(closed_port_url(), SHARED, timeout=2)

    def bring_remote_up(self) -> None:
        self.cloud.remote = RemoteClient(shared_secret=SHARED, http=self.remote_http)

    def main_http(self) -> TestClient:
        return TestClient(create_main_app(self.cloud))

    def close(self) -> None:
        self.cloud.close()
        self.remote_server.close()


@pytest.fixture
def env(tmp_path):
    e = Env(tmp_path)
    yield e
    e.close()


@pytest.fixture
def cluster(tmp_path):
    with LocalCluster(tmp_path, admin_secret=ADMIN_SECRET, shared_secret=SHARED) as c:
        yield c


# -- acceptance report ---------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    summary = next((v for k, v in item.user_properties if k == "summary"), "")
    verdict = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    _criteria[number] = (verdict, title, summary)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title, summary = _criteria[number]
        terminalreporter.write_line(f"[{verdict}] criterion {number}: {title}" + (f" | {summary}" if summary else ""))
