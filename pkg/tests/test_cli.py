import json
import os
import stat

import pytest
from click.testing import CliRunner

from sba import cli
from sba.protocol import EXIT_CODES, ErrorCode
from sba.storage import Status

from .conftest import ADMIN_SECRET


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv("SBA_PROFILE", str(tmp_path / "profile" / "p.json"))
    monkeypatch.delenv("SBA_ADMIN_SECRET", raising=False)
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(cli.main, [str(a) for a in args], catch_exceptions=False)

    return invoke


@pytest.fixture
def registered(cluster, run, tmp_path):
    result = run("client", "register", "--main-url", cluster.main_url, "--admin-secret", ADMIN_SECRET)
    assert result.exit_code == 0, result.output
    return cluster


def write(tmp_path, name, data):
    path = tmp_path / name
    path.write_bytes(data)
    return path


def test_register_writes_private_profile(registered, tmp_path):
    profile = tmp_path / "profile" / "p.json"
    doc = json.loads(profile.read_text())
    assert set(doc) == {"main_url", "client_id", "auth_token"}
    assert stat.S_IMODE(profile.stat().st_mode) == 0o600


def test_register_wrong_secret(cluster, run, tmp_path):
    result = run("client", "register", "--main-url", cluster.main_url, "--admin-secret", "nope")
    assert result.exit_code == 2
    assert "unauthorized" in result.output
    assert not (tmp_path / "profile" / "p.json").exists()


def test_register_remote_down(cluster, run, tmp_path):
    cluster.stop_remote()
    result = run("client", "register", "--main-url", cluster.main_url, "--admin-secret", ADMIN_SECRET)
    assert result.exit_code == 4
    assert "remote_unreachable" in result.output
    assert not (tmp_path / "profile" / "p.json").exists()


def test_main_unreachable(run):
    from .conftest import closed_port_url

    result = run("client", "register", "--main-url", closed_port_url(), "--admin-secret", "x")
    assert result.exit_code == 4


def test_put_get_round_trip(registered, run, tmp_path):
    data = os.urandom(70_000)
    src = write(tmp_path, "in.bin", data)
    assert run("client", "put", src, "doc").exit_code == 0
    out = tmp_path / "out.bin"
    result = run("client", "get", "doc", out)
    assert result.exit_code == 0, result.output
    assert out.read_bytes() == data
    listing = json.loads(run("client", "ls", "--json").output)
    assert [(f["file_id"], f["length"]) for f in listing["files"]] == [("doc", 70_000)]


def test_put_defaults_file_id_to_basename(registered, run, tmp_path):
    src = write(tmp_path, "report.txt", b"r")
    run("client", "put", src)
    assert json.loads(run("client", "ls", "--json").output)["files"][0]["file_id"] == "report.txt"


@pytest.mark.parametrize("action, code", [("delete", 6), ("corrupt", 5)])
def test_get_after_loss_leaves_no_partial_file(registered, run, tmp_path, action, code):
    run("client", "put", write(tmp_path, "in", b"important"), "f")
    assert run("chaos", registered.main_dir, action, "f").exit_code == 0
    out = tmp_path / "out"
    result = run("client", "get", "f", out)
    assert result.exit_code == code
    assert "sba client recover f" in result.output
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".part")]
    assert run("client", "recover", "f").exit_code == 0
    assert run("client", "get", "f", out).exit_code == 0
    assert out.read_bytes() == b"important"


def test_get_keeps_previous_output_on_failure(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "in", b"new"), "f")
    run("chaos", registered.main_dir, "corrupt", "f")
    out = write(tmp_path, "out", b"previous contents")
    assert run("client", "get", "f", out).exit_code == 5
    assert out.read_bytes() == b"previous contents"


def test_recover_all_after_wipe(registered, run, tmp_path):
    files = {f"f{i}": os.urandom(100 * i) for i in range(5)}
    for name, data in files.items():
        run("client", "put", write(tmp_path, name, data), name)
    result = run("chaos", registered.main_dir, "delete", "--all")
    assert result.exit_code == 0
    assert [s for _, s in registered.cloud.store.fsck()] == [Status.MISSING] * 5
    result = run("client", "recover", "--all", "--json")
    assert result.exit_code == 0, result.output
    assert len(json.loads(result.output)["results"]) == 5
    for name, data in files.items():
        out = tmp_path / f"{name}.out"
        assert run("client", "get", name, out).exit_code == 0
        assert out.read_bytes() == data


def test_admin_recover_all(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "in", b"x"), "f")
    run("chaos", registered.main_dir, "delete", "--all")
    result = run("client", "recover", "--all", "--admin-secret", ADMIN_SECRET, "--main-url", registered.main_url)
    assert result.exit_code == 0, result.output
    assert "1 restored, 0 failed" in result.output


def test_recover_all_reports_unrecoverable(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "in", b"x"), "f")
    run("chaos", registered.main_dir, "delete", "f")
    run("chaos", registered.remote_dir, "delete", "f")
    result = run("client", "recover", "--all")
    assert result.exit_code == 6
    assert "0 restored, 1 failed" in result.output


def test_recover_healthy_needs_force(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "in", b"x"), "f")
    assert run("client", "recover", "f").exit_code == 3
    assert run("client", "recover", "f", "--force").exit_code == 0


def test_verify_and_rm(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "a", b"a"), "a")
    run("client", "put", write(tmp_path, "b", b"b"), "b")
    result = run("client", "verify", "--mirror", "--json")
    assert result.exit_code == 0 and json.loads(result.output)["ok"] is True
    assert run("client", "rm", "a").exit_code == 0
    assert run("client", "verify").exit_code == 6
    run("chaos", registered.main_dir, "corrupt", "b", "--byte-offset", 0)
    assert run("client", "verify").exit_code == 5
    admin = run("client", "verify", "--admin-secret", ADMIN_SECRET, "--json")
    assert admin.exit_code == 5
    assert sorted(f["status"] for f in json.loads(admin.output)["files"]) == ["corrupt", "missing"]


def test_chaos_corrupt_reported_by_fsck(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "in", b"abc"), "f")
    result = run("chaos", registered.main_dir, "corrupt", "f", "--byte-offset", 0, "--json")
    assert json.loads(result.output)["events"][0]["byte_offset"] == 0
    assert [s for _, s in registered.cloud.store.fsck()] == [Status.CORRUPT]


def test_chaos_errors(registered, run, tmp_path):
    run("client", "put", write(tmp_path, "in", b"abc"), "f")
    assert run("chaos", registered.main_dir, "delete", "nope").exit_code == 6
    assert run("chaos", registered.main_dir, "corrupt", "f", "--byte-offset", 3).exit_code == 3
    assert run("chaos", tmp_path, "delete", "--all").exit_code == 6
    assert run("chaos", registered.main_dir, "delete").exit_code == 3


def test_missing_profile(run):
    result = run("client", "ls")
    assert result.exit_code == 3
    assert "register" in result.output


def test_json_error_output(cluster, run):
    result = run("client", "register", "--main-url", cluster.main_url, "--admin-secret", "bad", "--json")
    body = json.loads(result.output)
    assert result.exit_code == 2
    assert body["ok"] is False and body["code"] == "unauthorized" and body["message"]


def test_exit_code_map_is_total_and_distinct_from_reserved():
    assert set(EXIT_CODES) == set(ErrorCode)
    assert all(code in (1, 2, 3, 4, 5, 6) for code in EXIT_CODES.values())
    for code in ErrorCode:
        assert cli.exit_code_for(code.value) == EXIT_CODES[code]
    assert cli.exit_code_for("something_new") == 1


def test_every_command_has_json_flag():
    import click

    def walk(cmd, path):
        if isinstance(cmd, click.Group):
            for name, sub in cmd.commands.items():
                yield from walk(sub, path + [name])
        else:
            yield path, cmd

    for path, cmd in walk(cli.main, []):
        assert any(p.name == "as_json" for p in cmd.params), path


def test_drill_list(run):
    result = run("drill", "list", "--json")
    assert set(json.loads(result.output)) >= {"wipe_main", "delete_one", "corrupt_one", "kill_during_put"}


def test_drill_run_unknown_scenario(run):
    assert run("drill", "run", "--scenario", "no_such_thing").exit_code == 3


def wait_healthy(url, proc, timeout=20.0):
    import time

    import httpx

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        assert proc.poll() is None, proc.stderr.read()
        try:
            if httpx.get(f"{url}/v1/health", timeout=1).status_code == 200:
                return
        except httpx.TransportError:
            time.sleep(0.1)
    raise AssertionError(f"{url} never became healthy")


def test_servers_from_config_files(run, tmp_path):
    import subprocess
    import sys

    from .conftest import closed_port_url

    remote_url, main_url = closed_port_url(), closed_port_url()
    remote_cfg = {"listen_address": remote_url[7:], "data_dir": str(tmp_path / "r"), "shared_secret": "s3"}
    main_cfg = {
        "listen_address": main_url[7:],
        "data_dir": str(tmp_path / "m"),
        "remote_url": remote_url,
        "remote_shared_secret": "s3",
        "admin_secret": ADMIN_SECRET,
    }
    write(tmp_path, "remote.json", json.dumps(remote_cfg).encode())
    write(tmp_path, "main.json", json.dumps(main_cfg).encode())
    procs = []
    try:
        for role in ("remote", "main"):
            cmd = [sys.executable, "-m", "sba", "server", role, "--config", str(tmp_path / f"{role}.json")]
            procs.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True))
            wait_healthy(remote_url if role == "remote" else main_url, procs[-1])
        assert run("client", "register", "--main-url", main_url, "--admin-secret", ADMIN_SECRET).exit_code == 0
        assert run("client", "put", write(tmp_path, "in", b"over the wire"), "f").exit_code == 0
        assert run("client", "get", "f", tmp_path / "out").exit_code == 0
        assert (tmp_path / "out").read_bytes() == b"over the wire"
    finally:
        for proc in reversed(procs):
            proc.terminate()
            proc.wait(10)
    assert (tmp_path / "r" / "manifest.json").exists()
