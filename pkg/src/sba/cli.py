"""``sba`` command line: run a server role, act as a client, inject faults, run drills.

Exit codes: 0 ok, 1 internal, 2 auth, 3 validation, 4 network, 5 integrity,
6 not found, 7 drill infrastructure failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys
import uuid
from pathlib import Path
from typing import Any, Callable, Optional

import click

from . import chaos as chaos_mod
from .errors import SBAError
from .protocol import EXIT_CODES, EXIT_INFRA, EXIT_INTERNAL, ErrorCode

DEFAULT_PROFILE = Path("~/.sba/profile.json")
PROFILE_ENV = "SBA_PROFILE"

_RECOVERY_HINT = "hint: run `sba client recover {file_id}` to restore it from the remote backup"


def exit_code_for(code: str) -> int:
    try:
        return EXIT_CODES[ErrorCode(code)]
    except ValueError:
        return EXIT_INTERNAL


def _emit(as_json: bool, payload: dict[str, Any], text: str) -> None:
    if as_json:
        click.echo(json.dumps(payload, indent=2, default=str))
    elif text:
        click.echo(text)


def _fail(as_json: bool, code: str, message: str, hint: str = "") -> None:
    if as_json:
        click.echo(json.dumps({"ok": False, "code": code, "message": message}))
    else:
        click.echo(f"error: {code}: {message}", err=True)
        if hint:
            click.echo(hint, err=True)
    sys.exit(exit_code_for(code))


def json_option(fn: Callable) -> Callable:
    return click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")(fn)


def handles_errors(hint: Optional[Callable[[dict], str]] = None) -> Callable:
    def wrap(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except SBAError as exc:
                text = hint(kwargs) if hint and exc.code in ("not_found", "integrity_violation") else ""
                _fail(kwargs.get("as_json", False), exc.code, exc.message, text)

        return inner

    return wrap


# -- profiles ----------------------------------------------------------


def profile_path(explicit: Optional[str]) -> Path:
    return Path(explicit or os.environ.get(PROFILE_ENV) or DEFAULT_PROFILE).expanduser()


def write_profile(path: Path, doc: dict[str, str]) -> None:
    """Write the profile readable by its owner only (it holds a bearer token)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    os.replace(tmp, path)


def read_profile(path: Path) -> dict[str, str]:
    try:
        doc = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise click.ClickException(f"no profile at {path}; run `sba client register` first") from None
    for field in ("main_url", "client_id", "auth_token"):
        if field not in doc:
            raise click.ClickException(f"profile {path} lacks {field!r}")
    return doc


def _client(profile: Optional[str]):
    from .client import MainClient

    doc = read_profile(profile_path(profile))
    return MainClient(doc["main_url"], doc["auth_token"]), doc


# -- root --------------------------------------------------------------


class ExitCodeGroup(click.Group):
    """Click exits 2 on usage errors, which would read as an auth failure here; use 3."""

    def main(self, *args: Any, standalone_mode: bool = True, **kwargs: Any) -> Any:
        if not standalone_mode:
            return super().main(*args, standalone_mode=False, **kwargs)
        try:
            super().main(*args, standalone_mode=False, **kwargs)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_CODES[ErrorCode.VALIDATION_FAILED])
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_INTERNAL)
        sys.exit(0)


@click.group(cls=ExitCodeGroup)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """Seed-block backup: main cloud, remote server, clients and drills."""
    import logging

    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


# -- servers -----------------------------------------------------------


def _split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


@click.group("server", cls=ExitCodeGroup)
def server() -> None:
    """Run a server role in the foreground."""


def _announce(as_json: bool, role: str, host: str, port: int, data_dir: Path) -> None:
    text = f"sba {role} listening on http://{host}:{port} (data {data_dir})"
    _emit(as_json, {"role": role, "url": f"http://{host}:{port}", "data_dir": str(data_dir)}, text)


@server.command("main")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@json_option
def server_main_cmd(config_path: str, as_json: bool) -> None:
    """Run the main cloud."""
    import uvicorn

    from .main_cloud import MainCloud, MainConfig
    from .service import create_main_app

    config = MainConfig.model_validate_json(Path(config_path).read_text("utf-8"))
    cloud = MainCloud.from_config(config)
    host, port = _split_address(config.listen_address)
    _announce(as_json, "main", host, port, config.data_dir)
    uvicorn.run(create_main_app(cloud), host=host, port=port, log_level="warning")


@server.command("remote")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@json_option
def server_remote_cmd(config_path: str, as_json: bool) -> None:
    """Run the remote backup server."""
    import uvicorn

    from .remote_server import RemoteConfig, RemoteServer
    from .service import create_remote_app

    config = RemoteConfig.model_validate_json(Path(config_path).read_text("utf-8"))
    remote = RemoteServer.from_config(config)
    host, port = _split_address(config.listen_address)
    _announce(as_json, "remote", host, port, config.data_dir)
    uvicorn.run(create_remote_app(remote, config.shared_secret), host=host, port=port, log_level="warning")


main.add_command(server)
server_main = server  # `sba-server main|remote --config ...`


# -- client ------------------------------------------------------------


@main.group()
def client() -> None:
    """Talk to a main cloud as a registered client."""


profile_option = click.option("--profile", envvar=PROFILE_ENV, help="Profile path (default ~/.sba/profile.json).")


@client.command("register")
@click.option("--main-url", required=True)
@click.option("--admin-secret", required=True, envvar="SBA_ADMIN_SECRET")
@profile_option
@json_option
@handles_errors()
def cmd_register(main_url: str, admin_secret: str, profile: Optional[str], as_json: bool) -> None:
    """Register a new client and save its profile."""
    from .client import MainClient

    with MainClient(main_url) as mc:
        reg = mc.register(admin_secret)
    path = profile_path(profile)
    write_profile(path, {"main_url": main_url, "client_id": reg.client_id, "auth_token": reg.token})
    _emit(as_json, {"ok": True, "client_id": reg.client_id, "profile": str(path)}, reg.client_id)


@client.command("put")
@click.argument("local_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("file_id", required=False)
@profile_option
@json_option
@handles_errors()
def cmd_put(local_path: str, file_id: Optional[str], profile: Optional[str], as_json: bool) -> None:
    """Upload LOCAL_PATH as FILE_ID (default: its base name)."""
    mc, _ = _client(profile)
    with mc:
        rec = mc.put(file_id or Path(local_path).name, Path(local_path).read_bytes())
    _emit(as_json, {"ok": True, **rec.model_dump(mode="json")}, f"stored {rec.file_id} ({rec.length} bytes, sha256 {rec.digest})")


@client.command("get")
@click.argument("file_id")
@click.argument("out_path", type=click.Path(dir_okay=False))
@profile_option
@json_option
@handles_errors(hint=lambda kw: _RECOVERY_HINT.format(file_id=kw["file_id"]))
def cmd_get(file_id: str, out_path: str, profile: Optional[str], as_json: bool) -> None:
    """Download FILE_ID to OUT_PATH. OUT_PATH is written only once verified."""
    mc, _ = _client(profile)
    with mc:
        data = mc.get(file_id)  # digest-checked
    out = Path(out_path)
    tmp = out.with_name(f".{out.name}.{uuid.uuid4().hex}.part")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, out)
    finally:
        tmp.unlink(missing_ok=True)
    _emit(as_json, {"ok": True, "file_id": file_id, "path": str(out), "length": len(data)}, f"wrote {len(data)} bytes to {out}")


@client.command("rm")
@click.argument("file_id")
@profile_option
@json_option
@handles_errors()
def cmd_rm(file_id: str, profile: Optional[str], as_json: bool) -> None:
    """Delete FILE_ID from the main store (the remote backup is kept)."""
    mc, _ = _client(profile)
    with mc:
        mc.delete(file_id)
    _emit(as_json, {"ok": True, "file_id": file_id}, f"deleted {file_id}")


@client.command("ls")
@profile_option
@json_option
@handles_errors()
def cmd_ls(profile: Optional[str], as_json: bool) -> None:
    """List this client's files."""
    mc, _ = _client(profile)
    with mc:
        files = mc.list_files()
    lines = "\n".join(f"{f.status:8} {f.length:>12} {f.file_id}" for f in files)
    _emit(as_json, {"ok": True, "files": [f.model_dump(mode="json") for f in files]}, lines)


@client.command("recover")
@click.argument("file_id", required=False)
@click.option("--all", "all_files", is_flag=True, help="Recover every missing or corrupt file.")
@click.option("--force", is_flag=True, help="Recover even if the file looks healthy.")
@click.option("--admin-secret", envvar="SBA_ADMIN_SECRET", help="With --all: act as admin across every client.")
@click.option("--main-url", help="Main cloud URL (admin mode without a profile).")
@profile_option
@json_option
@handles_errors()
def cmd_recover(
    file_id: Optional[str],
    all_files: bool,
    force: bool,
    admin_secret: Optional[str],
    main_url: Optional[str],
    profile: Optional[str],
    as_json: bool,
) -> None:
    """Restore FILE_ID (or --all) from the remote backup."""
    from .client import MainClient

    if bool(file_id) == all_files:
        raise click.UsageError("give exactly one of FILE_ID or --all")
    if all_files and admin_secret:
        url = main_url or read_profile(profile_path(profile))["main_url"]
        mc = MainClient(url, admin_secret)
    else:
        mc, _ = _client(profile)
    with mc:
        if not all_files:
            rec = mc.recover(file_id, force=force)
            _emit(as_json, {"ok": True, **rec.model_dump(mode="json")}, f"recovered {rec.file_id} ({rec.length} bytes)")
            return
        report = mc.recover_all()
    failed = report.failed
    lines = [f"{r.outcome:20} {r.file_id} ({r.prior_status})" for r in report.results]
    lines.append(f"{len(report.results) - len(failed)} restored, {len(failed)} failed")
    _emit(as_json, {"ok": not failed, **report.model_dump(mode="json")}, "\n".join(lines))
    if failed:
        sys.exit(exit_code_for(failed[0].outcome))


@client.command("verify")
@click.option("--mirror", is_flag=True, help="Also check every file against its remote backup.")
@click.option("--admin-secret", envvar="SBA_ADMIN_SECRET", help="Verify every client's files as admin.")
@click.option("--main-url")
@profile_option
@json_option
@handles_errors()
def cmd_verify(mirror: bool, admin_secret: Optional[str], main_url: Optional[str], profile: Optional[str], as_json: bool) -> None:
    """Re-check stored files against their digests."""
    from .client import MainClient

    if admin_secret:
        mc = MainClient(main_url or read_profile(profile_path(profile))["main_url"], admin_secret)
    else:
        mc, _ = _client(profile)
    with mc:
        report = mc.verify(mirror=mirror)
    statuses = [f.status for f in report.files]
    healthy = all(s == "present" for s in statuses) and not report.mirror_problems
    lines = [f"{f.status:8} {f.file_id}" for f in report.files]
    lines += [f"mirror: {p.problem} {p.file_id or ''}" for p in report.mirror_problems]
    _emit(as_json, {"ok": healthy, **report.model_dump(mode="json")}, "\n".join(lines) or "no files")
    if "corrupt" in statuses or report.mirror_problems:
        sys.exit(exit_code_for("integrity_violation"))
    if "missing" in statuses:
        sys.exit(exit_code_for("not_found"))


# -- chaos -------------------------------------------------------------


@main.command("chaos")
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("action", type=click.Choice(chaos_mod.ACTIONS))
@click.argument("target", required=False)
@click.option("--all", "all_files", is_flag=True)
@click.option("--byte-offset", default=0, show_default=True, type=int)
@click.option("--client", "client_id", help="Only touch this client's files (hex id).")
@json_option
@handles_errors()
def cmd_chaos(
    data_dir: str, action: str, target: Optional[str], all_files: bool, byte_offset: int, client_id: Optional[str], as_json: bool
) -> None:
    """TEST ONLY: delete or corrupt blobs in a store's DATA_DIR behind the service's back."""
    if bool(target) == all_files:
        raise click.UsageError("give exactly one of TARGET or --all")
    events = chaos_mod.inject(data_dir, action, target, all_files=all_files, byte_offset=byte_offset, client_id=client_id)
    lines = [
        f"{e.action}d {e.client_id}/{e.file_id}" + (f" at byte {e.byte_offset}" if e.byte_offset is not None else "")
        for e in events
    ]
    _emit(as_json, {"ok": True, "events": [e.__dict__ for e in events]}, "\n".join(lines))


# -- drills ------------------------------------------------------------


@main.group()
def drill() -> None:
    """End-to-end recovery drills."""


@drill.command("list")
@json_option
def cmd_drill_list(as_json: bool) -> None:
    from .drill import SCENARIOS

    _emit(as_json, {name: s.model_dump(mode="json") for name, s in SCENARIOS.items()}, "\n".join(SCENARIOS))


@drill.command("run")
@click.option("--scenario", required=True, help="Built-in scenario name or path to a scenario JSON file.")
@click.option("--workdir", type=click.Path(file_okay=False), help="Keep scratch stores here instead of a temp dir.")
@json_option
def cmd_drill_run(scenario: str, workdir: Optional[str], as_json: bool) -> None:
    """Run a drill; exit 0 when every file is restored byte-identical."""
    from .cluster import InfraError
    from .drill import load_scenario, run_drill

    try:
        sc = load_scenario(scenario)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--scenario") from None
    try:
        report = run_drill(sc, workdir)
    except InfraError as exc:
        click.echo(f"error: drill infrastructure failed: {exc}", err=True)
        sys.exit(EXIT_INFRA)
    if as_json:
        click.echo(report.to_json())
    else:
        for v in report.verdicts:
            click.echo(f"{v.verdict.value:20} c{v.client_index} {v.file_id} ({v.size} bytes) {v.detail}")
        click.echo(
            f"{report.scenario}: {'PASS' if report.passed else 'FAIL'} "
            f"({report.recoveries_performed} recoveries, {report.bytes_restored} bytes restored, "
            f"fsck_clean={report.fsck_clean}, mirror_clean={report.mirror_clean}, {report.duration_s}s)"
        )
        for note in report.notes:
            click.echo(f"note: {note}")
    sys.exit(0 if report.passed else 1)
