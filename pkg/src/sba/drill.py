"""Scripted recovery drills: upload a workload, break the main store, recover, compare.

The harness keeps pristine copies of everything it uploads, so verdicts are
judged against data neither server could have rewritten.
"""

from __future__ import annotations

import enum
import json
import os
import random
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import httpx
from pydantic import BaseModel, Field

from . import chaos, faults
from .client import MainClient
from .cluster import InfraError, LocalCluster
from .codec import compute_digest
from .errors import SBAError
from .main_cloud import Caller
from .protocol import UploadRequest
from .storage import TMP_PREFIX, Status

MAX_WORKERS = 32

# 0, 1, 15/16/17 around one seed width, 4 KiB and 64 KiB
BOUNDARY_SIZES = [0, 1, 15, 16, 17, 4096, 65536]


class Fault(str, enum.Enum):
    DELETE_ONE = "delete_one"
    CORRUPT_ONE = "corrupt_one"
    WIPE_MAIN = "wipe_main"
    KILL_DURING_PUT = "kill_during_put"


class Verdict(str, enum.Enum):
    RESTORED_IDENTICAL = "restored_identical"
    RESTORED_MISMATCH = "restored_mismatch"
    UNRECOVERABLE = "unrecoverable"


class DrillScenario(BaseModel):
    name: str
    num_clients: int = Field(3, ge=1)
    files_per_client: int = Field(5, ge=1)
    file_size_range: tuple[int, int] = (0, 65536)
    fault: Fault
    seed_for_rng: int = Field(0, ge=0, lt=2**64)
    # Sizes assigned in order before falling back to random draws from file_size_range.
    sizes: list[int] = Field(default_factory=list)
    workers: int = Field(MAX_WORKERS, ge=1, le=MAX_WORKERS)
    # kill_during_put only: one crash point, or every point when unset.
    crash_point: Optional[str] = None
    # kill_during_put only: "inprocess" raises at cooperative hooks; "process" really kills a server subprocess.
    mode: Literal["inprocess", "process"] = "inprocess"


class FileVerdict(BaseModel):
    client_index: int
    file_id: str
    size: int
    verdict: Verdict
    detail: str = ""


class RecoveryReport(BaseModel):
    scenario: str
    fault: Fault
    verdicts: list[FileVerdict] = Field(default_factory=list)
    duration_s: float = 0.0
    files_uploaded: int = 0
    bytes_uploaded: int = 0
    bytes_restored: int = 0
    recoveries_performed: int = 0
    intact_checked: int = 0
    intact_mismatches: list[str] = Field(default_factory=list)
    fsck_clean: bool = False
    mirror_clean: bool = False
    notes: list[str] = Field(default_factory=list)

    def count(self, verdict: Verdict) -> int:
        return sum(1 for v in self.verdicts if v.verdict == verdict)

    @property
    def passed(self) -> bool:
        return (
            self.count(Verdict.RESTORED_MISMATCH) == 0
            and self.count(Verdict.UNRECOVERABLE) == 0
            and not self.intact_mismatches
            and self.fsck_clean
            and self.mirror_clean
        )

    def to_json(self) -> str:
        doc = self.model_dump(mode="json")
        doc["passed"] = self.passed
        return json.dumps(doc, indent=2)


SCENARIOS: dict[str, DrillScenario] = {
    s.name: s
    for s in (
        DrillScenario(name="wipe_main", fault=Fault.WIPE_MAIN, sizes=BOUNDARY_SIZES, seed_for_rng=1),
        DrillScenario(name="delete_one", fault=Fault.DELETE_ONE, seed_for_rng=2),
        DrillScenario(name="corrupt_one", fault=Fault.CORRUPT_ONE, file_size_range=(1, 65536), seed_for_rng=3),
        DrillScenario(
            name="kill_during_put", fault=Fault.KILL_DURING_PUT, num_clients=2, files_per_client=3, seed_for_rng=4
        ),
    )
}


def load_scenario(name_or_path: str) -> DrillScenario:
    if name_or_path in SCENARIOS:
        return SCENARIOS[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(f"unknown scenario {name_or_path!r}; built-ins: {', '.join(SCENARIOS)}")
    return DrillScenario.model_validate_json(path.read_text("utf-8"))


def generate_workload(scenario: DrillScenario) -> dict[tuple[int, str], bytes]:
    """Deterministic file contents keyed by (client index, file_id)."""
    rng = random.Random(scenario.seed_for_rng)
    lo, hi = scenario.file_size_range
    files = {}
    n = 0
    for c in range(scenario.num_clients):
        for f in range(scenario.files_per_client):
            size = scenario.sizes[n] if n < len(scenario.sizes) else rng.randint(lo, hi)
            files[(c, f"c{c}-f{f}.bin")] = rng.randbytes(size)
            n += 1
    return files


def _upload(clients: list[MainClient], workload: dict[tuple[int, str], bytes], workers: int) -> None:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(clients[c].put, fid, data) for (c, fid), data in workload.items()]
        for fut in futures:
            fut.result()


def run_drill(scenario: DrillScenario, workdir: Optional[str | Path] = None) -> RecoveryReport:
    """Run one scenario in a scratch directory and report per-file verdicts."""
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix="sba-drill-") as tmp:
            return run_drill(scenario, tmp)
    if scenario.fault == Fault.KILL_DURING_PUT:
        if scenario.mode == "process":
            return _run_kill_process(scenario, Path(workdir))
        return _run_kill_inprocess(scenario, Path(workdir))
    return _run_recovery(scenario, Path(workdir))


def _run_recovery(scenario: DrillScenario, workdir: Path) -> RecoveryReport:
    started = time.monotonic()
    report = RecoveryReport(scenario=scenario.name, fault=scenario.fault)
    workload = generate_workload(scenario)
    rng = random.Random(scenario.seed_for_rng ^ 0x5EED)

    with LocalCluster(workdir) as cluster:
        admin = cluster.admin()
        regs = [admin.register(cluster.admin_secret) for _ in range(scenario.num_clients)]
        clients = [cluster.client(r.token) for r in regs]
        cid_to_index = {r.client_id: i for i, r in enumerate(regs)}
        _upload(clients, workload, scenario.workers)
        report.files_uploaded = len(workload)
        report.bytes_uploaded = sum(len(v) for v in workload.values())

        keys = sorted(workload)
        if scenario.fault == Fault.WIPE_MAIN:
            chaos.wipe_blobs(cluster.main_dir)
            affected = set(keys)
        elif scenario.fault == Fault.DELETE_ONE:
            c, fid = rng.choice(keys)
            chaos.inject(cluster.main_dir, "delete", fid, client_id=regs[c].client_id)
            affected = {(c, fid)}
        else:
            candidates = [k for k in keys if workload[k]] or keys
            c, fid = rng.choice(candidates)
            offset = rng.randrange(len(workload[(c, fid)])) if workload[(c, fid)] else 0
            chaos.inject(cluster.main_dir, "corrupt", fid, client_id=regs[c].client_id, byte_offset=offset)
            affected = {(c, fid)}

        results = admin.recover_all()
        outcome = {(cid_to_index[r.client_id], r.file_id): r for r in results.results}
        report.recoveries_performed = sum(1 for r in results.results if r.outcome == "restored")

        for key in keys:
            c, fid = key
            original = workload[key]
            try:
                got = clients[c].get(fid)
            except SBAError as exc:
                got, err = None, f"{exc.code}: {exc.message}"
            if key in affected:
                if got is None:
                    detail = outcome[key].message if key in outcome else err
                    verdict = Verdict.UNRECOVERABLE
                elif got == original:
                    verdict, detail = Verdict.RESTORED_IDENTICAL, ""
                    report.bytes_restored += len(got)
                else:
                    verdict, detail = Verdict.RESTORED_MISMATCH, "bytes differ from the uploaded original"
                report.verdicts.append(FileVerdict(client_index=c, file_id=fid, size=len(original), verdict=verdict, detail=detail))
            else:
                report.intact_checked += 1
                if got != original:
                    report.intact_mismatches.append(f"c{c}:{fid}")

        check = admin.verify(mirror=True)
        report.fsck_clean = all(f.status == Status.PRESENT.value for f in check.files) and len(check.files) == len(workload)
        report.mirror_clean = not check.mirror_problems
        for c in clients:
            c.close()
        admin.close()

    report.duration_s = round(time.monotonic() - started, 3)
    return report


def _stray_temp_files(root: Path) -> list[Path]:
    return [p for p in root.rglob(f"{TMP_PREFIX}*")]


def _run_kill_inprocess(scenario: DrillScenario, workdir: Path) -> RecoveryReport:
    """Crash a put at each cooperative injection point, restart, check nothing is half-mirrored."""
    started = time.monotonic()
    report = RecoveryReport(scenario=scenario.name, fault=scenario.fault)
    points = [scenario.crash_point] if scenario.crash_point else list(faults.PUT_FILE_POINTS)
    workload = generate_workload(scenario)
    rng = random.Random(scenario.seed_for_rng)

    for n, point in enumerate(points):
        cluster = LocalCluster(workdir / f"point-{n}")
        cluster.start_remote()
        armed = {"on": False}
        trigger = faults.crash_at(point)

        def hook(p: str) -> None:
            if armed["on"]:
                trigger(p)

        try:
            cloud = cluster.make_cloud(hook)
            callers = []
            for _ in range(scenario.num_clients):
                cid, _token = cloud.register_client()
                callers.append(Caller(cid.hex(), cid))
            for (c, fid), data in workload.items():
                cloud.put_file(callers[c], UploadRequest(callers[c].client_id, fid, len(data), compute_digest(data), data))
            report.files_uploaded += len(workload)
            report.bytes_uploaded += sum(len(v) for v in workload.values())

            # The interrupted put either creates a new file or overwrites an existing one.
            c = n % scenario.num_clients
            overwrite = n % 2 == 1
            target = f"c{c}-f0.bin" if overwrite else "interrupted.bin"
            body = rng.randbytes(rng.randint(1, 8192))
            armed["on"] = True
            try:
                cloud.put_file(callers[c], UploadRequest(callers[c].client_id, target, len(body), compute_digest(body), body))
            except faults.SimulatedCrash:
                pass
            else:
                report.notes.append(f"{point}: injection point never reached")
            armed["on"] = False
            cloud.close()  # the "process" is dead; only its files survive

            restarted = cluster.make_cloud()
            key = (callers[c].client_id, target)
            rec = restarted.store.record(key)
            local = restarted.store.read_raw(key)
            try:
                remote_blob = restarted.remote.get_blob(*key)
                remote = restarted._decode_backup(key[0], target, remote_blob, restarted.seed_for(key[0]))
            except SBAError:
                remote = None
            previous = workload.get((c, target))
            if local == body and remote == body and rec is not None and rec.status == Status.PRESENT:
                verdict, detail = Verdict.RESTORED_IDENTICAL, "rolled forward: new content in both stores"
            elif previous is not None and local == previous and remote == previous:
                verdict, detail = Verdict.RESTORED_IDENTICAL, "rolled back: previous content in both stores"
            elif previous is None and rec is None and local is None and remote is None:
                verdict, detail = Verdict.RESTORED_IDENTICAL, "absent from both stores"
            else:
                verdict, detail = Verdict.RESTORED_MISMATCH, f"half-mirrored after crash at {point}"
            report.verdicts.append(
                FileVerdict(client_index=c, file_id=f"{point}:{target}", size=len(body), verdict=verdict, detail=detail)
            )
            if verdict == Verdict.RESTORED_IDENTICAL:
                report.bytes_restored += len(body)

            fsck = restarted.store.fsck()
            stray = _stray_temp_files(cluster.main_dir)
            clean = all(s == Status.PRESENT for _, s in fsck) and not stray and restarted.pending_intents() == 0
            problems = restarted.mirror_problems()
            for (cc, fid), data in workload.items():
                if (cc, fid) == (c, target):
                    continue
                report.intact_checked += 1
                got = restarted.store.read_raw((callers[cc].client_id, fid))
                if got != data:
                    report.intact_mismatches.append(f"{point}:c{cc}:{fid}")
            report.fsck_clean = (report.fsck_clean or n == 0) and clean
            report.mirror_clean = (report.mirror_clean or n == 0) and not problems
            if not clean or problems:
                report.notes.append(f"{point}: fsck_clean={clean} mirror_problems={[p.problem for p in problems]}")
            restarted.remote.close()
            restarted.close()
        finally:
            cluster.stop_remote()

    report.duration_s = round(time.monotonic() - started, 3)
    return report


def _write_config(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2), "utf-8")
    return path


def _spawn(config: Path, role: str, env: dict[str, str]) -> subprocess.Popen:
    return subprocess.Popen(
        [sys.executable, "-m", "sba", "server", role, "--config", str(config)],
        env=env,
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
    )


def _wait_healthy(url: str, proc: subprocess.Popen, timeout: float = 20.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise InfraError(f"server exited with {proc.returncode}: {proc.stderr.read().decode()[-500:]}")
        try:
            if httpx.get(f"{url}/v1/health", timeout=1.0).is_success:
                return
        except httpx.TransportError:
            pass
        time.sleep(0.1)
    raise InfraError(f"server at {url} not healthy after {timeout}s")


def _free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _run_kill_process(scenario: DrillScenario, workdir: Path) -> RecoveryReport:
    """Real process kills: a main-cloud subprocess exits hard at each injection point."""
    started = time.monotonic()
    report = RecoveryReport(scenario=scenario.name, fault=scenario.fault)
    points = [scenario.crash_point] if scenario.crash_point else list(faults.PUT_FILE_POINTS)
    workload = generate_workload(scenario)
    rng = random.Random(scenario.seed_for_rng)
    report.fsck_clean = report.mirror_clean = True

    for n, point in enumerate(points):
        root = workdir / f"proc-{n}"
        root.mkdir(parents=True)
        admin_secret, shared = os.urandom(16).hex(), os.urandom(16).hex()
        rport, mport = _free_port(), _free_port()
        remote_cfg = _write_config(
            root / "remote.json",
            {"listen_address": f"127.0.0.1:{rport}", "data_dir": str(root / "remote"), "shared_secret": shared},
        )
        main_cfg = _write_config(
            root / "main.json",
            {
                "listen_address": f"127.0.0.1:{mport}",
                "data_dir": str(root / "main"),
                "remote_url": f"http://127.0.0.1:{rport}",
                "remote_shared_secret": shared,
                "admin_secret": admin_secret,
            },
        )
        env = {k: v for k, v in os.environ.items() if k != faults.ENV_VAR}
        main_url = f"http://127.0.0.1:{mport}"
        remote_proc = _spawn(remote_cfg, "remote", env)
        main_proc = None
        try:
            _wait_healthy(f"http://127.0.0.1:{rport}", remote_proc)
            main_proc = _spawn(main_cfg, "main", env)
            _wait_healthy(main_url, main_proc)
            admin = MainClient(main_url, admin_secret)
            regs = [admin.register(admin_secret) for _ in range(scenario.num_clients)]
            clients = [MainClient(main_url, r.token) for r in regs]
            _upload(clients, workload, scenario.workers)
            report.files_uploaded += len(workload)
            report.bytes_uploaded += sum(len(v) for v in workload.values())
            # restart armed: the next put dies at the injection point
            main_proc.terminate()
            main_proc.wait(timeout=10)
            main_proc = _spawn(main_cfg, "main", {**env, faults.ENV_VAR: point})
            _wait_healthy(main_url, main_proc)

            c = n % scenario.num_clients
            target = f"c{c}-f0.bin" if n % 2 else "interrupted.bin"
            body = rng.randbytes(rng.randint(1, 8192))
            try:
                clients[c].put(target, body)
                report.notes.append(f"{point}: put returned; process did not die")
            except SBAError:
                pass
            main_proc.wait(timeout=10)
            if main_proc.returncode != 137:
                raise InfraError(f"main server exited with {main_proc.returncode}, expected 137")

            main_proc = _spawn(main_cfg, "main", env)
            _wait_healthy(main_url, main_proc)
            previous = workload.get((c, target))
            try:
                got = clients[c].get(target)
            except SBAError:
                got = None
            check = admin.verify(mirror=True)
            if got == body:
                verdict, detail = Verdict.RESTORED_IDENTICAL, "rolled forward"
            elif got is not None and got == previous:
                verdict, detail = Verdict.RESTORED_IDENTICAL, "previous version kept"
            elif got is None and previous is None and all(f.file_id != target for f in check.files):
                verdict, detail = Verdict.RESTORED_IDENTICAL, "absent"
            else:
                verdict, detail = Verdict.RESTORED_MISMATCH, f"inconsistent after kill at {point}"
            report.verdicts.append(FileVerdict(client_index=c, file_id=f"{point}:{target}", size=len(body), verdict=verdict, detail=detail))
            if got == body:
                report.bytes_restored += len(body)
            report.fsck_clean &= all(f.status == Status.PRESENT.value for f in check.files)
            report.mirror_clean &= not check.mirror_problems
            for (cc, fid), data in workload.items():
                if (cc, fid) != (c, target):
                    report.intact_checked += 1
                    if clients[cc].get(fid) != data:
                        report.intact_mismatches.append(f"{point}:c{cc}:{fid}")
        finally:
            for proc in (main_proc, remote_proc):
                if proc is not None and proc.poll() is None:
                    proc.terminate()
                    proc.wait(timeout=10)

    report.duration_s = round(time.monotonic() - started, 3)
    return report
