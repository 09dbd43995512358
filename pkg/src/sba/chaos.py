"""Out-of-band fault injection on a store's data directory (test use only).

Reads ``manifest.json`` directly and damages blob files without telling the
running service, which is exactly how a disk fault looks to it.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import NotFound, ValidationFailed
from .storage import escape_file_id

ACTIONS = ("delete", "corrupt")


@dataclass
class ChaosEvent:
    client_id: str
    file_id: str
    action: str
    path: str
    byte_offset: Optional[int] = None


def _records(data_dir: Path) -> list[dict]:
    try:
        doc = json.loads((data_dir / "manifest.json").read_text("utf-8"))
    except FileNotFoundError:
        raise NotFound(f"no store manifest under {data_dir}") from None
    return doc.get("files", [])


def payload_offset(file_id: str) -> int:
    """Offset of the encoded payload inside a serialized backup blob."""
    return 22 + len(file_id.encode("utf-8")) + 40


def inject(
    data_dir: str | Path,
    action: str,
    target: Optional[str] = None,
    *,
    all_files: bool = False,
    byte_offset: int = 0,
    client_id: Optional[str] = None,
) -> list[ChaosEvent]:
    """Delete a blob or flip every bit of one byte in it.

    ``target`` selects a file_id (across all clients unless ``client_id``
    narrows it); ``all_files`` hits every blob on disk.
    """
    if action not in ACTIONS:
        raise ValidationFailed("action", f"action must be one of {ACTIONS}")
    if not all_files and target is None:
        raise ValidationFailed("target", "give a file_id or --all")
    data_dir = Path(data_dir)
    events = []
    for rec in _records(data_dir):
        if client_id is not None and rec["client_id"] != client_id:
            continue
        if not all_files and rec["file_id"] != target:
            continue
        path = data_dir / "blobs" / rec["client_id"] / escape_file_id(rec["file_id"])
        if not path.exists():
            continue
        if action == "delete":
            path.unlink()
            events.append(ChaosEvent(rec["client_id"], rec["file_id"], action, str(path)))
            continue
        size = path.stat().st_size
        if not 0 <= byte_offset < size:
            if all_files:
                continue
            raise ValidationFailed("byte_offset", f"offset {byte_offset} outside {size}-byte blob {rec['file_id']!r}")
        with open(path, "r+b") as fh:
            fh.seek(byte_offset)
            old = fh.read(1)
            fh.seek(byte_offset)
            fh.write(bytes([old[0] ^ 0xFF]))
        events.append(ChaosEvent(rec["client_id"], rec["file_id"], action, str(path), byte_offset))
    if not events:
        raise NotFound(f"no stored blob matches {target!r}" if target else "no stored blobs")
    return events


def wipe_blobs(data_dir: str | Path) -> int:
    """Remove the whole blob directory. Returns the number of files destroyed."""
    blobs = Path(data_dir) / "blobs"
    count = sum(1 for p in blobs.rglob("*") if p.is_file())
    shutil.rmtree(blobs, ignore_errors=True)
    blobs.mkdir()
    return count
