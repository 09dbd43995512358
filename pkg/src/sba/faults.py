"""Cooperative crash-injection points.

Stores and services call ``hook(point)`` at every step where a real process
could die. Tests install a hook that raises :class:`SimulatedCrash`; a
server started with ``SBA_CRASH_POINT`` set exits the process for real.
"""

from __future__ import annotations

import os
from typing import Callable, Optional

FaultHook = Callable[[str], None]

ENV_VAR = "SBA_CRASH_POINT"

# Order matters: this is the sequence a successful main-cloud put walks through.
PUT_FILE_POINTS = (
    "intent.staged",
    "storage.tmp_written",
    "storage.journaled",
    "storage.renamed",
    "storage.manifest_written",
    "main.local_written",
    "main.remote_pushed",
    "main.audited",
)


class SimulatedCrash(BaseException):
    """Raised by test hooks. BaseException so no ``except Exception`` swallows it."""

    def __init__(self, point: str) -> None:
        super().__init__(point)
        self.point = point


def noop(point: str) -> None:
    pass


def crash_at(target: str, *, after: int = 0) -> FaultHook:
    """Hook that raises at the ``after``-th (0-based) visit of ``target``."""
    seen = 0

    def hook(point: str) -> None:
        nonlocal seen
        if point == target:
            if seen == after:
                raise SimulatedCrash(point)
            seen += 1

    return hook


def recording() -> tuple[FaultHook, list[str]]:
    visited: list[str] = []
    return visited.append, visited


def from_env() -> Optional[FaultHook]:
    """Hook that hard-exits the process at ``$SBA_CRASH_POINT``, or None when unset."""
    target = os.environ.get(ENV_VAR)
    if not target:
        return None

    def hook(point: str) -> None:
        if point == target:
            os._exit(137)

    return hook
