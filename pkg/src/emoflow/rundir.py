"""Run directory persistence: files, append-only audit log, hash manifest.

All writes go through one :class:`RunDirectory` owned by the orchestrator
thread, which makes it the single writer of ``audit.log`` and
``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

from .errors import CorruptRunDirectory

AUDIT_LOG = "audit.log"
MANIFEST = "manifest.json"
# Not covered by the manifest: wall-clock data and the failure note vary run to run.
UNTRACKED = frozenset({MANIFEST, "timing.json", "failure.json"})
AGENTS = frozenset({"planning", "editing", "critic", "orchestrator"})


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def dumps_doc(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2, allow_nan=False) + "\n").encode("utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class RunDirectory:
    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)
        self._manifest: dict[str, str] | None = None
        self._events = 0

    def path(self, rel: str) -> Path:
        return self.root / rel

    def exists(self, rel: str) -> bool:
        return self.path(rel).exists()

    # -- manifest -----------------------------------------------------------

    @property
    def manifest(self) -> dict[str, str]:
        if self._manifest is None:
            p = self.path(MANIFEST)
            self._manifest = json.loads(p.read_text(encoding="utf-8"))["files"] if p.exists() else {}
        return self._manifest

    def _save_manifest(self) -> None:
        _atomic_write(self.path(MANIFEST), dumps_doc({"files": dict(sorted(self.manifest.items()))}))

    def verify(self) -> None:
        """Raise CorruptRunDirectory if any tracked file is missing or altered."""
        if not self.path(MANIFEST).exists():
            raise CorruptRunDirectory([f"{MANIFEST} is missing"])
        problems = []
        for rel, digest in sorted(self.manifest.items()):
            p = self.path(rel)
            if not p.exists():
                problems.append(f"{rel} is missing")
            elif _sha256(p.read_bytes()) != digest:
                problems.append(f"{rel} does not match its recorded hash")
        if problems:
            raise CorruptRunDirectory(problems)

    # -- writes ---------------------------------------------------------------

    def write(self, files: Mapping[str, bytes]) -> None:
        for rel, data in sorted(files.items()):
            _atomic_write(self.path(rel), data)
            if rel not in UNTRACKED:
                self.manifest[rel] = _sha256(data)
        self._save_manifest()

    def write_untracked(self, rel: str, data: bytes) -> None:
        _atomic_write(self.path(rel), data)

    def remove_untracked(self, rel: str) -> None:
        self.path(rel).unlink(missing_ok=True)

    def append_events(self, events: Iterable[tuple[int | None, str, str, dict]]) -> list[dict]:
        """Append ``(branch, agent, event, payload)`` tuples with logical timestamps."""
        p = self.path(AUDIT_LOG)
        if self._events == 0 and p.exists():
            self._events = sum(1 for _ in p.open(encoding="utf-8"))
        lines = []
        records = []
        for branch, agent, event, payload in events:
            if agent not in AGENTS:
                raise ValueError(f"unknown agent {agent!r}")
            rec = {"ts": self._events, "branch": branch, "agent": agent, "event": event, "payload": payload}
            self._events += 1
            records.append(rec)
            lines.append(dumps_line(rec) + "\n")
        if not lines:
            return records
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("a", encoding="utf-8") as fh:
            fh.writelines(lines)
        self.manifest[AUDIT_LOG] = _sha256(p.read_bytes())
        self._save_manifest()
        return records

    # -- reads ----------------------------------------------------------------

    def read_json(self, rel: str) -> Any:
        return json.loads(self.path(rel).read_text(encoding="utf-8"))

    def read_events(self) -> list[dict]:
        p = self.path(AUDIT_LOG)
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line]
