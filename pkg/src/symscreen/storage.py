"""Append-only newline-delimited record logs with replay.

No external database: each entity gets one JSONL log; service state is an
in-memory index rebuilt by replaying the log at startup. All appends go
through a single writer lock and are flushed to disk before returning.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path


class AppendLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def replay(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def compact(self, records: list[dict]) -> None:
        """Snapshot compaction: atomically rewrite the log to the given records."""
        tmp = self.path.with_suffix(".tmp")
        with self._lock:
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            tmp.replace(self.path)
