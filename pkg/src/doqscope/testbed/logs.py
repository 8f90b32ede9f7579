"""JSON-lines records of what the testbed did, for oracle checks in tests."""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Optional


class StructuredLog:
    def __init__(self, path: Optional[str | Path] = None):
        self._records: list[dict] = []
        self._lock = threading.Lock()
        self._fp = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fp = path.open("a", encoding="utf-8")

    def write(self, kind: str, **fields) -> dict:
        record = {"ts": time.time(), "kind": kind, **fields}
        with self._lock:
            self._records.append(record)
            if self._fp is not None:
                self._fp.write(json.dumps(record, default=str) + "\n")
                self._fp.flush()
        return record

    def records(self, kind: Optional[str] = None) -> list[dict]:
        with self._lock:
            return [dict(r) for r in self._records if kind is None or r["kind"] == kind]

    def clear(self) -> None:
        with self._lock:
            self._records.clear()

    def close(self) -> None:
        with self._lock:
            if self._fp is not None:
                self._fp.close()
                self._fp = None
