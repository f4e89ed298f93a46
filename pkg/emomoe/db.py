"""SQLite run ledger."""

from __future__ import annotations

import sqlite3
import uuid
from collections.abc import Mapping
from datetime import datetime
from pathlib import Path
from typing import Any

from emomoe._compat import UTC
from emomoe.config import get_settings

_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    run_id      TEXT PRIMARY KEY,
    command     TEXT NOT NULL,
    config_hash TEXT NOT NULL,
    seed        INTEGER NOT NULL,
    status      TEXT NOT NULL DEFAULT 'running',
    output_dir  TEXT NOT NULL DEFAULT '',
    created_at  TEXT NOT NULL DEFAULT (datetime('now'))
);

CREATE TABLE IF NOT EXISTS stage_checksums (
    run_id TEXT NOT NULL REFERENCES runs(run_id),
    stage  TEXT NOT NULL,
    name   TEXT NOT NULL,
    sha256 TEXT NOT NULL,
    PRIMARY KEY (run_id, stage, name)
);
"""

STATUSES = ("running", "ok", "failed")


def _now_iso() -> str:
    return datetime.now(UTC).isoformat()


class Ledger:
    def __init__(self, db_path: Path | None = None) -> None:
        path = db_path or get_settings().ledger_full_path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(str(path))
        self._conn.row_factory = sqlite3.Row
        self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        self._conn.close()

    # -- runs --

    def start_run(self, command: str, config_hash: str, seed: int, output_dir: str = "") -> str:
        """Record a new run as ``running`` and return its id."""
        run_id = uuid.uuid4().hex
        self._conn.execute(
            """INSERT INTO runs (run_id, command, config_hash, seed, status, output_dir, created_at)
               VALUES (?, ?, ?, ?, 'running', ?, ?)""",
            (run_id, command, config_hash, seed, output_dir, _now_iso()),
        )
        self._conn.commit()
        return run_id

    def finish_run(self, run_id: str, status: str) -> None:
        if status not in STATUSES:
            raise ValueError(f"unknown run status {status!r}")
        self._conn.execute("UPDATE runs SET status = ? WHERE run_id = ?", (status, run_id))
        self._conn.commit()

    def get_run(self, run_id: str) -> dict[str, Any] | None:
        row = self._conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        return dict(row) if row else None

    def list_runs(self, command: str | None = None) -> list[dict[str, Any]]:
        if command is None:
            rows = self._conn.execute("SELECT * FROM runs ORDER BY created_at").fetchall()
        else:
            rows = self._conn.execute(
                "SELECT * FROM runs WHERE command = ? ORDER BY created_at", (command,)
            ).fetchall()
        return [dict(r) for r in rows]

    # -- checksums --

    def record_checksums(self, run_id: str, stage: str, checksums: Mapping[str, str]) -> int:
        """Store frozen-parameter checksums for a stage. Returns count written."""
        self._conn.executemany(
            """INSERT OR REPLACE INTO stage_checksums (run_id, stage, name, sha256)
               VALUES (?, ?, ?, ?)""",
            [(run_id, stage, name, digest) for name, digest in sorted(checksums.items())],
        )
        self._conn.commit()
        return len(checksums)

    def get_checksums(self, run_id: str, stage: str) -> dict[str, str]:
        rows = self._conn.execute(
            "SELECT name, sha256 FROM stage_checksums WHERE run_id = ? AND stage = ? ORDER BY name",
            (run_id, stage),
        ).fetchall()
        return {r["name"]: r["sha256"] for r in rows}

    def checksum_stages(self, run_id: str) -> list[str]:
        rows = self._conn.execute(
            "SELECT DISTINCT stage FROM stage_checksums WHERE run_id = ? ORDER BY stage", (run_id,)
        ).fetchall()
        return [r["stage"] for r in rows]
