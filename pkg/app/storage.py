import json
import sqlite3
from pathlib import Path
from typing import Any

from app.models import RunConfig, RunRecord


class RunStore:
    def __init__(self, db_path: str) -> None:
        self.db_path = db_path
        self._init_db()

    def _conn(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _init_db(self) -> None:
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        with self._conn() as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    command TEXT NOT NULL,
                    output_dir TEXT NOT NULL,
                    config_json TEXT NOT NULL,
                    summary_json TEXT NOT NULL,
                    updated_at DATETIME DEFAULT CURRENT_TIMESTAMP
                )
                """
            )
            conn.commit()

    def record(self, run_id: str, command: str, config: RunConfig, summary: dict[str, Any]) -> None:
        with self._conn() as conn:
            conn.execute(
                """
                INSERT INTO runs(run_id, command, output_dir, config_json, summary_json, updated_at)
                VALUES(?, ?, ?, ?, ?, CURRENT_TIMESTAMP)
                ON CONFLICT(run_id)
                DO UPDATE SET summary_json = excluded.summary_json, updated_at = CURRENT_TIMESTAMP
                """,
                (run_id, command, config.output_dir, config.model_dump_json(), json.dumps(summary, sort_keys=True)),
            )
            conn.commit()

    @staticmethod
    def _to_record(row: sqlite3.Row) -> RunRecord:
        return RunRecord(
            run_id=row["run_id"],
            command=row["command"],
            output_dir=row["output_dir"],
            config=json.loads(row["config_json"]),
            summary=json.loads(row["summary_json"]),
            updated_at=str(row["updated_at"]),
        )

    def get(self, run_id: str) -> RunRecord | None:
        with self._conn() as conn:
            row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        return self._to_record(row) if row else None

    def list_runs(self, command: str | None = None, limit: int = 50) -> list[RunRecord]:
        query = "SELECT * FROM runs"
        params: tuple[Any, ...] = ()
        if command:
            query += " WHERE command = ?"
            params = (command,)
        query += " ORDER BY updated_at DESC, run_id LIMIT ?"
        with self._conn() as conn:
            rows = conn.execute(query, params + (limit,)).fetchall()
        return [self._to_record(row) for row in rows]
