"""SQLite run registry.

Every CLI run appends one row to ``runs`` and one row per reported metric
to ``metrics``. Columns added after the first release are migrated in
place when an older database is opened.
"""

import contextlib
import logging
import sqlite3
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

REGISTRY_NAME = "runs.db"


class RunRegistry:
    """Manages the SQLite connection and run bookkeeping."""

    def __init__(self, db_name: str = REGISTRY_NAME):
        """Initializes the RunRegistry.

        Args:
            db_name: Path of the database file (":memory:" for tests).
        """
        self.conn = sqlite3.connect(db_name, check_same_thread=False)
        self.create_tables()

    @contextlib.contextmanager
    def _get_cursor(self):
        cursor = self.conn.cursor()
        try:
            yield cursor
        finally:
            cursor.close()

    def _column_exists(self, table: str, column: str) -> bool:
        with self._get_cursor() as cursor:
            # PRAGMA returns (cid, name, type, notnull, dflt_value, pk)
            cursor.execute(f"PRAGMA table_info({table})")
            columns = [row[1] for row in cursor.fetchall()]
        return column in columns

    def create_tables(self):
        """Creates tables and applies column migrations."""
        with self._get_cursor() as cursor:
            cursor.execute(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    command TEXT NOT NULL,
                    seed INTEGER,
                    config TEXT,
                    status TEXT DEFAULT 'running',
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """
            )
            runs_cols = [
                ("version", "TEXT"),
                ("message", "TEXT"),
                ("out_dir", "TEXT"),
            ]
            for col_name, col_type in runs_cols:
                if not self._column_exists("runs", col_name):
                    cursor.execute(f"ALTER TABLE runs ADD COLUMN {col_name} {col_type}")

            cursor.execute(
                """
                CREATE TABLE IF NOT EXISTS metrics (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL REFERENCES runs(id),
                    scope TEXT NOT NULL,
                    name TEXT NOT NULL,
                    value REAL
                )
            """
            )
            self.conn.commit()

    def close(self):
        self.conn.close()

    def __enter__(self) -> "RunRegistry":
        return self

    def __exit__(self, *exc):
        self.close()

    # --- Runs ---
    def start_run(
        self, command: str, seed: Optional[int], version: str, out_dir: str
    ) -> int:
        """Inserts a run row with status 'running'.

        Returns:
            The new run id.
        """
        with self._get_cursor() as cursor:
            cursor.execute(
                "INSERT INTO runs (command, seed, version, out_dir) "
                "VALUES (?, ?, ?, ?)",
                (command, seed, version, out_dir),
            )
            self.conn.commit()
            return cursor.lastrowid

    def finish_run(
        self,
        run_id: int,
        status: str,
        message: Optional[str] = None,
        config_json: Optional[str] = None,
        seed: Optional[int] = None,
    ):
        """Records the outcome; config and seed are filled in once resolved."""
        with self._get_cursor() as cursor:
            cursor.execute(
                "UPDATE runs SET status = ?, message = ?, "
                "config = COALESCE(?, config), seed = COALESCE(?, seed) WHERE id = ?",
                (status, message, config_json, seed, run_id),
            )
            self.conn.commit()

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        with self._get_cursor() as cursor:
            cursor.execute(
                "SELECT id, command, seed, config, status, version, message, out_dir "
                "FROM runs WHERE id = ?",
                (run_id,),
            )
            row = cursor.fetchone()
        if row is None:
            return None
        keys = ("id", "command", "seed", "config", "status", "version", "message", "out_dir")
        return dict(zip(keys, row))

    def list_runs(self) -> List[Tuple]:
        with self._get_cursor() as cursor:
            cursor.execute("SELECT id, command, seed, status FROM runs ORDER BY id")
            return cursor.fetchall()

    # --- Metrics ---
    def add_metrics(self, run_id: int, scope: str, values: Dict[str, Optional[float]]):
        """Stores one row per metric; undefined metrics are stored as NULL."""
        rows = [
            (run_id, scope, name, None if value is None else float(value))
            for name, value in sorted(values.items())
        ]
        with self._get_cursor() as cursor:
            cursor.executemany(
                "INSERT INTO metrics (run_id, scope, name, value) VALUES (?, ?, ?, ?)",
                rows,
            )
            self.conn.commit()

    def get_metrics(self, run_id: int, scope: Optional[str] = None) -> Dict[str, Optional[float]]:
        with self._get_cursor() as cursor:
            if scope is None:
                cursor.execute(
                    "SELECT scope, name, value FROM metrics WHERE run_id = ? ORDER BY id",
                    (run_id,),
                )
                return {f"{s}.{n}": v for s, n, v in cursor.fetchall()}
            cursor.execute(
                "SELECT name, value FROM metrics WHERE run_id = ? AND scope = ? ORDER BY id",
                (run_id, scope),
            )
            return dict(cursor.fetchall())
