import json
import logging
import os
import sqlite3
import uuid
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


class RunRegistry:
    def __init__(self, db_path: str = 'data/runs.db'):
        """Initialize the run registry.

        Args:
            db_path: Path to the SQLite database file
        """
        self.db_path = db_path
        self._ensure_db_directory()
        self._init_db()

    def _get_connection(self):
        """Create a new database connection."""
        return sqlite3.connect(self.db_path, timeout=30.0)  # 30-second timeout for locked db

    def _ensure_db_directory(self):
        db_dir = os.path.dirname(self.db_path)
        if db_dir:
            os.makedirs(db_dir, exist_ok=True)

    def _init_db(self):
        """Initialize the database by running schema.sql."""
        with self._get_connection() as conn:
            with open(os.path.join(os.path.dirname(__file__), 'schema.sql'), 'r') as f:
                conn.executescript(f.read())

    def create_run(self, command: str, method: Optional[str] = None, seed: Optional[int] = None,
                   output_dir: Optional[str] = None, config: Optional[Dict[str, Any]] = None) -> str:
        """Register a started run and return its id."""
        run_id = uuid.uuid4().hex
        with self._get_connection() as conn:
            conn.execute(
                "INSERT INTO runs (run_id, command, method, status, seed, output_dir, config_json) "
                "VALUES (?, ?, ?, 'running', ?, ?, ?)",
                (run_id, command, method, seed, output_dir, json.dumps(config, sort_keys=True) if config else None)
            )
            conn.commit()
        logger.debug(f"[REGISTRY] create_run: {run_id} command={command} method={method}")
        return run_id

    def complete_run(self, run_id: str, result: Optional[Dict[str, Any]] = None,
                     walltime_s: Optional[float] = None) -> None:
        with self._get_connection() as conn:
            conn.execute(
                "UPDATE runs SET status = 'completed', completed_at = CURRENT_TIMESTAMP, "
                "walltime_s = ?, result_json = ? WHERE run_id = ?",
                (walltime_s, json.dumps(result, sort_keys=True) if result is not None else None, run_id)
            )
            conn.commit()

    def fail_run(self, run_id: str, error: str) -> None:
        with self._get_connection() as conn:
            conn.execute(
                "UPDATE runs SET status = 'failed', completed_at = CURRENT_TIMESTAMP, error = ? "
                "WHERE run_id = ?",
                (error, run_id)
            )
            conn.commit()
        logger.warning(f"[REGISTRY] fail_run: {run_id}: {error}")

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        with self._get_connection() as conn:
            conn.row_factory = sqlite3.Row
            row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        if not row:
            return None
        run = dict(row)
        for key in ('config_json', 'result_json'):
            if run[key]:
                run[key] = json.loads(run[key])
        return run

    def list_runs(self, status: Optional[str] = None, limit: int = 50) -> List[Dict[str, Any]]:
        """Most recent runs first, optionally filtered by status."""
        query = "SELECT run_id, command, method, status, seed, output_dir, created_at, completed_at, walltime_s FROM runs"
        params: List[Any] = []
        if status:
            query += " WHERE status = ?"
            params.append(status)
        query += " ORDER BY created_at DESC, rowid DESC LIMIT ?"
        params.append(limit)
        with self._get_connection() as conn:
            conn.row_factory = sqlite3.Row
            return [dict(r) for r in conn.execute(query, tuple(params)).fetchall()]
