import pytest
import sqlite3

from backend.database.db_handler import RunRegistry


@pytest.fixture
def registry(tmp_path):
    """A run registry backed by a fresh file under tmp_path."""
    return RunRegistry(db_path=str(tmp_path / "runs" / "registry.db"))


def test_registry_initialization_creates_schema(registry, tmp_path):
    """The database file and the runs table exist after construction."""
    assert (tmp_path / "runs" / "registry.db").exists()
    with sqlite3.connect(registry.db_path) as conn:
        tables = {row[0] for row in conn.execute("SELECT name FROM sqlite_master WHERE type='table'")}
    assert "runs" in tables
    assert registry.list_runs() == []


def test_create_and_complete_run(registry):
    """A completed run keeps its config, result and walltime."""
    run_id = registry.create_run("fit", "sivi", 7, "runs/fit", {"seed": 7, "sivi": {"J": 20}})
    assert run_id

    run = registry.get_run(run_id)
    assert run['status'] == 'running'
    assert run['config_json'] == {"seed": 7, "sivi": {"J": 20}}

    registry.complete_run(run_id, {"success": True, "walltime_s": 1.5}, 1.5)
    run = registry.get_run(run_id)
    assert run['status'] == 'completed'
    assert run['walltime_s'] == 1.5
    assert run['result_json']['success'] is True
    assert run['completed_at'] is not None


def test_fail_run_records_error(registry):
    run_id = registry.create_run("predict")
    registry.fail_run(run_id, "CompatibilityError: family mismatch")
    run = registry.get_run(run_id)
    assert run['status'] == 'failed'
    assert "family mismatch" in run['error']
    assert run['result_json'] is None


def test_list_runs_filters_by_status(registry):
    first = registry.create_run("simulate")
    second = registry.create_run("compare")
    registry.complete_run(first, {"success": True})

    runs = registry.list_runs()
    assert [r['run_id'] for r in runs] == [second, first]
    completed = registry.list_runs(status='completed')
    assert [r['run_id'] for r in completed] == [first]
    assert len(registry.list_runs(limit=1)) == 1


def test_get_unknown_run_returns_none(registry):
    assert registry.get_run("does-not-exist") is None


def test_registry_reopens_existing_file(registry):
    """Re-opening the same file keeps earlier runs (the schema is idempotent)."""
    run_id = registry.create_run("fit", "mh")
    reopened = RunRegistry(db_path=registry.db_path)
    assert reopened.get_run(run_id)['method'] == 'mh'
