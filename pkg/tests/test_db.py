"""Tests for the run ledger."""

from __future__ import annotations

from pathlib import Path

import pytest

from emomoe.db import Ledger


def test_start_and_finish_run(tmp_ledger: Ledger):
    run_id = tmp_ledger.start_run("train", "a" * 64, 7, "runs/train")
    run = tmp_ledger.get_run(run_id)
    assert run is not None
    assert run["status"] == "running"
    assert run["seed"] == 7
    assert run["output_dir"] == "runs/train"

    tmp_ledger.finish_run(run_id, "ok")
    assert tmp_ledger.get_run(run_id)["status"] == "ok"


def test_unknown_status_rejected(tmp_ledger: Ledger):
    run_id = tmp_ledger.start_run("eval", "h", 0)
    with pytest.raises(ValueError):
        tmp_ledger.finish_run(run_id, "done")


def test_missing_run(tmp_ledger: Ledger):
    assert tmp_ledger.get_run("nope") is None


def test_list_runs_by_command(tmp_ledger: Ledger):
    tmp_ledger.start_run("train", "h", 1)
    tmp_ledger.start_run("eval", "h", 1)
    tmp_ledger.start_run("train", "h", 2)
    assert len(tmp_ledger.list_runs()) == 3
    assert [r["seed"] for r in tmp_ledger.list_runs("train")] == [1, 2]


def test_checksums_per_stage(tmp_ledger: Ledger):
    run_id = tmp_ledger.start_run("schedule", "h", 0)
    assert tmp_ledger.record_checksums(run_id, "stage1", {"b": "22", "a": "11"}) == 2
    tmp_ledger.record_checksums(run_id, "stage2", {"a": "33"})
    assert tmp_ledger.get_checksums(run_id, "stage1") == {"a": "11", "b": "22"}
    assert tmp_ledger.get_checksums(run_id, "stage2") == {"a": "33"}
    assert tmp_ledger.get_checksums(run_id, "stage3") == {}
    assert tmp_ledger.checksum_stages(run_id) == ["stage1", "stage2"]
    assert tmp_ledger.checksum_stages("nope") == []


def test_rerecording_replaces(tmp_ledger: Ledger):
    run_id = tmp_ledger.start_run("train", "h", 0)
    tmp_ledger.record_checksums(run_id, "stage1", {"a": "11"})
    tmp_ledger.record_checksums(run_id, "stage1", {"a": "99"})
    assert tmp_ledger.get_checksums(run_id, "stage1") == {"a": "99"}


def test_ledger_persists(tmp_path: Path):
    path = tmp_path / "nested" / "ledger.db"
    first = Ledger(path)
    run_id = first.start_run("gen-data", "h", 3)
    first.close()
    second = Ledger(path)
    assert second.get_run(run_id)["command"] == "gen-data"
    second.close()


def test_default_path_from_settings(cli_env: Path):
    ledger = Ledger()
    ledger.close()
    assert (cli_env / "runs" / "ledger.db").exists()
