"""End-to-end tests for the command-line interface."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from emomoe.cli import build_parser, fec_extract_main, main
from emomoe.db import Ledger
from emomoe.fec import save_frames


def _csv_values(path: Path) -> dict[tuple[str, str, str], str]:
    with path.open(encoding="utf-8") as fh:
        return {(r["section"], r["domain"], r["metric"]): r["value"] for r in csv.DictReader(fh)}


def _ledger_runs(root: Path, command: str) -> list[dict]:
    ledger = Ledger(root / "runs" / "ledger.db")
    try:
        return ledger.list_runs(command)
    finally:
        ledger.close()


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--stage", "4"])


def test_gen_data(cli_env: Path, small_ini: Path):
    out = cli_env / "data"
    assert main(["gen-data", "--config", str(small_ini), "--out", str(out)]) == 0
    for split in ("train", "eval", "finetune/ver", "finetune/dfew"):
        assert (out / split / "embeddings.npy").exists()
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "gen-data"
    assert manifest["seeds"] == {"train": 7, "eval": 8, "finetune/ver": 9, "finetune/dfew": 10}
    assert "train/labels.npy" in manifest["outputs"]
    assert "numpy" in manifest["versions"]
    assert (out / "config.ini").exists()
    assert [r["status"] for r in _ledger_runs(cli_env, "gen-data")] == ["ok"]


def test_default_output_directory(cli_env: Path, small_ini: Path):
    assert main(["gen-data", "--config", str(small_ini)]) == 0
    assert (cli_env / "runs" / "gen-data" / "train" / "labels.npy").exists()


def test_stage1_leaves_decoder_untouched(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    out = cli_env / "s1"
    assert main(["train", "--config", str(small_ini), "--stage", "1", "--out", str(out)]) == 0
    assert (out / "report.md").exists()
    assert (out / "report.csv").exists()
    capsys.readouterr()

    assert main(["inspect", str(out / "model.eqck"), "--against", str(out / "init.eqck")]) == 0
    printed = capsys.readouterr().out
    assert "stages: stage1" in printed
    changed = [line.split()[-1] for line in printed.splitlines() if line.startswith("  changed  ")]
    assert changed
    assert not any(name.startswith(("decoder/", "classifier/", "text/", "projector/emotion/")) for name in changed)
    assert any(name.startswith("projector/general/") for name in changed)

    run = _ledger_runs(cli_env, "train")[0]
    ledger = Ledger(cli_env / "runs" / "ledger.db")
    try:
        sums = ledger.get_checksums(run["run_id"], "stage1")
    finally:
        ledger.close()
    assert "classifier/weight" in sums


def test_eval_reproduces_training_metrics(cli_env: Path, small_ini: Path):
    data = cli_env / "data"
    assert main(["gen-data", "--config", str(small_ini), "--out", str(data)]) == 0
    trained = cli_env / "s3"
    args = ["train", "--config", str(small_ini), "--stage", "3", "--data", str(data / "train"), "--out", str(trained)]
    assert main(args) == 0
    evaluated = cli_env / "eval"
    args = [
        "eval", "--config", str(small_ini), "--checkpoint", str(trained / "model.eqck"),
        "--data", str(data / "train"), "--out", str(evaluated),
    ]
    assert main(args) == 0

    train_csv = _csv_values(trained / "report.csv")
    eval_csv = _csv_values(evaluated / "report.csv")
    for metric in ("war", "uar"):
        assert train_csv[("stage3", "all", metric)] == eval_csv[("metrics", "all", metric)]
    metrics = json.loads((evaluated / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["overall"]["count"] == 64


def test_finetune_chain(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    s3 = cli_env / "s3"
    assert main(["train", "--config", str(small_ini), "--stage", "3", "--out", str(s3)]) == 0
    ft = cli_env / "ft"
    args = ["finetune", "--config", str(small_ini), "--init", str(s3 / "model.eqck"), "--adapter", "ver", "--out", str(ft)]
    assert main(args) == 0
    capsys.readouterr()
    assert main(["inspect", str(ft / "model.eqck"), "--against", str(s3 / "model.eqck")]) == 0
    printed = capsys.readouterr().out
    assert "stages: stage3, finetune:ver" in printed
    changed = [line.split()[-1] for line in printed.splitlines() if line.startswith("  changed  ")]
    assert changed
    assert all(name.startswith("lora/ver/") for name in changed)

    gate_out = cli_env / "gate"
    assert main(["gate-report", "--config", str(small_ini), "--checkpoint", str(ft / "model.eqck"), "--out", str(gate_out)]) == 0
    assert "averaging: per token" in (gate_out / "report.md").read_text(encoding="utf-8")


def test_finetune_unknown_adapter(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    s1 = cli_env / "s1"
    assert main(["train", "--config", str(small_ini), "--stage", "1", "--out", str(s1)]) == 0
    code = main(["finetune", "--config", str(small_ini), "--init", str(s1 / "model.eqck"), "--adapter", "mafw"])
    assert code == 1
    assert "error: ConfigError:" in capsys.readouterr().err


def test_grad_check_single_seed(cli_env: Path, capsys: pytest.CaptureFixture):
    out = cli_env / "gc"
    assert main(["grad-check", "--seeds", "1", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "max relative error" in printed
    assert "| hybrid |" in (out / "report.md").read_text(encoding="utf-8")
    assert _ledger_runs(cli_env, "grad-check")[0]["status"] == "ok"


def test_grad_check_failure_exit_code(cli_env: Path, capsys: pytest.CaptureFixture):
    assert main(["grad-check", "--seeds", "1", "--tol", "0", "--out", str(cli_env / "gc")]) == 1
    assert "error: NumericError:" in capsys.readouterr().err
    assert _ledger_runs(cli_env, "grad-check")[0]["status"] == "failed"


def test_fec_extract(cli_env: Path, fec_corpus, capsys: pytest.CaptureFixture):
    frames, scorer = fec_corpus
    save_frames(frames, cli_env / "frames")
    scorer.to_jsonl(cli_env / "obs.jsonl")
    out = cli_env / "fec"
    args = ["--frames", str(cli_env / "frames"), "--observations", str(cli_env / "obs.jsonl"), "--tau", "0.7", "--out", str(out)]
    assert main(["fec-extract", *args]) == 0
    assert "2 key frames appended to 10 frames" in capsys.readouterr().out
    selection = json.loads((out / "selection.json").read_text(encoding="utf-8"))
    assert [s["index"] for s in selection["selections"]] == [2, 7]
    assert len((out / "frames" / "manifest.jsonl").read_text(encoding="utf-8").splitlines()) == 12

    assert fec_extract_main([*args[:-1], str(cli_env / "fec2"), "--inactive"]) == 0
    assert "0 key frames appended" in capsys.readouterr().out


def test_schedule(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    out = cli_env / "sched"
    assert main(["schedule", "--config", str(small_ini), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    for stage in ("stage1", "stage2", "stage3", "finetune:ver", "finetune:dfew"):
        assert f"{stage}:" in printed
    report = (out / "report.md").read_text(encoding="utf-8")
    assert "## Gate telemetry" in report
    assert (out / "model.eqck").exists()


def test_missing_checkpoint_error_line(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    code = main(["eval", "--config", str(small_ini), "--checkpoint", str(cli_env / "absent.eqck")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: FormatError: cannot read checkpoint")
    assert _ledger_runs(cli_env, "eval")[0]["status"] == "failed"


def test_bad_config_error_line(cli_env: Path, capsys: pytest.CaptureFixture):
    path = cli_env / "bad.ini"
    path.write_text("[model]\nbogus = 1\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: ConfigError: ")
    assert "bad.ini:2: [model] bogus: unknown key" in err[-1]


def test_config_hash_mismatch_on_eval(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    s1 = cli_env / "s1"
    assert main(["train", "--config", str(small_ini), "--stage", "1", "--out", str(s1)]) == 0
    other = cli_env / "other.ini"
    other.write_text(small_ini.read_text(encoding="utf-8").replace("n_eval = 32", "n_eval = 16"), encoding="utf-8")
    assert main(["eval", "--config", str(other), "--checkpoint", str(s1 / "model.eqck")]) == 1
    assert "error: ConfigError:" in capsys.readouterr().err


def test_runs_lists_and_shows_ledger(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    assert main(["train", "--config", str(small_ini), "--stage", "1", "--out", str(cli_env / "s1")]) == 0
    assert main(["gen-data", "--config", str(small_ini), "--out", str(cli_env / "data")]) == 0
    capsys.readouterr()

    assert main(["runs"]) == 0
    assert "2 run(s)" in capsys.readouterr().out
    assert main(["runs", "--command", "train"]) == 0
    listing = capsys.readouterr().out
    assert "1 run(s)" in listing
    assert "gen-data" not in listing

    run_id = _ledger_runs(cli_env, "train")[0]["run_id"]
    assert main(["runs", "--id", run_id]) == 0
    shown = capsys.readouterr().out
    assert f"run_id: {run_id}" in shown
    assert "status: ok" in shown
    assert "stage1: " in shown
    assert "classifier/weight" in shown

    assert main(["runs", "--id", "missing"]) == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: RunNotFoundError: no run 'missing'")


def test_out_path_taken_by_a_file(cli_env: Path, small_ini: Path, capsys: pytest.CaptureFixture):
    taken = cli_env / "taken"
    taken.write_text("", encoding="utf-8")
    assert main(["gen-data", "--config", str(small_ini), "--out", str(taken)]) == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: FileExistsError: ")


def test_validation_error_line(cli_env: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture):
    from pydantic import BaseModel

    from emomoe import cli

    class Point(BaseModel):
        x: int

    def invalid(*_args: object) -> int:
        Point.model_validate({"x": "nope"})
        return 0

    monkeypatch.setattr(cli, "_dispatch", invalid)
    assert main(["runs"]) == 1
    last = capsys.readouterr().err.strip().splitlines()[-1]
    assert last.startswith("error: ValidationError: 1 validation error for Point")


def test_clips_flow_through_commands(cli_env: Path, small_ini: Path):
    ini = small_ini.read_text(encoding="utf-8").replace("face_tokens = 2\n", "face_tokens = 2\nclips = 4\n")
    small_ini.write_text(ini, encoding="utf-8")
    data = cli_env / "data"
    assert main(["gen-data", "--config", str(small_ini), "--out", str(data)]) == 0
    for split in ("train", "eval", "finetune/ver"):
        assert (data / split / "clips" / "pixels.npy").exists()
        assert (data / split / "clips" / "faces.jsonl").exists()

    s3 = cli_env / "s3"
    args = ["train", "--config", str(small_ini), "--stage", "3", "--data", str(data / "train"), "--out", str(s3)]
    assert main(args) == 0
    values = _csv_values(s3 / "report.csv")
    assert values[("stage3", "", "clips")] == "4"
    assert values[("stage3", "", "key_frame_clips")] == "0"

    ft = cli_env / "ft"
    args = [
        "finetune", "--config", str(small_ini), "--init", str(s3 / "model.eqck"), "--adapter", "ver",
        "--data", str(data / "finetune" / "ver"), "--out", str(ft),
    ]
    assert main(args) == 0
    values = _csv_values(ft / "report.csv")
    assert values[("finetune:ver", "", "clips")] == "2"
    assert values[("finetune:ver", "", "key_frame_clips")] == "2"
    assert "**With key frames:** 2" in (ft / "report.md").read_text(encoding="utf-8")

    evaluated = cli_env / "eval"
    args = ["eval", "--config", str(small_ini), "--checkpoint", str(ft / "model.eqck"), "--data", str(data / "eval"), "--out", str(evaluated)]
    assert main(args) == 0
    metrics = json.loads((evaluated / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["overall"]["count"] == 32 + 4
