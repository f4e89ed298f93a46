"""CLI entry point."""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from pydantic import BaseModel, Field, ValidationError

from emomoe.config import RunConfig, get_settings, parse_config
from emomoe.errors import EmomoeError

if TYPE_CHECKING:
    from emomoe.data import ClipSample, SyntheticSample, TrainItem
    from emomoe.model import ToyModel

logger = logging.getLogger(__name__)


def _setup_logging() -> None:
    logging.basicConfig(
        level=get_settings().log_level.upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


# -- run bookkeeping --


class RunManifest(BaseModel):
    command: str
    argv: list[str] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)
    config_hash: str = ""
    seeds: dict[str, int] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    wall_time: float = 0.0


def _versions() -> dict[str, str]:
    import numpy
    import pydantic
    import scipy
    import sklearn

    from emomoe import __version__

    return {
        "emomoe": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "pydantic": pydantic.VERSION,
    }


@dataclass
class _Run:
    command: str
    cfg: RunConfig
    out: Path
    run_id: str
    seeds: dict[str, int]
    status: str = "ok"
    checksums: dict[str, dict[str, str]] = field(default_factory=dict)


@contextmanager
def _tracked(
    command: str, cfg: RunConfig, out: Path | None, seeds: dict[str, int], argv: Sequence[str]
) -> Iterator[_Run]:
    """Ledger entry plus ``manifest.json`` and ``config.ini`` beside the command's outputs."""
    from emomoe.db import Ledger

    out = out or get_settings().output_path / command
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    ledger = Ledger()
    run = _Run(command, cfg, out, "", seeds)
    run.run_id = ledger.start_run(command, cfg.config_hash(), next(iter(seeds.values()), 0), str(out))
    try:
        yield run
        for stage, sums in run.checksums.items():
            ledger.record_checksums(run.run_id, stage, sums)
        ledger.finish_run(run.run_id, run.status)
    except Exception:
        logger.exception("%s failed (run %s)", command, run.run_id)
        ledger.finish_run(run.run_id, "failed")
        raise
    finally:
        ledger.close()
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    manifest = RunManifest(
        command=command,
        argv=list(argv),
        config=cfg.model_dump(mode="json"),
        config_hash=cfg.config_hash(),
        seeds=seeds,
        versions=_versions(),
        outputs=sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()),
        wall_time=time.monotonic() - started,
    )
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("%s finished with status %s; outputs in %s", command, run.status, out)


def _write_report(out: Path, markdown: str, csv_text: str) -> None:
    (out / "report.md").write_text(markdown, encoding="utf-8")
    (out / "report.csv").write_text(csv_text, encoding="utf-8")


def _samples(cfg: RunConfig, data: Path | None, split: str) -> list[SyntheticSample]:
    from emomoe.data import generate_split, load_dataset

    if data is not None:
        return load_dataset(data)
    logger.info("No --data given; generating the %s split from the config", split)
    return generate_split(cfg, split)


def _clips(cfg: RunConfig, data: Path | None, split: str) -> list[ClipSample]:
    """Clips saved next to ``data`` under ``clips/``, else the configured clip split."""
    from emomoe.data import generate_clip_split, load_clips

    if data is not None:
        return load_clips(data / "clips") if (data / "clips").is_dir() else []
    return generate_clip_split(cfg, split)


def _eval_items(cfg: RunConfig, model: ToyModel, data: Path | None) -> list[TrainItem]:
    from emomoe.data import prepare_clips

    clips = prepare_clips(_clips(cfg, data, "eval"), model.embedder.patch, cfg.fec.tau, cfg.fec.active)
    return [*_samples(cfg, data, "eval"), *clips]


def _load_model(cfg: RunConfig, checkpoint: Path) -> tuple[ToyModel, list[str]]:
    from emomoe.checkpoint import load_checkpoint
    from emomoe.model import build_model

    model = build_model(cfg)
    manifest = load_checkpoint(model.named_parameters(), checkpoint, cfg.config_hash())
    return model, manifest.stages


# -- commands --


def cmd_gen_data(config: Path | None, out: Path | None, argv: Sequence[str] = ()) -> int:
    """Write the train, eval and per-adapter fine-tuning splits."""
    from emomoe.data import generate_clip_split, generate_splits, save_clips, save_dataset, split_seeds

    cfg = parse_config(config)
    with _tracked("gen-data", cfg, out, split_seeds(cfg), argv) as run:
        for name, samples in generate_splits(cfg).items():
            save_dataset(samples, run.out / name)
            logger.info("Wrote %d samples to %s", len(samples), run.out / name)
            clips = generate_clip_split(cfg, name)
            if clips:
                save_clips(clips, run.out / name / "clips")
                logger.info("Wrote %d clips to %s", len(clips), run.out / name / "clips")
    return 0


def _train(
    command: str,
    config: Path | None,
    out: Path | None,
    stage_id: str,
    adapter: str | None,
    init: Path | None,
    data: Path | None,
    workers: int,
    argv: Sequence[str],
) -> int:
    from emomoe.checkpoint import CheckpointManifest, save_checkpoint, snap_to_float32
    from emomoe.model import build_model
    from emomoe.renderer import render_csv, render_markdown, render_plaintext, run_rows
    from emomoe.train import stage_config, train_stage

    cfg = parse_config(config)
    stage = stage_config(cfg, stage_id, adapter)
    seeds = {"train": cfg.seeds.train, "init": cfg.seeds.init}
    with _tracked(command, cfg, out, seeds, argv) as run:
        if init is None:
            model = build_model(cfg)
            snap_to_float32(model.named_parameters())
            stages: list[str] = []
            save_checkpoint(
                model.named_parameters(),
                CheckpointManifest(config_hash=cfg.config_hash(), stages=stages),
                run.out / "init.eqck",
            )
        else:
            model, stages = _load_model(cfg, init)
        split = "train" if adapter is None else f"finetune/{adapter}"
        report = train_stage(
            model,
            stage,
            _samples(cfg, data, split),
            cfg.seeds.train,
            cfg.optimizer,
            workers,
            clips=_clips(cfg, data, split),
        )

        manifest = CheckpointManifest(
            config_hash=cfg.config_hash(), stages=[*stages, stage.label], config=cfg.model_dump(mode="json")
        )
        save_checkpoint(model.named_parameters(), manifest, run.out / "model.eqck")
        run.checksums[stage.label] = report.frozen_checksums

        extra = {"config hash": cfg.config_hash()[:12], "seed": cfg.seeds.train, "stages": ", ".join(manifest.stages)}
        _write_report(
            run.out,
            render_markdown(f"Training {stage.label}", runs=[report], extra=extra),
            render_csv(run_rows(report)),
        )
        print(render_plaintext(runs=[report]))
    return 0


def cmd_train(
    config: Path | None,
    out: Path | None,
    stage: str,
    init: Path | None = None,
    data: Path | None = None,
    workers: int = 1,
    argv: Sequence[str] = (),
) -> int:
    """One pre-training stage (1, 2 or 3)."""
    return _train("train", config, out, stage, None, init, data, workers, argv)


def cmd_finetune(
    config: Path | None,
    out: Path | None,
    init: Path,
    adapter: str | None = None,
    data: Path | None = None,
    workers: int = 1,
    argv: Sequence[str] = (),
) -> int:
    """Fine-tune one named adapter, or the decoder with the full strategy."""
    return _train("finetune", config, out, "finetune", adapter, init, data, workers, argv)


def cmd_eval(
    config: Path | None,
    out: Path | None,
    checkpoint: Path,
    data: Path | None = None,
    adapter: str | None = None,
    workers: int = 1,
    argv: Sequence[str] = (),
) -> int:
    from emomoe.metrics import evaluate
    from emomoe.renderer import eval_rows, render_csv, render_markdown, render_plaintext

    cfg = parse_config(config)
    with _tracked("eval", cfg, out, {"data": cfg.seeds.data}, argv) as run:
        model, stages = _load_model(cfg, checkpoint)
        model.adapters.select(adapter)
        report = evaluate(model, _eval_items(cfg, model, data), workers=workers)
        extra = {"checkpoint": checkpoint, "stages": ", ".join(stages) or "-", "adapter": adapter or "-"}
        _write_report(
            run.out,
            render_markdown("Evaluation", evaluation=report, extra=extra),
            render_csv(eval_rows(report)),
        )
        (run.out / "metrics.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        print(render_plaintext(evaluation=report))
    return 0


def cmd_gate_report(
    config: Path | None,
    out: Path | None,
    checkpoint: Path,
    data: Path | None = None,
    workers: int = 1,
    argv: Sequence[str] = (),
) -> int:
    from emomoe.metrics import gate_report
    from emomoe.renderer import gate_rows, render_csv, render_markdown, render_plaintext

    cfg = parse_config(config)
    with _tracked("gate-report", cfg, out, {"data": cfg.seeds.data}, argv) as run:
        model, stages = _load_model(cfg, checkpoint)
        gate = gate_report(model, _eval_items(cfg, model, data), workers=workers)
        extra = {"checkpoint": checkpoint, "stages": ", ".join(stages) or "-"}
        _write_report(
            run.out,
            render_markdown("Gate report", gate=gate, extra=extra),
            render_csv(gate_rows(gate)),
        )
        print(render_plaintext(gate=gate))
    return 0


def cmd_grad_check(
    config: Path | None,
    out: Path | None,
    seeds: int = 20,
    eps: float = 1e-6,
    tol: float = 1e-4,
    argv: Sequence[str] = (),
) -> int:
    """Finite-difference check of every differentiable block; exit 1 above ``tol``."""
    from emomoe.gradcheck import run_grad_checks
    from emomoe.renderer import render_csv

    cfg = parse_config(config)
    with _tracked("grad-check", cfg, out, {"first_seed": 0, "seed_count": seeds}, argv) as run:
        reports = run_grad_checks(range(seeds), eps)
        worst = max(r.max_error for r in reports.values())
        lines = ["# Gradient check", "", f"**seeds:** {seeds} | **eps:** {eps} | **tolerance:** {tol}", ""]
        lines += ["| block | max relative error | worst parameter |", "|---|---|---|"]
        rows = []
        for block, r in reports.items():
            lines.append(f"| {block} | {r.max_error:.3e} | {r.worst or '-'} |")
            rows.append(("grad-check", block, "max_relative_error", r.max_error))
            print(f"{block:8s} {r.max_error:.3e}  ({r.worst or '-'})")
        _write_report(run.out, "\n".join(lines), render_csv(rows))
        print(f"max relative error {worst:.3e} (tolerance {tol:g})")
        if worst > tol:
            run.status = "failed"
            print(f"error: NumericError: gradient check failed with {worst:.3e} > {tol:g}", file=sys.stderr)
            return 1
    return 0


def cmd_fec_extract(
    config: Path | None,
    out: Path | None,
    frames_dir: Path,
    observations: Path,
    tau: float | None = None,
    inactive: bool = False,
    argv: Sequence[str] = (),
) -> int:
    """Select, mask and append key frames; writes the composed sequence and a selection report."""
    import json

    from emomoe.fec import ScriptedScorer, load_frames, run_fec, save_frames, selection_report
    from emomoe.renderer import render_selection_markdown

    cfg = parse_config(config)
    tau = cfg.fec.tau if tau is None else tau
    with _tracked("fec-extract", cfg, out, {"data": cfg.seeds.data}, argv) as run:
        frames = load_frames(frames_dir)
        result = run_fec(frames, ScriptedScorer.from_jsonl(observations), tau, active=not inactive)
        save_frames(result.sequence, run.out / "frames")
        report = selection_report(result, len(frames))
        (run.out / "selection.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        (run.out / "selection.md").write_text(render_selection_markdown(report), encoding="utf-8")
        print(f"{result.n_key_frames} key frames appended to {len(frames)} frames (tau={tau})")
    return 0


def cmd_inspect(checkpoint: Path, against: Path | None = None) -> int:
    """Print a checkpoint's manifest and tensors; with ``against``, list tensors that differ."""
    from emomoe.checkpoint import read_checkpoint, tensor_checksum

    manifest, tensors = read_checkpoint(checkpoint)
    print(f"checkpoint: {checkpoint}")
    print(f"config hash: {manifest.config_hash}")
    print(f"stages: {', '.join(manifest.stages) or '-'}")
    print(f"tensors: {len(tensors)}")
    for name, arr in tensors.items():
        print(f"  {name:40s} {'x'.join(map(str, arr.shape)) or 'scalar':>12s}  {tensor_checksum(arr)[:16]}")
    if against is None:
        return 0

    _, other = read_checkpoint(against)
    changed = sorted(n for n in tensors.keys() & other.keys() if tensor_checksum(tensors[n]) != tensor_checksum(other[n]))
    only_here = sorted(tensors.keys() - other.keys())
    only_there = sorted(other.keys() - tensors.keys())
    print(f"against {against}: {len(changed)} changed, {len(tensors) - len(changed) - len(only_here)} unchanged")
    for name in changed:
        print(f"  changed  {name}")
    for name in only_here:
        print(f"  only in {checkpoint.name}: {name}")
    for name in only_there:
        print(f"  only in {against.name}: {name}")
    return 0


def cmd_runs(command: str | None = None, run_id: str | None = None) -> int:
    """List ledger runs, or show one run with its frozen-tensor checksums per stage."""
    from emomoe.db import Ledger
    from emomoe.errors import RunNotFoundError

    ledger = Ledger()
    try:
        if run_id is None:
            runs = ledger.list_runs(command)
            print(f"{'run id':32s}  {'command':12s}  {'status':7s}  {'seed':>6s}  created")
            for r in runs:
                print(f"{r['run_id']:32s}  {r['command']:12s}  {r['status']:7s}  {r['seed']:>6d}  {r['created_at']}")
            print(f"{len(runs)} run(s)")
            return 0
        run = ledger.get_run(run_id)
        if run is None:
            raise RunNotFoundError(f"no run {run_id!r} in {get_settings().ledger_full_path}")
        for key in ("run_id", "command", "status", "seed", "config_hash", "output_dir", "created_at"):
            print(f"{key}: {run[key]}")
        for stage in ledger.checksum_stages(run_id):
            sums = ledger.get_checksums(run_id, stage)
            print(f"{stage}: {len(sums)} frozen tensors")
            for name, digest in sums.items():
                print(f"  {name:40s} {digest[:16]}")
        return 0
    finally:
        ledger.close()


def cmd_schedule(
    config: Path | None,
    out: Path | None,
    data: Path | None = None,
    workers: int = 1,
    argv: Sequence[str] = (),
) -> int:
    """Stages 1-3 and fine-tuning in one run, then evaluation and gate telemetry on the eval split."""
    from emomoe.checkpoint import CheckpointManifest, save_checkpoint
    from emomoe.compressor import HybridParams
    from emomoe.data import generate_split, load_dataset, prepare_clips, split_seeds
    from emomoe.metrics import evaluate
    from emomoe.model import build_model
    from emomoe.renderer import eval_rows, render_csv, render_markdown, render_plaintext, run_rows
    from emomoe.train import run_schedule

    cfg = parse_config(config)
    seeds = {"train": cfg.seeds.train, "init": cfg.seeds.init, "data": cfg.seeds.data}
    with _tracked("schedule", cfg, out, seeds, argv) as run:
        if data is not None:
            train = load_dataset(data / "train")
            finetune = {n: load_dataset(data / "finetune" / n) for n in cfg.lora.adapters}
            evaluation = load_dataset(data / "eval")
        else:
            train = generate_split(cfg, "train")
            finetune = {n: generate_split(cfg, f"finetune/{n}") for n in cfg.lora.adapters}
            evaluation = generate_split(cfg, "eval")
        clips = {name: _clips(cfg, None if data is None else data / name, name) for name in split_seeds(cfg)}
        finetune_clips = {n: clips[f"finetune/{n}"] for n in cfg.lora.adapters}

        model = build_model(cfg)
        reports = run_schedule(model, cfg, train, finetune, clips=clips["train"], finetune_clips=finetune_clips)
        eval_clips = prepare_clips(clips["eval"], model.embedder.patch, cfg.fec.tau, cfg.fec.active)
        manifest = CheckpointManifest(
            config_hash=cfg.config_hash(),
            stages=[r.stage for r in reports],
            config=cfg.model_dump(mode="json"),
        )
        save_checkpoint(model.named_parameters(), manifest, run.out / "model.eqck")
        run.checksums.update({r.stage: r.frozen_checksums for r in reports})

        # telemetry is read from the shared backbone, without any adapter
        model.adapters.select(None)
        final = evaluate(model, [*evaluation, *eval_clips], workers=workers)
        rows = [row for r in reports for row in run_rows(r)] + eval_rows(final, section="eval")
        gate = final.gate if isinstance(model.projector, HybridParams) else None
        _write_report(
            run.out,
            render_markdown(
                "Training schedule",
                runs=reports,
                evaluation=final,
                gate=gate,
                extra={"config hash": cfg.config_hash()[:12], "seed": cfg.seeds.train},
            ),
            render_csv(rows),
        )
        print(render_plaintext(runs=reports, evaluation=final))
    return 0


# -- argument parsing --


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="Run configuration file (INI)")
    p.add_argument("--out", type=Path, default=None, help="Output directory (default: $EMOMOE_OUTPUT_DIR/<command>)")


def _fec_arguments(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--frames", type=Path, required=True, help="Frame directory with manifest.jsonl")
    p.add_argument("--observations", type=Path, required=True, help="Scripted face observations (JSONL)")
    p.add_argument("--tau", type=float, default=None, help="Confidence threshold (default: [fec] tau)")
    p.add_argument("--inactive", action="store_true", help="Pass the sequence through unchanged")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emomoe",
        description="Gated two-expert visual projector with staged training and key-frame capture",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the synthetic train/eval/fine-tuning splits")
    _common(p)

    p = sub.add_parser("train", help="Run one pre-training stage")
    _common(p)
    p.add_argument("--stage", required=True, choices=["1", "2", "3"])
    p.add_argument("--init", type=Path, default=None, help="Checkpoint to start from (default: fresh model)")
    p.add_argument("--data", type=Path, default=None, help="Dataset directory (default: generated train split)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("finetune", help="Fine-tune an adapter (or the decoder with the full strategy)")
    _common(p)
    p.add_argument("--init", type=Path, required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", help="WAR/UAR and confusion matrix of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="Dataset directory (default: generated eval split)")
    p.add_argument("--adapter", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gate-report", help="Mean expert weights per domain")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("grad-check", help="Finite-difference check of every differentiable block")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("fec-extract", help="Select and mask emotional key frames")
    _fec_arguments(p)

    p = sub.add_parser("inspect", help="List a checkpoint's tensors")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--against", type=Path, default=None, help="Second checkpoint to diff against")

    p = sub.add_parser("runs", help="List recorded runs, or show one with --id")
    p.add_argument("--command", dest="run_command", default=None, help="Only runs of this command")
    p.add_argument("--id", dest="run_id", default=None, help="Show one run and its stage checksums")

    p = sub.add_parser("schedule", help="Full stage 1-3 + fine-tuning run")
    _common(p)
    p.add_argument("--data", type=Path, default=None, help="gen-data output directory")
    p.add_argument("--workers", type=int, default=1)

    return parser


def _dispatch(args: argparse.Namespace, argv: Sequence[str]) -> int:
    if args.command == "gen-data":
        return cmd_gen_data(args.config, args.out, argv)
    if args.command == "train":
        return cmd_train(args.config, args.out, args.stage, args.init, args.data, args.workers, argv)
    if args.command == "finetune":
        return cmd_finetune(args.config, args.out, args.init, args.adapter, args.data, args.workers, argv)
    if args.command == "eval":
        return cmd_eval(args.config, args.out, args.checkpoint, args.data, args.adapter, args.workers, argv)
    if args.command == "gate-report":
        return cmd_gate_report(args.config, args.out, args.checkpoint, args.data, args.workers, argv)
    if args.command == "grad-check":
        return cmd_grad_check(args.config, args.out, args.seeds, args.eps, args.tol, argv)
    if args.command == "fec-extract":
        return cmd_fec_extract(
            args.config, args.out, args.frames, args.observations, args.tau, args.inactive, argv
        )
    if args.command == "inspect":
        return cmd_inspect(args.checkpoint, args.against)
    if args.command == "runs":
        return cmd_runs(args.run_command, args.run_id)
    if args.command == "schedule":
        return cmd_schedule(args.config, args.out, args.data, args.workers, argv)
    raise AssertionError(f"unhandled command {args.command}")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args, argv)
    except (EmomoeError, OSError, ValidationError) as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1


def fec_extract_main(argv: Sequence[str] | None = None) -> int:
    """Standalone ``fec-extract`` script, same options as ``emomoe fec-extract``."""
    argv = list(sys.argv[1:] if argv is None else argv)
    return main(["fec-extract", *argv])


if __name__ == "__main__":
    sys.exit(main())
