"""Render run, metrics and gate reports to Markdown, plain text and flat CSV."""

from __future__ import annotations

import csv
import io
from collections.abc import Iterable, Mapping, Sequence
from typing import Any

from emomoe.metrics import EvalReport, GateReport, MetricsReport
from emomoe.train import RunReport

CSV_HEADER = ("section", "domain", "metric", "value")

Row = tuple[str, str, str, Any]


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _metrics_rows(section: str, domain: str, m: MetricsReport) -> list[Row]:
    rows: list[Row] = [
        (section, domain, "war", m.war),
        (section, domain, "uar", m.uar),
        (section, domain, "count", m.count),
    ]
    rows.extend((section, domain, f"recall_{i}", r) for i, r in enumerate(m.recall))
    return rows


def eval_rows(report: EvalReport, section: str = "metrics") -> list[Row]:
    rows = _metrics_rows(section, "all", report.overall)
    for domain, m in report.domains.items():
        rows.extend(_metrics_rows(section, domain, m))
    if report.gate is not None:
        rows.extend(gate_rows(report.gate))
    return rows


def gate_rows(gate: GateReport, section: str = "gate") -> list[Row]:
    rows: list[Row] = []
    for domain, g in gate.domains.items():
        rows.append((section, domain, "emotion_weight", g.emotion_weight))
        rows.append((section, domain, "general_weight", g.general_weight))
        rows.append((section, domain, "tokens", g.tokens))
    return rows


def run_rows(run: RunReport) -> list[Row]:
    rows: list[Row] = [
        (run.stage, "", "epochs", run.epochs),
        (run.stage, "", "steps", run.steps),
        (run.stage, "", "first_batch_loss", run.first_batch_loss),
    ]
    rows.extend((run.stage, "", f"epoch_{i + 1}_loss", loss) for i, loss in enumerate(run.epoch_losses))
    if run.clips:
        rows.append((run.stage, "", "clips", run.clips))
        rows.append((run.stage, "", "key_frame_clips", run.key_frame_clips))
    if run.metrics is not None:
        rows.extend(eval_rows(run.metrics, section=run.stage))
    return rows


def render_csv(rows: Iterable[Row]) -> str:
    """Header plus one comma-separated row per value; floats use their shortest exact repr."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for section, domain, metric, value in rows:
        writer.writerow((section, domain, metric, _fmt(value)))
    return buf.getvalue()


# -- markdown --


def _metrics_table(report: EvalReport) -> list[str]:
    lines = ["| domain | samples | WAR | UAR |", "|---|---|---|---|"]
    for domain, m in [("all", report.overall), *report.domains.items()]:
        lines.append(f"| {domain} | {m.count} | {m.war:.4f} | {m.uar:.4f} |")
    lines.append("")
    lines.append("Confusion matrix (rows: true class, columns: predicted):")
    lines.append("")
    lines.extend("    " + " ".join(f"{c:5d}" for c in row) for row in report.overall.confusion)
    lines.append("")
    return lines


def _gate_table(gate: GateReport) -> list[str]:
    lines = [
        f"averaging: {gate.averaging}",
        "",
        "| domain | emotion expert | general expert | tokens |",
        "|---|---|---|---|",
    ]
    for domain, g in gate.domains.items():
        lines.append(f"| {domain} | {g.emotion_weight:.4f} | {g.general_weight:.4f} | {g.tokens} |")
    lines.append("")
    return lines


def render_markdown(
    title: str,
    runs: Sequence[RunReport] = (),
    evaluation: EvalReport | None = None,
    gate: GateReport | None = None,
    extra: Mapping[str, Any] | None = None,
) -> str:
    lines: list[str] = [f"# {title}", ""]
    if extra:
        for key, value in extra.items():
            lines.append(f"**{key}:** {value}")
        lines.append("")

    for run in runs:
        lines.append(f"## {run.stage}")
        lines.append("")
        if run.epochs == 0:
            lines.append("No epochs scheduled.")
            lines.append("")
            continue
        lines.append(f"**Samples:** {run.samples} | **Steps:** {run.steps}")
        lines.append(f"**Trainable tensors:** {len(run.trainable)} | **Frozen verified:** {len(run.frozen_checksums)}")
        if run.clips:
            capture = "on" if run.fec_active else "off"
            lines.append(f"**Clips:** {run.clips} | **With key frames:** {run.key_frame_clips} (capture {capture})")
        lines.append("")
        if run.first_batch_loss is not None:
            lines.append(f"- first batch loss: {run.first_batch_loss:.4f}")
        for i, loss in enumerate(run.epoch_losses, 1):
            lines.append(f"- epoch {i} mean loss: {loss:.4f}")
        lines.append("")
        if run.metrics is not None:
            lines.extend(_metrics_table(run.metrics))
            if run.metrics.gate is not None:
                lines.extend(_gate_table(run.metrics.gate))

    if evaluation is not None:
        lines.append("## Evaluation")
        lines.append("")
        lines.extend(_metrics_table(evaluation))
        if evaluation.gate is not None and gate is None:
            gate = evaluation.gate

    if gate is not None:
        lines.append("## Gate telemetry")
        lines.append("")
        lines.extend(_gate_table(gate))

    return "\n".join(lines)


def render_plaintext(
    runs: Sequence[RunReport] = (),
    evaluation: EvalReport | None = None,
    gate: GateReport | None = None,
) -> str:
    """Short console summary."""
    lines: list[str] = []
    for run in runs:
        last = f"{run.epoch_losses[-1]:.4f}" if run.epoch_losses else "-"
        lines.append(f"{run.stage}: {run.steps} steps, final epoch loss {last}")
    if evaluation is not None:
        lines.append(
            f"eval: WAR {evaluation.overall.war:.4f} UAR {evaluation.overall.uar:.4f} "
            f"({evaluation.overall.count} samples)"
        )
        gate = gate or evaluation.gate
    if gate is not None:
        lines.append(f"gate (averaging: {gate.averaging})")
        for domain, g in gate.domains.items():
            lines.append(f"   {domain}: emotion {g.emotion_weight:.4f} / general {g.general_weight:.4f}")
    return "\n".join(lines)


def render_selection_markdown(report: Mapping[str, Any]) -> str:
    lines = [
        "# Key-frame selection",
        "",
        f"**tau:** {report['tau']} | **frames:** {report['frames']} | **key frames:** {report['key_frames']}",
        "",
    ]
    if not report["selections"]:
        lines.append("No face reached the threshold.")
        return "\n".join(lines)
    lines.append("| frame | emotion | confidence | bbox |")
    lines.append("|---|---|---|---|")
    for sel in report["selections"]:
        x, y, w, h = sel["bbox"]
        lines.append(f"| {sel['index']} | {sel['emotion']} | {sel['confidence']:.4f} | {x},{y},{w},{h} |")
    return "\n".join(lines)
