"""Recognition metrics (WAR / UAR), gate telemetry and batched evaluation."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import confusion_matrix

from emomoe.compressor import HybridParams
from emomoe.data import Domain, TrainItem
from emomoe.errors import CapabilityError, ContractError, TargetIndexError
from emomoe.model import ToyModel, batch_inputs, forward_with_trace

logger = logging.getLogger(__name__)

GATE_AVERAGING = "per token"


class MetricsReport(BaseModel):
    confusion: list[list[int]]
    war: float
    uar: float
    recall: list[float | None]
    count: int

    @property
    def classes(self) -> int:
        return len(self.confusion)


class DomainGate(BaseModel):
    emotion_weight: float
    general_weight: float
    tokens: int


class GateReport(BaseModel):
    averaging: str = GATE_AVERAGING
    domains: dict[str, DomainGate] = Field(default_factory=dict)


class EvalReport(BaseModel):
    overall: MetricsReport
    domains: dict[str, MetricsReport] = Field(default_factory=dict)
    gate: GateReport | None = None


def compute_metrics(
    predictions: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    classes: int | None = None,
) -> MetricsReport:
    """WAR is overall accuracy; UAR averages per-class recall over classes present in ``labels``."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if true.size == 0:
        raise ContractError("metrics need at least one sample")
    if pred.size != true.size:
        raise ContractError(f"{pred.size} predictions for {true.size} labels")
    c = classes if classes is not None else int(max(pred.max(), true.max())) + 1
    for name, arr in (("label", true), ("prediction", pred)):
        bad = (arr < 0) | (arr >= c)
        if bad.any():
            raise TargetIndexError(f"{name} {int(arr[bad][0])} out of range for {c} classes")

    cm = confusion_matrix(true, pred, labels=list(range(c)))
    support = cm.sum(axis=1)
    recall: list[float | None] = [
        float(cm[i, i] / support[i]) if support[i] else None for i in range(c)
    ]
    present = [r for r in recall if r is not None]
    return MetricsReport(
        confusion=cm.astype(int).tolist(),
        war=float(np.trace(cm) / true.size),
        uar=float(sum(present) / len(present)),
        recall=recall,
        count=int(true.size),
    )


def _batches(samples: Sequence[TrainItem], size: int) -> list[Sequence[TrainItem]]:
    return [samples[i : i + size] for i in range(0, len(samples), size)]


def _run_batch(model: ToyModel, batch: Sequence[TrainItem]) -> tuple[np.ndarray, list[np.ndarray]]:
    preds = np.zeros(len(batch), dtype=np.int64)
    traces: list[np.ndarray] = [np.empty(0)] * len(batch)
    for group in batch_inputs(model, batch):
        logits, tokens = forward_with_trace(model, group.values, group.text)
        preds[group.positions] = logits.data.argmax(axis=-1)
        for row, pos in enumerate(group.positions):
            traces[pos] = tokens.gate_trace.data[row]
    return preds, traces


def predict(
    model: ToyModel,
    samples: Sequence[TrainItem],
    batch_size: int = 64,
    workers: int = 1,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Eval-mode predictions ``[n]`` and one gate trace ``[N2]`` per sample, in sample order.

    Clips with and without key frames differ in N2. With ``workers > 1``
    batches run on a thread pool; forwards only read parameters.
    """
    if not samples:
        raise ContractError("cannot evaluate an empty dataset")
    batches = _batches(samples, batch_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda b: _run_batch(model, b), batches))
    else:
        results = [_run_batch(model, b) for b in batches]
    preds = np.concatenate([r[0] for r in results])
    traces = [t for r in results for t in r[1]]
    return preds, traces


def _gate_from_traces(samples: Sequence[TrainItem], traces: Sequence[np.ndarray]) -> GateReport:
    report = GateReport()
    for domain in Domain:
        rows = [traces[i] for i, s in enumerate(samples) if s.domain == domain]
        if not rows:
            continue
        flat = np.concatenate(rows)
        emotion = math.fsum(flat.tolist()) / flat.size
        report.domains[domain.value] = DomainGate(
            emotion_weight=emotion, general_weight=1.0 - emotion, tokens=int(flat.size)
        )
    return report


def gate_report(
    model: ToyModel,
    samples: Sequence[TrainItem],
    batch_size: int = 64,
    workers: int = 1,
) -> GateReport:
    """Mean emotion / general expert weight per domain, averaged per visual token."""
    if not isinstance(model.projector, HybridParams):
        raise CapabilityError(f"{model.projector.kind} projector has no gate to report")
    _, traces = predict(model, samples, batch_size, workers)
    report = _gate_from_traces(samples, traces)
    for name, g in report.domains.items():
        logger.info("Gate %s: emotion %.4f / general %.4f over %d tokens", name, g.emotion_weight, g.general_weight, g.tokens)
    return report


def evaluate(
    model: ToyModel,
    samples: Sequence[TrainItem],
    batch_size: int = 64,
    workers: int = 1,
) -> EvalReport:
    preds, traces = predict(model, samples, batch_size, workers)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    report = EvalReport(overall=compute_metrics(preds, labels, model.classes))
    for domain in Domain:
        idx = [i for i, s in enumerate(samples) if s.domain == domain]
        if idx:
            report.domains[domain.value] = compute_metrics(preds[idx], labels[idx], model.classes)
    if isinstance(model.projector, HybridParams):
        report.gate = _gate_from_traces(samples, traces)
    logger.info(
        "Evaluated %d samples: WAR %.4f, UAR %.4f",
        report.overall.count,
        report.overall.war,
        report.overall.uar,
    )
    return report
