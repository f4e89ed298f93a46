"""Staged training: AdamW, warmup + cosine schedule, and per-stage freeze masks.

Parameter groups (the columns of the stage table)::

    stage     embedder  general  emotion  gate   decoder  lora
    1         train     train    freeze   train  freeze   -
    2         train     freeze   train    train  freeze   -
    3         train     train    train    train  train    -
    finetune  freeze    freeze   freeze   freeze freeze   train

"decoder" covers the decoder blocks, the text embedding and the class head.
MLP / Fusion projectors form a single "projector" group trained in stages 1-3.
With the ``full`` fine-tuning strategy the decoder group trains instead of LoRA.
Pixel clips train alongside the embedding samples; only fine-tuning captures key frames.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from emomoe._compat import StrEnum

import numpy as np
from pydantic import BaseModel, Field

from emomoe.checkpoint import snap_to_float32, tensor_checksum
from emomoe.config import FinetuneStrategy, OptimizerConfig, RunConfig
from emomoe.data import ClipSample, Domain, SyntheticSample, TrainItem, prepare_clips, select_domain
from emomoe.errors import ConfigError, ContractError, FreezeViolationError, NumericError
from emomoe.metrics import EvalReport, evaluate
from emomoe.model import ToyModel, batch_inputs, forward_with_trace
from emomoe.tensor import Tape, Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)


class Stage(StrEnum):
    STAGE1 = "1"
    STAGE2 = "2"
    STAGE3 = "3"
    FINETUNE = "finetune"

    @property
    def ordinal(self) -> int:
        return list(Stage).index(self) + 1


def param_group(name: str) -> str:
    """Stage-table column of a canonical parameter name."""
    head, _, rest = name.partition("/")
    if head == "embedder":
        return "embedder"
    if head == "projector":
        sub = rest.partition("/")[0]
        return sub if sub in ("general", "emotion", "gate") else "projector"
    if head in ("decoder", "text", "classifier"):
        return "decoder"
    if head == "lora":
        return f"lora:{rest.partition('/')[0]}"
    raise ConfigError(f"parameter {name!r} belongs to no stage group")


@dataclass(frozen=True)
class StageConfig:
    stage: Stage
    groups: frozenset[str]
    epochs: int
    peak_lr: float
    domain: Domain | None
    fec_active: bool
    adapter: str | None = None
    tau: float = 0.9

    def trainable(self, name: str) -> bool:
        return param_group(name) in self.groups

    @property
    def label(self) -> str:
        if self.stage is Stage.FINETUNE:
            return f"finetune:{self.adapter or 'full'}"
        return f"stage{self.stage.value}"


def stage_config(cfg: RunConfig, stage: Stage | str, adapter: str | None = None) -> StageConfig:
    try:
        stage = Stage(str(stage))
    except ValueError:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {[s.value for s in Stage]}") from None
    s, tau = cfg.schedule, cfg.fec.tau
    if stage is Stage.STAGE1:
        groups = {"embedder", "general", "gate", "projector"}
        return StageConfig(stage, frozenset(groups), s.epochs_stage1, s.lr_pretrain, Domain.GENERAL, False, tau=tau)
    if stage is Stage.STAGE2:
        groups = {"embedder", "emotion", "gate", "projector"}
        return StageConfig(stage, frozenset(groups), s.epochs_stage2, s.lr_pretrain, Domain.EMOTION, False, tau=tau)
    if stage is Stage.STAGE3:
        groups = {"general", "emotion", "gate", "projector", "decoder"}
        if s.stage3_train_embedder:
            groups.add("embedder")
        return StageConfig(stage, frozenset(groups), s.epochs_stage3, s.lr_pretrain, None, False, tau=tau)
    active = cfg.fec.active
    if s.finetune_strategy is FinetuneStrategy.FULL:
        if adapter is not None:
            raise ConfigError("the full fine-tuning strategy takes no adapter name")
        return StageConfig(
            stage, frozenset({"decoder"}), s.epochs_finetune, s.lr_finetune, Domain.EMOTION, active, tau=tau
        )
    if adapter is None:
        raise ConfigError("LoRA fine-tuning needs an adapter name")
    if adapter not in cfg.lora.adapters:
        raise ConfigError(f"unknown adapter {adapter!r}; configured: {cfg.lora.adapters}")
    return StageConfig(
        stage, frozenset({f"lora:{adapter}"}), s.epochs_finetune, s.lr_finetune, Domain.EMOTION, active, adapter, tau
    )


def apply_stage_mask(model: ToyModel, stage: StageConfig) -> dict[str, Tensor]:
    """Flag exactly the stage's parameters as trainable and return them by name."""
    model.adapters.select(stage.adapter)
    trainable: dict[str, Tensor] = {}
    for name, t in model.named_parameters().items():
        t.requires_grad = stage.trainable(name)
        t.grad = None
        if t.requires_grad:
            trainable[name] = t
    return trainable


# -- schedule and optimizer --


def lr_at(step: int, total_steps: int, peak: float, warmup_ratio: float) -> float:
    """Linear warmup to ``peak`` over ceil(ratio * total) steps, then cosine decay to 0."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return peak * step / warm
    if warm >= total_steps:
        return peak
    progress = (step - warm) / (total_steps - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, opt: OptimizerConfig) -> OptimizerState:
        return cls(opt.beta1, opt.beta2, opt.eps, opt.weight_decay)


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One bias-corrected AdamW update with decoupled weight decay, in parameter order."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"no gradient for trainable parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - lr * (update + state.weight_decay * p.data)


# -- training --


class RunReport(BaseModel):
    stage: str
    epochs: int = 0
    steps: int = 0
    samples: int = 0
    clips: int = 0
    key_frame_clips: int = 0
    fec_active: bool = False
    trainable: list[str] = Field(default_factory=list)
    first_batch_loss: float | None = None
    epoch_losses: list[float] = Field(default_factory=list)
    frozen_checksums: dict[str, str] = Field(default_factory=dict)
    metrics: EvalReport | None = None
    wall_time: float = 0.0


def _stream(seed: int, *counters: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counters])))


def snapshot(params: Mapping[str, Tensor]) -> dict[str, str]:
    return {name: tensor_checksum(t.data) for name, t in params.items()}


def verify_frozen(model: ToyModel, before: Mapping[str, str], stage: str) -> None:
    current = model.named_parameters()
    drifted = sorted(n for n, digest in before.items() if tensor_checksum(current[n].data) != digest)
    if drifted:
        raise FreezeViolationError(f"{stage}: frozen parameters changed: {', '.join(drifted)}")


def train_stage(
    model: ToyModel,
    stage: StageConfig,
    data: Sequence[SyntheticSample],
    seed: int,
    optimizer: OptimizerConfig | None = None,
    eval_workers: int = 1,
    clips: Sequence[ClipSample] = (),
) -> RunReport:
    """Run ``stage.epochs`` epochs over the stage's domain of ``data`` and ``clips``.

    Clips go through key-frame capture (``stage.fec_active`` at ``stage.tau``)
    once per stage, then through the patch embedder on every step. Batches
    mixing token counts are split into same-shape groups whose losses are
    weighted by group size.

    Shuffling and dropout draw from counter-based streams keyed on
    (seed, stage, epoch) and (seed, stage, step), so runs repeat exactly.
    Parameters outside the stage mask are checksummed before and verified after.
    """
    opt = optimizer or OptimizerConfig()
    report = RunReport(stage=stage.label, epochs=stage.epochs, fec_active=stage.fec_active)
    if stage.epochs == 0:
        logger.info("%s: zero epochs, nothing to do", stage.label)
        return report

    started = time.monotonic()
    trainable = apply_stage_mask(model, stage)
    frozen = {n: t for n, t in model.named_parameters().items() if n not in trainable}
    before = snapshot(frozen)
    samples: list[TrainItem] = [*select_domain(data, stage.domain)]
    prepared = prepare_clips(
        select_domain(clips, stage.domain), model.embedder.patch, stage.tau, stage.fec_active
    )
    samples.extend(prepared)
    if not samples:
        raise ContractError(f"{stage.label}: no {stage.domain or 'mixed'} samples to train on")

    steps_per_epoch = -(-len(samples) // opt.batch_size)
    total = steps_per_epoch * stage.epochs
    state = OptimizerState.from_config(opt)
    logger.info(
        "%s: %d trainable tensors, %d samples (%d clips), %d steps (peak lr %g)",
        stage.label, len(trainable), len(samples), len(prepared), total, stage.peak_lr,
    )

    step = 0
    for epoch in range(stage.epochs):
        order = _stream(seed, stage.stage.ordinal, epoch, 0).permutation(len(samples))
        losses: list[float] = []
        for start in range(0, len(samples), opt.batch_size):
            step += 1
            batch = [samples[i] for i in order[start : start + opt.batch_size]]
            for p in trainable.values():
                p.grad = None
            rng = _stream(seed, stage.stage.ordinal, step, 1)
            with Tape():
                parts = []
                for group in batch_inputs(model, batch):
                    logits, _ = forward_with_trace(model, group.values, group.text, training=True, rng=rng)
                    parts.append(cross_entropy(logits, group.labels) * (len(group.positions) / len(batch)))
                loss = sum(parts[1:], start=parts[0])
            backward(loss)
            reached = {n: p for n, p in trainable.items() if p.grad is not None}
            lr = lr_at(step, total, stage.peak_lr, opt.warmup_ratio)
            adamw_step(reached, state, lr)
            losses.append(loss.item())
            if report.first_batch_loss is None:
                report.first_batch_loss = losses[0]
        report.epoch_losses.append(math.fsum(losses) / len(losses))
        logger.info("%s epoch %d/%d: mean loss %.4f", stage.label, epoch + 1, stage.epochs, report.epoch_losses[-1])

    verify_frozen(model, before, stage.label)
    logger.info("%s: %d frozen tensors verified unchanged", stage.label, len(before))
    # trained values land on the float32 grid so a saved checkpoint reloads exactly
    snap_to_float32(trainable)
    for t in model.named_parameters().values():
        t.grad = None
    report.steps = total
    report.samples = len(samples)
    report.clips = len(prepared)
    report.key_frame_clips = sum(1 for c in prepared if c.key_tokens)
    report.trainable = sorted(trainable)
    report.frozen_checksums = before
    report.metrics = evaluate(model, samples, workers=eval_workers)
    report.wall_time = time.monotonic() - started
    return report


def run_schedule(
    model: ToyModel,
    cfg: RunConfig,
    data: Sequence[SyntheticSample],
    finetune_data: Mapping[str, Sequence[SyntheticSample]] | None = None,
    seed: int | None = None,
    clips: Sequence[ClipSample] = (),
    finetune_clips: Mapping[str, Sequence[ClipSample]] | None = None,
) -> list[RunReport]:
    """Stages 1, 2, 3, then fine-tuning once per adapter (or once with the full strategy).

    ``finetune_data`` and ``finetune_clips`` map adapter names to their
    datasets; missing names train on ``data`` and ``clips``.
    """
    seed = cfg.seeds.train if seed is None else seed
    finetune_data = finetune_data or {}
    finetune_clips = finetune_clips or {}
    reports = [
        train_stage(model, stage_config(cfg, s), data, seed, cfg.optimizer, clips=clips)
        for s in (Stage.STAGE1, Stage.STAGE2, Stage.STAGE3)
    ]
    if cfg.schedule.finetune_strategy is FinetuneStrategy.FULL:
        stage = stage_config(cfg, Stage.FINETUNE)
        reports.append(train_stage(model, stage, data, seed, cfg.optimizer, clips=clips))
    else:
        for name in cfg.lora.adapters:
            stage = stage_config(cfg, Stage.FINETUNE, name)
            reports.append(
                train_stage(
                    model,
                    stage,
                    finetune_data.get(name, data),
                    seed,
                    cfg.optimizer,
                    clips=finetune_clips.get(name, clips),
                )
            )
    return reports
