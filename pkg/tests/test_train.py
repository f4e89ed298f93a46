"""Tests for the optimizer, learning-rate schedule and staged training."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from emomoe import train
from emomoe.checkpoint import snap_to_float32
from emomoe.config import RunConfig
from emomoe.data import Domain, generate_clip_split, generate_clips, generate_dataset, generate_split, prepare_clips
from emomoe.errors import ConfigError, ContractError, FreezeViolationError, NumericError
from emomoe.model import batch_inputs, build_model, forward_with_trace
from emomoe.tensor import Tape, backward, cross_entropy, parameter
from emomoe.train import (
    OptimizerState,
    Stage,
    adamw_step,
    apply_stage_mask,
    lr_at,
    param_group,
    run_schedule,
    snapshot,
    stage_config,
    train_stage,
)


def _with(cfg: RunConfig, section: str, **values) -> RunConfig:
    return RunConfig.model_validate({**cfg.model_dump(), section: {**getattr(cfg, section).model_dump(), **values}})


# -- schedule --


def test_lr_schedule_landmarks():
    assert lr_at(0, 1000, 1.0, 0.01) == 0.0
    assert lr_at(5, 1000, 1.0, 0.01) == pytest.approx(0.5)
    assert lr_at(10, 1000, 1.0, 0.01) == pytest.approx(1.0)
    assert lr_at(505, 1000, 1.0, 0.01) == pytest.approx(0.5)
    assert lr_at(1000, 1000, 1.0, 0.01) == pytest.approx(0.0, abs=1e-15)


def test_lr_schedule_is_non_increasing_after_warmup():
    values = [lr_at(s, 200, 0.3, 0.05) for s in range(10, 201)]
    assert all(a >= b for a, b in zip(values, values[1:], strict=False))


def test_lr_schedule_bounds():
    with pytest.raises(ConfigError):
        lr_at(0, 0, 1.0, 0.01)
    with pytest.raises(ContractError):
        lr_at(11, 10, 1.0, 0.01)
    assert lr_at(3, 3, 0.2, 1.0) == pytest.approx(0.2)


# -- optimizer --


def test_adamw_first_step():
    p = parameter([2.0, -3.0])
    p.grad = np.array([1.0, -1.0])
    adamw_step({"p": p}, OptimizerState(weight_decay=0.0), lr=0.1)
    step = 0.1 / (1.0 + 1e-8)
    np.testing.assert_allclose(p.data, [2.0 - step, -3.0 + step], rtol=1e-12)


def test_adamw_pure_decay():
    p = parameter([2.0, -4.0])
    p.grad = np.zeros(2)
    adamw_step({"p": p}, OptimizerState(weight_decay=0.1), lr=0.5)
    np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95], rtol=1e-12)


def test_adamw_descends_quadratic_bowls():
    rng = np.random.default_rng(0)
    for _ in range(50):
        start = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
        p = parameter([start])
        state = OptimizerState(weight_decay=0.0)
        for _ in range(100):
            p.grad = p.data.copy()
            adamw_step({"p": p}, state, lr=1e-3)
        assert abs(p.data[0]) < abs(start)


def test_adamw_rejects_missing_or_bad_gradients():
    p = parameter([1.0])
    with pytest.raises(ContractError):
        adamw_step({"p": p}, OptimizerState(), lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        adamw_step({"p": p}, OptimizerState(), lr=0.1)


# -- stage table --


@pytest.mark.parametrize(
    ("name", "group"),
    [
        ("embedder/weight", "embedder"),
        ("projector/general/w_in", "general"),
        ("projector/emotion/gamma", "emotion"),
        ("projector/gate/wq", "gate"),
        ("projector/w1", "projector"),
        ("projector/p1/w1", "projector"),
        ("decoder/block0/attn_q/weight", "decoder"),
        ("text/embedding", "decoder"),
        ("classifier/bias", "decoder"),
        ("lora/ver/decoder/block0/attn_q/A", "lora:ver"),
    ],
)
def test_param_group(name: str, group: str):
    assert param_group(name) == group


def test_param_group_unknown():
    with pytest.raises(ConfigError):
        param_group("mystery/weight")


def test_stage_masks(small_cfg: RunConfig):
    model = build_model(small_cfg)
    s1 = set(apply_stage_mask(model, stage_config(small_cfg, "1")))
    assert any(n.startswith("projector/general/") for n in s1)
    assert any(n.startswith("projector/gate/") for n in s1)
    assert any(n.startswith("embedder/") for n in s1)
    assert not any(n.startswith(("projector/emotion/", "decoder/", "classifier/", "lora/", "text/")) for n in s1)

    s2 = set(apply_stage_mask(model, stage_config(small_cfg, Stage.STAGE2)))
    assert any(n.startswith("projector/emotion/") for n in s2)
    assert not any(n.startswith(("projector/general/", "decoder/")) for n in s2)

    s3 = set(apply_stage_mask(model, stage_config(small_cfg, "3")))
    assert not any(n.startswith("lora/") for n in s3)
    assert {n for n in model.named_parameters() if not n.startswith("lora/")} == s3

    ft = set(apply_stage_mask(model, stage_config(small_cfg, "finetune", "ver")))
    assert ft and all(n.startswith("lora/ver/") for n in ft)
    assert model.adapters.active == "ver"


def test_stage3_can_freeze_embedder(small_cfg: RunConfig):
    cfg = _with(small_cfg, "schedule", stage3_train_embedder=False)
    assert "embedder" not in stage_config(cfg, "3").groups


def test_stage_config_errors(small_cfg: RunConfig):
    with pytest.raises(ConfigError):
        stage_config(small_cfg, "4")
    with pytest.raises(ConfigError):
        stage_config(small_cfg, "finetune")
    full = _with(small_cfg, "schedule", finetune_strategy="full")
    assert stage_config(full, "finetune").groups == frozenset({"decoder"})
    with pytest.raises(ConfigError):
        stage_config(full, "finetune", "ver")


def test_stage_domains(small_cfg: RunConfig):
    assert stage_config(small_cfg, "1").domain is Domain.GENERAL
    assert stage_config(small_cfg, "2").domain is Domain.EMOTION
    assert stage_config(small_cfg, "3").domain is None
    ft = stage_config(small_cfg, "finetune", "dfew")
    assert ft.fec_active
    assert ft.label == "finetune:dfew"


# -- training --


def test_zero_epochs_is_a_no_op(small_cfg: RunConfig):
    cfg = _with(small_cfg, "schedule", epochs_stage1=0)
    model = build_model(cfg)
    before = snapshot(model.named_parameters())
    report = train_stage(model, stage_config(cfg, "1"), generate_dataset(0, 16, cfg), seed=1)
    assert report.steps == 0
    assert report.epoch_losses == []
    assert snapshot(model.named_parameters()) == before


def test_frozen_parameters_untouched(small_cfg: RunConfig):
    model = build_model(small_cfg)
    data = generate_dataset(0, 32, small_cfg)
    stage = stage_config(small_cfg, "1")
    before = snapshot(model.named_parameters())
    report = train_stage(model, stage, data, seed=3, optimizer=small_cfg.optimizer)
    after = snapshot(model.named_parameters())
    changed = {n for n in before if before[n] != after[n]}
    assert changed
    assert changed <= set(report.trainable)
    assert all(stage.trainable(n) for n in changed)
    assert report.samples == 16
    assert report.steps == 1
    assert set(report.frozen_checksums) == set(before) - set(report.trainable)


def test_freeze_violation_detected(small_cfg: RunConfig, monkeypatch: pytest.MonkeyPatch):
    model = build_model(small_cfg)
    real_step = train.adamw_step

    def leaky_step(params, state, lr):
        real_step(params, state, lr)
        model.classifier.weight.data = model.classifier.weight.data + 1.0

    monkeypatch.setattr(train, "adamw_step", leaky_step)
    with pytest.raises(FreezeViolationError, match="classifier/weight"):
        train_stage(model, stage_config(small_cfg, "1"), generate_dataset(0, 32, small_cfg), seed=3)


def test_finetune_touches_only_its_adapter(small_cfg: RunConfig):
    model = build_model(small_cfg)
    data = generate_split(small_cfg, "finetune/ver")
    before = snapshot(model.named_parameters())
    report = train_stage(model, stage_config(small_cfg, "finetune", "ver"), data, seed=2, optimizer=small_cfg.optimizer)
    after = snapshot(model.named_parameters())
    changed = {n for n in before if before[n] != after[n]}
    assert changed
    assert all(n.startswith("lora/ver/") for n in changed)
    assert report.stage == "finetune:ver"


def test_training_is_deterministic(small_cfg: RunConfig):
    data = generate_dataset(0, 40, small_cfg)
    results = []
    for _ in range(2):
        model = build_model(small_cfg)
        report = train_stage(model, stage_config(small_cfg, "3"), data, seed=5, optimizer=small_cfg.optimizer)
        results.append((snapshot(model.named_parameters()), report.epoch_losses))
    assert results[0] == results[1]


def test_different_seed_changes_training(small_cfg: RunConfig):
    data = generate_dataset(0, 40, small_cfg)
    snaps = []
    for seed in (1, 2):
        model = build_model(small_cfg)
        train_stage(model, stage_config(small_cfg, "3"), data, seed=seed, optimizer=small_cfg.optimizer)
        snaps.append(snapshot(model.named_parameters()))
    assert snaps[0] != snaps[1]


def test_trained_values_sit_on_float32_grid(small_cfg: RunConfig):
    model = build_model(small_cfg)
    report = train_stage(model, stage_config(small_cfg, "1"), generate_dataset(0, 32, small_cfg), seed=1)
    params = model.named_parameters()
    for name in report.trainable:
        data = params[name].data
        np.testing.assert_array_equal(data, data.astype(np.float32).astype(np.float64))


def test_loss_goes_down(small_cfg: RunConfig):
    cfg = _with(_with(small_cfg, "schedule", epochs_stage3=8, lr_pretrain=0.02), "data", n=200)
    model = build_model(cfg)
    report = train_stage(model, stage_config(cfg, "3"), generate_dataset(7, 200, cfg), seed=7, optimizer=cfg.optimizer)
    assert len(report.epoch_losses) == 8
    assert report.epoch_losses[-1] < report.first_batch_loss
    assert report.metrics is not None


def test_stage_without_domain_samples(small_cfg: RunConfig):
    model = build_model(small_cfg)
    emotion_only = generate_split(small_cfg, "finetune/ver")
    with pytest.raises(ContractError):
        train_stage(model, stage_config(small_cfg, "1"), emotion_only, seed=0)


def test_schedule_runs_every_stage(small_cfg: RunConfig):
    model = build_model(small_cfg)
    data = generate_dataset(0, 32, small_cfg)
    reports = run_schedule(model, small_cfg, data)
    assert [r.stage for r in reports] == ["stage1", "stage2", "stage3", "finetune:ver", "finetune:dfew"]


# -- pixel clips --


def _embedder(model) -> dict[str, str]:
    return {n: d for n, d in snapshot(model.named_parameters()).items() if n.startswith("embedder/")}


def test_key_frames_change_embedder_gradient(small_cfg: RunConfig):
    model = build_model(small_cfg)
    clips = [c for c in generate_clips(5, 12, small_cfg) if c.domain == Domain.EMOTION]
    grads = {}
    for active in (True, False):
        prepared = prepare_clips(clips, model.embedder.patch, 0.9, active)
        (group,) = batch_inputs(model, prepared)
        assert group.values.shape == (len(clips), 20 if active else 16, small_cfg.model.d_v)
        model.embedder.weight.grad = None
        with Tape():
            logits, _ = forward_with_trace(model, group.values, group.text)
            loss = cross_entropy(logits, group.labels)
        backward(loss)
        assert model.embedder.weight.grad is not None
        grads[active] = model.embedder.weight.grad.copy()
    assert not np.allclose(grads[True], grads[False])


def test_stage_capture_flag_changes_training(small_cfg: RunConfig):
    cfg = _with(small_cfg, "data", clips=8)
    clips = generate_clip_split(cfg, "train")
    data = generate_dataset(0, 32, cfg)
    stage2 = stage_config(cfg, "2")
    assert not stage2.fec_active
    trained = {}
    for active in (False, True):
        model = build_model(cfg)
        before = _embedder(model)
        report = train_stage(
            model, dataclasses.replace(stage2, fec_active=active), data, seed=3, optimizer=cfg.optimizer, clips=clips
        )
        assert report.fec_active is active
        assert report.clips == 4
        assert report.samples == 16 + 4
        assert report.key_frame_clips == (4 if active else 0)
        trained[active] = _embedder(model)
        assert trained[active] != before
    assert trained[True] != trained[False]


def test_embedding_samples_leave_embedder_alone(small_cfg: RunConfig):
    model = build_model(small_cfg)
    snap_to_float32(model.named_parameters())
    before = _embedder(model)
    train_stage(model, stage_config(small_cfg, "2"), generate_dataset(0, 32, small_cfg), seed=3)
    assert _embedder(model) == before


def test_capture_settings_reach_stages(small_cfg: RunConfig):
    assert not any(stage_config(small_cfg, s).fec_active for s in ("1", "2", "3"))
    assert stage_config(small_cfg, "finetune", "ver").fec_active
    off = _with(small_cfg, "fec", active=False, tau=0.8)
    ft = stage_config(off, "finetune", "ver")
    assert not ft.fec_active
    assert ft.tau == 0.8


def test_schedule_with_clips(small_cfg: RunConfig):
    cfg = _with(small_cfg, "data", clips=8)
    model = build_model(cfg)
    finetune_clips = {n: generate_clip_split(cfg, f"finetune/{n}") for n in cfg.lora.adapters}
    reports = run_schedule(
        model, cfg, generate_dataset(0, 32, cfg), clips=generate_clip_split(cfg, "train"), finetune_clips=finetune_clips
    )
    by_stage = {r.stage: r for r in reports}
    assert by_stage["stage1"].clips == 4
    assert by_stage["stage1"].key_frame_clips == 0
    assert by_stage["stage3"].clips == 8
    assert by_stage["finetune:ver"].clips == 4
    assert by_stage["finetune:ver"].key_frame_clips == 4


@pytest.mark.slow
def test_gate_prefers_emotion_expert_on_faces(small_cfg: RunConfig):
    cfg = _with(
        _with(small_cfg, "schedule", epochs_stage1=4, epochs_stage2=4, epochs_stage3=2, epochs_finetune=1),
        "data",
        n=256,
    )
    model = build_model(cfg)
    splits = {name: generate_split(cfg, f"finetune/{name}") for name in cfg.lora.adapters}
    run_schedule(model, cfg, generate_split(cfg, "train"), splits)
    model.adapters.select(None)
    from emomoe.metrics import gate_report

    gate = gate_report(model, generate_split(cfg, "eval"))
    assert gate.domains["emotion"].emotion_weight > gate.domains["general"].emotion_weight


@pytest.mark.slow
def test_default_schedule_routes_each_domain_to_its_expert():
    cfg = RunConfig()
    assert cfg.data.n == 2000
    model = build_model(cfg)
    splits = {name: generate_split(cfg, f"finetune/{name}") for name in cfg.lora.adapters}
    run_schedule(model, cfg, generate_split(cfg, "train"), splits)
    model.adapters.select(None)
    from emomoe.metrics import gate_report

    gate = gate_report(model, generate_split(cfg, "eval"))
    assert gate.domains["emotion"].emotion_weight > 0.55
    assert gate.domains["general"].general_weight > 0.55
