"""Central finite-difference oracle for the autograd engine."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from emomoe.compressor import (
    expert_forward,
    fusion_projector_forward,
    gate_forward,
    hybrid_compress,
    init_expert,
    init_gate,
    init_hybrid,
    init_projector,
    merged_count,
    mlp_projector_forward,
    token_merge,
)
from emomoe.config import RunConfig
from emomoe.errors import ContractError, NumericError
from emomoe.fec import FrameRecord
from emomoe.lora import Linear, init_adapter, lora_forward
from emomoe.model import build_model, model_forward_frames
from emomoe.tensor import (
    Tape,
    Tensor,
    backward,
    cross_entropy,
    gelu,
    layer_norm,
    mul,
    named_tensors,
    parameter,
    reshape,
    self_attention,
    sigmoid,
    softmax,
    tsum,
)

logger = logging.getLogger(__name__)

EPS_MIN = 1e-8
EPS_MAX = 1e-4
_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Per-parameter max relative disagreement between autograd and central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    eps: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.__getitem__)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol

    def merge(self, other: GradCheckReport, prefix: str = "") -> None:
        for name, err in other.errors.items():
            key = f"{prefix}{name}"
            self.errors[key] = max(err, self.errors.get(key, 0.0))


def _scalar(value: Tensor) -> float:
    if not isinstance(value, Tensor) or value.ndim != 0:
        raise ContractError("checked function must return a scalar Tensor")
    out = float(value.data)
    if not np.isfinite(out):
        raise NumericError(f"checked function returned a non-finite value: {out}")
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, per_coordinate: bool = False) -> float:
    """max|a-b| over max(max|a|, max|b|, 1e-8).

    With ``per_coordinate`` each coordinate is scaled by its own
    max(|a_i|, |b_i|, 1e-8) and the worst ratio is returned. Near-zero
    coordinates then carry central-difference round-off at full weight.
    """
    diff = np.abs(analytic - numeric)
    if per_coordinate:
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _FLOOR)
        return float(np.max(diff / scale))
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), _FLOOR)
    return float(np.max(diff)) / scale


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, eps: float) -> np.ndarray:
    """(f(theta+eps) - f(theta-eps)) / (2 eps) for every coordinate of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = _scalar(f())
        flat[i] = orig - eps
        minus = _scalar(f())
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    per_coordinate: bool = False,
) -> GradCheckReport:
    """Compare autograd gradients of ``f`` against central differences.

    ``f`` closes over ``params`` and returns a scalar loss. Parameters are
    perturbed in place and restored after each coordinate.
    """
    if not EPS_MIN <= eps <= EPS_MAX:
        raise ContractError(f"eps must lie in [{EPS_MIN}, {EPS_MAX}], got {eps}")
    if not params:
        raise ContractError("finite_diff_check needs at least one parameter")

    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape():
        loss = f()
    _scalar(loss)
    backward(loss)

    report = GradCheckReport(eps=eps)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report.errors[name] = relative_error(analytic, numeric_gradient(f, p, eps), per_coordinate)
    logger.debug("finite-difference check: max error %.3e at %s", report.max_error, report.worst)
    return report


# -- block suite --

BLOCKS = ("ops", "expert", "gate", "mlp", "fusion", "hybrid", "lora", "decoder")


def _randomize(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.5) -> list[Tensor]:
    for name, t in params.items():
        t.data = rng.normal(scale=scale, size=t.shape)
        t.name = name
    return list(params.values())


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(mul(out, Tensor(weights)))


def _tiny_config() -> RunConfig:
    return RunConfig.model_validate(
        {
            "model": {
                "d_v": 5, "d_t": 4, "d_h": 4, "d_ff": 4, "n1": 4, "m": 2,
                "classes": 2, "k": 2, "patch": 2, "vocab": 6,
            },
            "data": {"face_tokens": 2},
            "lora": {"rank": 2, "alpha": 2.0, "dropout": 0.0, "adapters": "check"},
        }
    )


def check_blocks(seed: int, eps: float = 1e-6) -> dict[str, GradCheckReport]:
    """Finite-difference check of every differentiable block on shapes drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    n, d_v, k = int(rng.integers(2, 7)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    d_h, d_t = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    d_in, n2 = k * d_v, merged_count(n, k)
    x = parameter(rng.normal(size=(n, d_v)), name="input")
    out_w = rng.normal(size=(n2, d_t))
    reports: dict[str, GradCheckReport] = {}

    # primitive ops on one [rows, cols] operand
    rows, cols = int(rng.integers(1, 9)), int(rng.integers(2, 9))
    a = parameter(rng.normal(size=(rows, cols)), name="a")
    gamma = parameter(rng.normal(size=cols), name="gamma")
    beta = parameter(rng.normal(size=cols), name="beta")
    wq, wk, wv = (parameter(rng.normal(scale=0.5, size=(cols, cols)), name=f"w{c}") for c in "qkv")
    targets = rng.integers(0, cols, size=rows)
    mix = rng.normal(size=(rows, cols))

    def ops() -> Tensor:
        h = layer_norm(a, gamma, beta, 1e-5)
        h = h + gelu(a) + sigmoid(a) * softmax(a, axis=-1)
        h = h + self_attention(a, wq, wk, wv)
        return cross_entropy(h, targets) + _weighted_sum(h, mix)

    reports["ops"] = finite_diff_check(ops, [a, gamma, beta, wq, wk, wv], eps)

    expert = init_expert(rng, d_in, d_h, d_t)
    params = _randomize(named_tensors(expert, "expert"), rng)
    reports["expert"] = finite_diff_check(
        lambda: _weighted_sum(expert_forward(token_merge(x, k), expert), out_w), [x, *params], eps
    )

    gate = init_gate(rng, d_in)
    params = _randomize(named_tensors(gate, "gate"), rng)
    gate_w = rng.normal(size=(n2, 1))
    reports["gate"] = finite_diff_check(
        lambda: _weighted_sum(gate_forward(token_merge(x, k), gate), gate_w), [x, *params], eps
    )

    for kind, forward in (("mlp", mlp_projector_forward), ("fusion", fusion_projector_forward)):
        proj = init_projector(kind, rng, d_in, d_h, d_t)
        params = _randomize(named_tensors(proj, kind), rng)
        reports[kind] = finite_diff_check(
            lambda p=proj, fwd=forward: _weighted_sum(fwd(x, p, k).values, out_w), [x, *params], eps
        )

    hybrid = init_hybrid(rng, d_in, d_h, d_t)
    params = _randomize(named_tensors(hybrid, "hybrid"), rng)
    reports["hybrid"] = finite_diff_check(
        lambda: _weighted_sum(hybrid_compress(x, hybrid, k).values, out_w), [x, *params], eps
    )

    base = Linear(parameter(rng.normal(size=(d_v, d_t))), parameter(rng.normal(size=d_t)), "base")
    adapter = init_adapter(rng, "check", base, rank=min(d_v, d_t), alpha=float(rng.uniform(0.5, 2.0)))
    adapter.b.data = rng.normal(size=adapter.b.shape)
    lora_w = rng.normal(size=(n, d_t))
    params = [base.weight, base.bias, adapter.a, adapter.b]
    for p, label in zip(params, ("weight", "bias", "A", "B"), strict=True):
        p.name = label
    reports["lora"] = finite_diff_check(
        lambda: _weighted_sum(lora_forward(x, base, adapter), lora_w), [x, *params], eps
    )

    cfg = _tiny_config()
    model = build_model(cfg, seed=seed)
    params = _randomize(model.named_parameters(), rng)
    model.adapters.select("check")
    frames = [
        FrameRecord(i, float(i), Tensor(rng.uniform(size=(2, 4, 3)))) for i in range(2)
    ]
    text = rng.integers(0, cfg.model.vocab, size=cfg.model.m)
    label = [int(rng.integers(cfg.model.classes))]

    def decoder() -> Tensor:
        logits = model_forward_frames(model, frames, text)
        return cross_entropy(reshape(logits, (1, cfg.model.classes)), label)

    reports["decoder"] = finite_diff_check(decoder, params, eps)
    return reports


def run_grad_checks(seeds: Iterable[int], eps: float = 1e-6) -> dict[str, GradCheckReport]:
    """Worst per-parameter error of every block across ``seeds``."""
    merged = {block: GradCheckReport(eps=eps) for block in BLOCKS}
    for seed in seeds:
        for block, report in check_blocks(seed, eps).items():
            merged[block].merge(report)
        logger.info(
            "seed %d: worst block error %.3e", seed, max(r.max_error for r in merged.values())
        )
    return merged
