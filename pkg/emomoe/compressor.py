"""Visual projectors: the gated two-expert compressor and its MLP / Fusion ablations.

All three variants first merge ``k`` consecutive visual tokens by
concatenating their features, then project the merged tokens to the
decoder width. Inputs may be a single sequence ``[N1, d_v]`` or a batch
``[B, N1, d_v]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from emomoe._compat import StrEnum

import numpy as np

from emomoe.errors import ConfigError, ContractError, DimensionError
from emomoe.tensor import (
    Tensor,
    gelu,
    layer_norm,
    matmul,
    named_tensors,
    parameter,
    relu,
    reshape,
    self_attention,
    sigmoid,
    softmax,
    take,
)

logger = logging.getLogger(__name__)

SENTINEL_GATE = 0.5


class ProjectorKind(StrEnum):
    MLP = "mlp"
    FUSION = "fusion"
    HYBRID = "hybrid"


class TokenSource(StrEnum):
    ORIGINAL = "original"
    KEY_FRAME = "key_frame"


@dataclass
class VisualEmbeddings:
    """Vision-encoder output ``[N1, d_v]`` (or ``[B, N1, d_v]``) with a per-token source tag."""

    values: Tensor
    sources: tuple[TokenSource, ...] = ()

    def __post_init__(self) -> None:
        if self.values.ndim not in (2, 3):
            raise DimensionError(f"visual embeddings must be [N1, d_v] or [B, N1, d_v], got {self.values.shape}")
        if not self.sources:
            self.sources = (TokenSource.ORIGINAL,) * self.n_tokens
        elif len(self.sources) != self.n_tokens:
            raise ContractError(f"{len(self.sources)} source tags for {self.n_tokens} tokens")

    @property
    def n_tokens(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


@dataclass
class VisualTokens:
    """Compressed tokens ``[N2, d_t]`` and the emotion-expert weight behind each one."""

    values: Tensor
    gate_trace: Tensor


# -- parameter containers --


@dataclass
class ExpertParams:
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    gamma: Tensor
    beta: Tensor


@dataclass
class GateParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    w_gate: Tensor
    b_gate: Tensor


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    kind: ProjectorKind = field(default=ProjectorKind.MLP, init=False)


@dataclass
class FusionParams:
    p1: MlpParams
    p2: MlpParams
    ratio: MlpParams

    kind: ProjectorKind = field(default=ProjectorKind.FUSION, init=False)


@dataclass
class HybridParams:
    emotion: ExpertParams
    general: ExpertParams
    gate: GateParams
    ln_eps: float = 1e-5

    kind: ProjectorKind = field(default=ProjectorKind.HYBRID, init=False)

    def __post_init__(self) -> None:
        for a, b in zip(
            named_tensors(self.emotion, "e").values(),
            named_tensors(self.general, "g").values(),
            strict=True,
        ):
            if a.shape != b.shape:
                raise DimensionError(f"expert shapes differ: {a.shape} vs {b.shape}")


Projector = MlpParams | FusionParams | HybridParams


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


def _zeros(shape: tuple[int, ...], name: str) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def init_expert(rng: np.random.Generator, d_in: int, d_h: int, d_t: int) -> ExpertParams:
    return ExpertParams(
        w_in=_uniform(rng, d_in, (d_in, d_h), "w_in"),
        b_in=_zeros((d_h,), "b_in"),
        w_out=_uniform(rng, d_h, (d_h, d_t), "w_out"),
        b_out=_zeros((d_t,), "b_out"),
        gamma=parameter(np.ones(d_t), name="gamma"),
        beta=_zeros((d_t,), "beta"),
    )


def init_gate(rng: np.random.Generator, d_in: int) -> GateParams:
    # zero head: every token starts at G = 0.5
    return GateParams(
        wq=_uniform(rng, d_in, (d_in, d_in), "wq"),
        wk=_uniform(rng, d_in, (d_in, d_in), "wk"),
        wv=_uniform(rng, d_in, (d_in, d_in), "wv"),
        w_gate=_zeros((d_in, 2), "w_gate"),
        b_gate=_zeros((2,), "b_gate"),
    )


def init_mlp(rng: np.random.Generator, d_in: int, d_h: int, d_out: int) -> MlpParams:
    return MlpParams(
        w1=_uniform(rng, d_in, (d_in, d_h), "w1"),
        b1=_zeros((d_h,), "b1"),
        w2=_uniform(rng, d_h, (d_h, d_out), "w2"),
        b2=_zeros((d_out,), "b2"),
    )


def init_fusion(rng: np.random.Generator, d_in: int, d_h: int, d_t: int) -> FusionParams:
    ratio = init_mlp(rng, d_in, d_h, 1)
    ratio.w2 = _zeros((d_h, 1), "w2")
    return FusionParams(p1=init_mlp(rng, d_in, d_h, d_t), p2=init_mlp(rng, d_in, d_h, d_t), ratio=ratio)


def init_hybrid(
    rng: np.random.Generator, d_in: int, d_h: int, d_t: int, ln_eps: float = 1e-5
) -> HybridParams:
    return HybridParams(
        emotion=init_expert(rng, d_in, d_h, d_t),
        general=init_expert(rng, d_in, d_h, d_t),
        gate=init_gate(rng, d_in),
        ln_eps=ln_eps,
    )


def init_projector(
    kind: ProjectorKind | str,
    rng: np.random.Generator,
    d_in: int,
    d_h: int,
    d_t: int,
    ln_eps: float = 1e-5,
) -> Projector:
    kind = ProjectorKind(kind)
    if kind is ProjectorKind.MLP:
        return init_mlp(rng, d_in, d_h, d_t)
    if kind is ProjectorKind.FUSION:
        return init_fusion(rng, d_in, d_h, d_t)
    return init_hybrid(rng, d_in, d_h, d_t, ln_eps)


def projector_widths(projector: Projector) -> tuple[int, int]:
    """(merged input width, output token width)."""
    if isinstance(projector, HybridParams):
        return projector.emotion.w_in.shape[0], projector.emotion.w_out.shape[1]
    if isinstance(projector, FusionParams):
        return projector.p1.w1.shape[0], projector.p1.w2.shape[1]
    return projector.w1.shape[0], projector.w2.shape[1]


def param_count(projector: Projector, core_only: bool = False) -> int:
    """Number of scalar parameters; ``core_only`` drops the Fusion ratio head."""
    if core_only and isinstance(projector, FusionParams):
        return param_count(projector.p1) + param_count(projector.p2)
    return sum(t.size for t in named_tensors(projector, "p").values())


# -- forward passes --


def merged_count(n1: int, k: int) -> int:
    if k <= 0:
        raise ConfigError(f"merge factor k must be positive, got {k}")
    return -(-n1 // k)


def token_merge(e: VisualEmbeddings | Tensor, k: int) -> Tensor:
    """Concatenate the features of each run of ``k`` consecutive tokens.

    The sequence is padded by repeating its last token up to a multiple of ``k``.
    """
    values = e.values if isinstance(e, VisualEmbeddings) else e
    if values.ndim not in (2, 3):
        raise DimensionError(f"token_merge expects [N1, d_v] or [B, N1, d_v], got {values.shape}")
    n1, d_v = values.shape[-2], values.shape[-1]
    n2 = merged_count(n1, k)
    pad = n2 * k - n1
    if pad:
        logger.debug("padding %d tokens to %d by repeating the last token", n1, n2 * k)
        idx = np.concatenate([np.arange(n1), np.full(pad, n1 - 1)])
        values = take(values, idx, axis=values.ndim - 2)
    return reshape(values, values.shape[:-2] + (n2, k * d_v))


def expert_forward(x: Tensor, p: ExpertParams, eps: float = 1e-5) -> Tensor:
    """layer_norm(W . GELU(W' x + b') + b)."""
    if x.shape[-1] != p.w_in.shape[0]:
        raise DimensionError(f"expert input width {x.shape[-1]} does not match W' {p.w_in.shape}")
    hidden = gelu(matmul(x, p.w_in) + p.b_in)
    return layer_norm(matmul(hidden, p.w_out) + p.b_out, p.gamma, p.beta, eps)


def gate_logits(x: Tensor, g: GateParams) -> Tensor:
    if g.w_gate.shape[-1] != 2 or g.b_gate.shape != (2,):
        raise DimensionError(f"gate head must produce 2 logits, got W_gate {g.w_gate.shape}")
    return matmul(self_attention(x, g.wq, g.wk, g.wv), g.w_gate) + g.b_gate


def gate_forward(x: Tensor, g: GateParams) -> Tensor:
    """Emotion-expert weight per token, ``[n, 1]``; the general expert receives ``1 - G``."""
    probs = softmax(gate_logits(x, g), axis=-1)
    return take(probs, [0], axis=probs.ndim - 1)


def hybrid_compress(
    e: VisualEmbeddings | Tensor,
    p: HybridParams,
    k: int,
    gate_override: float | None = None,
) -> VisualTokens:
    """G * V_emo + (1 - G) * V_gen over merged tokens, G broadcast across features."""
    x = token_merge(e, k)
    v_emo = expert_forward(x, p.emotion, p.ln_eps)
    v_gen = expert_forward(x, p.general, p.ln_eps)
    if gate_override is None:
        gate = gate_forward(x, p.gate)
    else:
        if not 0.0 <= gate_override <= 1.0:
            raise ContractError(f"gate override must lie in [0, 1], got {gate_override}")
        gate = Tensor(np.full(x.shape[:-1] + (1,), float(gate_override)))
    values = gate * v_emo + (1.0 - gate) * v_gen
    return VisualTokens(values=values, gate_trace=reshape(gate, gate.shape[:-1]))


def _mlp(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"projector input width {x.shape[-1]} does not match W1 {p.w1.shape}")
    return matmul(relu(matmul(x, p.w1) + p.b1), p.w2) + p.b2


def mlp_projector_forward(e: VisualEmbeddings | Tensor, p: MlpParams, k: int) -> VisualTokens:
    x = token_merge(e, k)
    values = _mlp(x, p)
    return VisualTokens(values=values, gate_trace=Tensor(np.full(x.shape[:-1], SENTINEL_GATE)))


def fusion_projector_forward(e: VisualEmbeddings | Tensor, p: FusionParams, k: int) -> VisualTokens:
    """r * P1(x) + (1 - r) * P2(x) with a per-token ratio r = logistic(MLP_f(x))."""
    x = token_merge(e, k)
    r = sigmoid(_mlp(x, p.ratio))
    values = r * _mlp(x, p.p1) + (1.0 - r) * _mlp(x, p.p2)
    return VisualTokens(values=values, gate_trace=reshape(r, r.shape[:-1]))


def project(
    e: VisualEmbeddings | Tensor,
    projector: Projector,
    k: int,
    gate_override: float | None = None,
) -> VisualTokens:
    """Dispatch to the forward pass matching the projector variant."""
    if isinstance(projector, HybridParams):
        return hybrid_compress(e, projector, k, gate_override)
    if gate_override is not None:
        raise ContractError(f"{projector.kind} projector has no gate to override")
    if isinstance(projector, FusionParams):
        return fusion_projector_forward(e, projector, k)
    return mlp_projector_forward(e, projector, k)
