"""Toy vision-language classifier: patch embedder, projector, small decoder, class head.

Visual tokens from the projector and embedded text tokens are concatenated
and run through pre-norm decoder blocks (single-head attention plus a
GELU MLP), mean-pooled and classified.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from emomoe.compressor import (
    Projector,
    VisualEmbeddings,
    VisualTokens,
    init_projector,
    project,
    projector_widths,
)
from emomoe.config import FinetuneStrategy, RunConfig
from emomoe.data import PreparedClip, SyntheticSample, TrainItem, stack_batch
from emomoe.errors import ConfigError, ContractError, DimensionError
from emomoe.fec import FrameRecord, PatchEmbedder, embed_patches, fec_to_embeddings, init_patch_embedder
from emomoe.lora import AdapterRegistry, Linear, linear, lora_forward
from emomoe.tensor import (
    Tensor,
    concat,
    constant,
    gelu,
    layer_norm,
    mean,
    named_tensors,
    parameter,
    scaled_dot_attention,
    take,
)

logger = logging.getLogger(__name__)

DECODER_BLOCKS = 2
ADAPTER_SLOTS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class DecoderBlock:
    ln1: LayerNormParams
    attn_q: Linear
    attn_k: Linear
    attn_v: Linear
    attn_o: Linear
    ln2: LayerNormParams
    mlp_in: Linear
    mlp_out: Linear

    def linears(self) -> dict[str, Linear]:
        return {slot: getattr(self, slot) for slot in ADAPTER_SLOTS}


@dataclass
class ToyModel:
    embedder: PatchEmbedder
    projector: Projector
    blocks: list[DecoderBlock]
    final_ln: LayerNormParams
    text_embedding: Tensor
    classifier: Linear
    k: int
    ln_eps: float = 1e-5
    adapters: AdapterRegistry = field(default_factory=AdapterRegistry)

    def __post_init__(self) -> None:
        d_in, d_t = projector_widths(self.projector)
        if d_in != self.k * self.embedder.d_v:
            raise ConfigError(
                f"projector input width {d_in} != k * d_v = {self.k} * {self.embedder.d_v}"
            )
        widths = {
            "projector output": d_t,
            "text embedding": self.text_embedding.shape[1],
            "classifier input": self.classifier.d_in,
        }
        widths.update({f"decoder block {i}": b.attn_q.d_in for i, b in enumerate(self.blocks)})
        if len(set(widths.values())) != 1:
            raise ConfigError(f"token widths disagree: {widths}")

    @property
    def d_t(self) -> int:
        return self.text_embedding.shape[1]

    @property
    def vocab(self) -> int:
        return self.text_embedding.shape[0]

    @property
    def classes(self) -> int:
        return self.classifier.d_out

    def adapter_targets(self) -> dict[str, Linear]:
        return {lin.name: lin for block in self.blocks for lin in block.linears().values()}

    def named_parameters(self, include_adapters: bool = True) -> dict[str, Tensor]:
        """Every tensor under its canonical checkpoint name, sorted by name."""
        params: dict[str, Tensor] = {}
        params.update(named_tensors(self.embedder, "embedder"))
        params.update(named_tensors(self.projector, "projector"))
        for i, block in enumerate(self.blocks):
            params.update(named_tensors(block, f"decoder/block{i}"))
        params.update(named_tensors(self.final_ln, "decoder/final_ln"))
        params["text/embedding"] = self.text_embedding
        params.update(named_tensors(self.classifier, "classifier"))
        if include_adapters:
            params.update(self.adapters.named_tensors())
        return dict(sorted(params.items()))


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def _linear(rng: np.random.Generator, d_in: int, d_out: int, name: str, bias: bool = True) -> Linear:
    b = parameter(np.zeros(d_out)) if bias else None
    return Linear(_uniform(rng, d_in, (d_in, d_out)), b, name)


def _layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(parameter(np.ones(d)), parameter(np.zeros(d)))


def init_block(rng: np.random.Generator, d_t: int, d_ff: int, index: int) -> DecoderBlock:
    prefix = f"decoder/block{index}"
    return DecoderBlock(
        ln1=_layer_norm(d_t),
        attn_q=_linear(rng, d_t, d_t, f"{prefix}/attn_q", bias=False),
        attn_k=_linear(rng, d_t, d_t, f"{prefix}/attn_k", bias=False),
        attn_v=_linear(rng, d_t, d_t, f"{prefix}/attn_v", bias=False),
        attn_o=_linear(rng, d_t, d_t, f"{prefix}/attn_o"),
        ln2=_layer_norm(d_t),
        mlp_in=_linear(rng, d_t, d_ff, f"{prefix}/mlp_in"),
        mlp_out=_linear(rng, d_ff, d_t, f"{prefix}/mlp_out"),
    )


def build_model(cfg: RunConfig, seed: int | None = None) -> ToyModel:
    """Freshly initialized model for ``cfg``; adapter sets are created for the LoRA strategy."""
    m = cfg.model
    rng = np.random.default_rng(cfg.seeds.init if seed is None else seed)
    model = ToyModel(
        embedder=init_patch_embedder(rng, m.patch, m.d_v),
        projector=init_projector(m.projector, rng, m.d_in, m.d_h, m.d_t, m.ln_eps),
        blocks=[init_block(rng, m.d_t, m.d_ff, i) for i in range(DECODER_BLOCKS)],
        final_ln=_layer_norm(m.d_t),
        text_embedding=_uniform(rng, m.d_t, (m.vocab, m.d_t)),
        classifier=_linear(rng, m.d_t, m.classes, "classifier"),
        k=m.k,
        ln_eps=m.ln_eps,
    )
    if cfg.schedule.finetune_strategy is FinetuneStrategy.LORA:
        targets = model.adapter_targets()
        for name in cfg.lora.adapters:
            model.adapters.create(name, targets, cfg.lora.rank, cfg.lora.alpha, cfg.lora.dropout, rng)
    logger.info(
        "Built %s model: %d tensors, %d scalars",
        m.projector,
        len(model.named_parameters()),
        sum(t.size for t in model.named_parameters().values()),
    )
    return model


# -- batching --


@dataclass
class InputGroup:
    """Same-shape members of a mixed batch: their batch positions and stacked inputs."""

    positions: list[int]
    values: Tensor
    text: np.ndarray
    labels: np.ndarray


def batch_inputs(model: ToyModel, items: Sequence[TrainItem]) -> list[InputGroup]:
    """Group a batch by input kind and token count, in order of first appearance.

    Embedding-level samples are stacked as constants; clip patches go through
    the model's patch embedder, so gradients reach it.
    """
    if not items:
        raise ContractError("cannot batch zero samples")
    groups: dict[tuple[bool, int], list[int]] = {}
    for pos, item in enumerate(items):
        if isinstance(item, PreparedClip):
            key = (True, item.patches.shape[0])
        else:
            key = (False, item.embeddings.values.shape[0])
        groups.setdefault(key, []).append(pos)

    out: list[InputGroup] = []
    for (is_clip, _), positions in groups.items():
        members = [items[i] for i in positions]
        if is_clip:
            clips = [m for m in members if isinstance(m, PreparedClip)]
            values = embed_patches(constant(np.stack([c.patches for c in clips])), model.embedder)
            text = np.stack([c.text for c in clips])
            labels = np.array([c.label for c in clips], dtype=np.int64)
        else:
            values, text, labels = stack_batch([m for m in members if isinstance(m, SyntheticSample)])
        out.append(InputGroup(positions, values, text, labels))
    return out


# -- forward --


def _adapted(
    x: Tensor, lin: Linear, model: ToyModel, training: bool, rng: np.random.Generator | None
) -> Tensor:
    adapter = model.adapters.adapter_for(lin.name)
    if adapter is None:
        return linear(x, lin)
    return lora_forward(x, lin, adapter, training=training, rng=rng)


def block_forward(
    x: Tensor,
    block: DecoderBlock,
    model: ToyModel,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    eps = model.ln_eps
    h = layer_norm(x, block.ln1.gamma, block.ln1.beta, eps)
    q = _adapted(h, block.attn_q, model, training, rng)
    k = _adapted(h, block.attn_k, model, training, rng)
    v = _adapted(h, block.attn_v, model, training, rng)
    x = x + _adapted(scaled_dot_attention(q, k, v), block.attn_o, model, training, rng)
    h = layer_norm(x, block.ln2.gamma, block.ln2.beta, eps)
    h = gelu(_adapted(h, block.mlp_in, model, training, rng))
    return x + _adapted(h, block.mlp_out, model, training, rng)


def embed_text(model: ToyModel, text: np.ndarray) -> Tensor:
    ids = np.asarray(text, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab):
        raise ContractError(f"text ids must lie in [0, {model.vocab}), got range [{ids.min()}, {ids.max()}]")
    return take(model.text_embedding, ids, axis=0)


def forward_with_trace(
    model: ToyModel,
    embeddings: VisualEmbeddings | Tensor,
    text: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    gate_override: float | None = None,
) -> tuple[Tensor, VisualTokens]:
    """Logits plus the projector output; batched inputs give ``[B, C]`` logits."""
    values = embeddings.values if isinstance(embeddings, VisualEmbeddings) else embeddings
    ids = np.asarray(text, dtype=np.int64)
    if ids.ndim != values.ndim - 1 or (ids.ndim == 2 and ids.shape[0] != values.shape[0]):
        raise DimensionError(f"text ids {ids.shape} do not pair with visual embeddings {values.shape}")
    tokens = project(values, model.projector, model.k, gate_override)
    x = concat([tokens.values, embed_text(model, ids)], axis=-2)
    for block in model.blocks:
        x = block_forward(x, block, model, training, rng)
    x = layer_norm(x, model.final_ln.gamma, model.final_ln.beta, model.ln_eps)
    logits = linear(mean(x, axis=-2), model.classifier)
    return logits, tokens


def model_forward(
    model: ToyModel,
    embeddings: VisualEmbeddings | Tensor,
    text: Sequence[int] | np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Class logits ``[C]`` for one sample."""
    values = embeddings.values if isinstance(embeddings, VisualEmbeddings) else embeddings
    if values.ndim != 2:
        raise DimensionError(f"model_forward takes one sample [N1, d_v], got {values.shape}")
    logits, _ = forward_with_trace(model, values, np.asarray(text), training, rng)
    return logits


def model_forward_frames(
    model: ToyModel,
    sequence: Sequence[FrameRecord],
    text: Sequence[int] | np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embed a frame sequence with the model's own patch embedder, then classify."""
    return model_forward(model, fec_to_embeddings(sequence, model.embedder), text, training, rng)
