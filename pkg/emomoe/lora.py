"""Low-rank adapters over named linear maps, with one active adapter set at a time."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from emomoe.errors import AdapterNotFoundError, ConfigError, ContractError, DimensionError
from emomoe.tensor import Tensor, dropout, matmul, parameter, transpose

logger = logging.getLogger(__name__)


@dataclass
class Linear:
    """y = x W + b with ``W`` stored ``[d_in, d_out]``; ``name`` is the adapter target handle."""

    weight: Tensor
    bias: Tensor | None
    name: str = ""

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def linear(x: Tensor, base: Linear) -> Tensor:
    if x.shape[-1] != base.d_in:
        raise DimensionError(f"{base.name or 'linear'}: input width {x.shape[-1]} vs weight {base.weight.shape}")
    y = matmul(x, base.weight)
    return y if base.bias is None else y + base.bias


@dataclass
class LoraAdapter:
    name: str
    target: str
    a: Tensor  # [r, d_in]
    b: Tensor  # [d_out, r]
    alpha: float
    dropout_p: float = 0.0

    def __post_init__(self) -> None:
        r, d_in = self.a.shape
        d_out, r_b = self.b.shape
        if r != r_b:
            raise DimensionError(f"adapter {self.name}/{self.target}: A {self.a.shape} and B {self.b.shape} disagree on rank")
        if r > min(d_in, d_out):
            raise ConfigError(f"adapter {self.name}/{self.target}: rank {r} exceeds min({d_in}, {d_out})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"adapter dropout must lie in [0, 1), got {self.dropout_p}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """(alpha / r) (B A)^T, shaped like the target weight."""
        return self.scale * (self.b.data @ self.a.data).T


def init_adapter(
    rng: np.random.Generator,
    name: str,
    base: Linear,
    rank: int,
    alpha: float,
    dropout_p: float = 0.0,
) -> LoraAdapter:
    bound = 1.0 / math.sqrt(base.d_in)
    return LoraAdapter(
        name=name,
        target=base.name,
        a=parameter(rng.uniform(-bound, bound, size=(rank, base.d_in)), name=f"lora/{name}/{base.name}/A"),
        b=parameter(np.zeros((base.d_out, rank)), name=f"lora/{name}/{base.name}/B"),
        alpha=alpha,
        dropout_p=dropout_p,
    )


def lora_forward(
    x: Tensor,
    base: Linear,
    adapter: LoraAdapter | None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """base(x) + (alpha / r) B A drop(x); dropout touches the adapter path only and only in training."""
    y = linear(x, base)
    if adapter is None:
        return y
    if adapter.a.shape[1] != base.d_in or adapter.b.shape[0] != base.d_out:
        raise DimensionError(
            f"adapter {adapter.name}/{adapter.target} shapes A {adapter.a.shape}, B {adapter.b.shape} "
            f"do not fit weight {base.weight.shape}"
        )
    h = x
    if training and adapter.dropout_p > 0.0:
        if rng is None:
            raise ContractError("training-mode adapter dropout needs a random generator")
        h = dropout(x, adapter.dropout_p, rng)
    low = matmul(matmul(h, transpose(adapter.a)), transpose(adapter.b))
    return y + low * adapter.scale


def _check_fit(base: Linear, adapter: LoraAdapter) -> None:
    if adapter.target != base.name:
        raise ContractError(f"adapter targets {adapter.target!r}, not {base.name!r}")
    if (adapter.a.shape[1], adapter.b.shape[0]) != base.weight.shape:
        raise ContractError(f"adapter {adapter.name} does not fit weight {base.weight.shape}")


def lora_merge(base: Linear, adapter: LoraAdapter) -> Linear:
    """Fold the adapter into a plain linear map: W' = W + (alpha / r) (B A)^T."""
    _check_fit(base, adapter)
    bias = None if base.bias is None else Tensor(base.bias.data)
    return Linear(Tensor(base.weight.data + adapter.delta()), bias, base.name)


def lora_unmerge(merged: Linear, adapter: LoraAdapter) -> Linear:
    """Take a merged adapter back out: W = W' - (alpha / r) (B A)^T."""
    _check_fit(merged, adapter)
    bias = None if merged.bias is None else Tensor(merged.bias.data)
    return Linear(Tensor(merged.weight.data - adapter.delta()), bias, merged.name)


class AdapterRegistry:
    """Named adapter sets, each mapping target name to adapter."""

    def __init__(self) -> None:
        self._sets: dict[str, dict[str, LoraAdapter]] = {}
        self._active: str | None = None

    def __contains__(self, name: object) -> bool:
        return name in self._sets

    def __len__(self) -> int:
        return len(self._sets)

    @property
    def names(self) -> list[str]:
        return sorted(self._sets)

    @property
    def active(self) -> str | None:
        return self._active

    def add(self, name: str, adapters: Iterable[LoraAdapter]) -> None:
        if name in self._sets:
            raise ContractError(f"adapter set {name!r} already registered")
        entries: dict[str, LoraAdapter] = {}
        for adapter in adapters:
            if adapter.name != name:
                raise ContractError(f"adapter named {adapter.name!r} added under {name!r}")
            entries[adapter.target] = adapter
        self._sets[name] = entries

    def create(
        self,
        name: str,
        targets: Mapping[str, Linear],
        rank: int,
        alpha: float,
        dropout_p: float,
        rng: np.random.Generator,
    ) -> dict[str, LoraAdapter]:
        self.add(name, (init_adapter(rng, name, base, rank, alpha, dropout_p) for base in targets.values()))
        logger.info("Created adapter set %r over %d targets (r=%d, alpha=%g)", name, len(targets), rank, alpha)
        return self._sets[name]

    def get(self, name: str) -> dict[str, LoraAdapter]:
        try:
            return self._sets[name]
        except KeyError:
            raise AdapterNotFoundError(f"no adapter set named {name!r}; known: {self.names}") from None

    def select(self, name: str | None) -> None:
        """Make ``name`` the only adapter set applied by forwards; ``None`` disables adapters."""
        if name is not None:
            self.get(name)
        self._active = name

    def adapter_for(self, target: str) -> LoraAdapter | None:
        if self._active is None:
            return None
        return self._sets[self._active].get(target)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in self.names:
            for target, adapter in sorted(self._sets[name].items()):
                out[f"lora/{name}/{target}/A"] = adapter.a
                out[f"lora/{name}/{target}/B"] = adapter.b
        return out
