"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one input takes part in differentiation.
Outside a tape every operation is a plain numpy evaluation.

Broadcasting is limited to four documented cases: identical shapes, a
scalar operand, a per-feature vector ``[d]`` against ``[..., d]`` and a
per-row column ``[..., 1]`` against ``[..., d]``. Anything else raises
:class:`~emomoe.errors.DimensionError`.
"""

from __future__ import annotations

import contextvars
import dataclasses
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import erf, expit

from emomoe.errors import ContractError, DimensionError, TargetIndexError

MAX_RANK = 3

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BackwardRule = Callable[[np.ndarray], tuple["np.ndarray | None", ...]]

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "emomoe_active_tape", default=None
)


class Tensor:
    """Rank <= 3 float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape", "_leaf")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.array(data, dtype=np.float64)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None
        self._leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # no copy: op outputs own their freshly computed arrays
        _check_shape(arr.shape)
        out = cls.__new__(cls)
        out.data = np.asarray(arr, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.node_id = None
        out.name = None
        out._tape = None
        out._leaf = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float) -> Tensor:
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)


def parameter(data: Any, name: str | None = None) -> Tensor:
    """A differentiable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data: Any) -> Tensor:
    return Tensor(data)


def _check_shape(shape: tuple[int, ...]) -> None:
    if len(shape) > MAX_RANK:
        raise DimensionError(f"rank {len(shape)} exceeds the supported rank {MAX_RANK}: {shape}")
    if any(extent <= 0 for extent in shape):
        raise DimensionError(f"extents must be positive, got {shape}")


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class TapeRecord:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardRule


class Tape:
    """Ordered log of differentiable operations.

    Inputs are always recorded before the operations consuming them, so
    walking the records backwards is a valid reverse topological order.
    """

    def __init__(self) -> None:
        self.records: list[TapeRecord] = []
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}
        self._token: contextvars.Token[Tape | None] | None = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad and t._leaf:
            nid = self._new_id()
            t.node_id = nid
            t._tape = self
            self._leaves[nid] = t
            return nid
        return None


def active_tape() -> Tape | None:
    return _active_tape.get()


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule: BackwardRule) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _active_tape.get()
    if tape is None:
        return out
    ids = tuple(tape._node_of(t) for t in inputs)
    if all(nid is None for nid in ids):
        return out
    out.requires_grad = True
    out.node_id = tape._new_id()
    out._tape = tape
    tape.records.append(TapeRecord(op, ids, out.node_id, rule))
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(leaf) for every differentiable leaf on loss's tape.

    Sets ``grad`` on each leaf and returns ``{leaf node id: gradient}``.
    Leaves the loss does not depend on receive zeros.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise ContractError("loss was not recorded on a tape; run the forward pass inside `with Tape()`")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for nid, ig in zip(rec.inputs, rec.backward(g), strict=True):
            if nid is None or ig is None:
                continue
            grads[nid] = grads[nid] + ig if nid in grads else ig

    result: dict[int, np.ndarray] = {}
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g
        result[nid] = g
    return result


# -- broadcasting --


def _broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...], op: str) -> tuple[int, ...]:
    if sa == sb:
        return sa
    for big, small in ((sa, sb), (sb, sa)):
        if small == ():
            return big
        if len(big) >= 2 and small == big[-1:]:
            return big
        if len(big) >= 2 and small == big[:-1] + (1,):
            return big
    raise DimensionError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g.sum(axis=-1, keepdims=True)


# -- elementwise --


def add(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(
        "mul",
        (a, b),
        ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _record("relu", (x,), np.maximum(xd, 0.0), lambda g: (g * (xd > 0.0),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function."""
    s = expit(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
    return _record("gelu", (x,), xd * cdf, lambda g: (g * (cdf + xd * pdf),))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor._wrap(keep))


# -- shape --


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for [m,k]@[k,n], [k]@[k,n], [B,m,k]@[k,n] and [B,m,k]@[B,k,n]."""
    ra, rb = a.ndim, b.ndim
    if (ra, rb) not in {(2, 2), (1, 2), (3, 2), (3, 3)}:
        raise DimensionError(f"matmul: unsupported operand shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (rb == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(bd, -1, -2)
        if ra == 1:
            gb = np.outer(ad, g)
        elif rb == 2 and ra == 3:
            gb = np.einsum("bmk,bmn->kn", ad, g)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, rule)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {a.shape}")
    return _record(
        "transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {shape}")
    src = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def take(a: Tensor, indices: Any, axis: int = 0) -> Tensor:
    """Gather along one axis. Non-zero axes take a 1-D index vector."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim if a.ndim else 0
    if a.ndim == 0:
        raise DimensionError("take needs a tensor of rank >= 1")
    if ax != 0 and idx.ndim != 1:
        raise DimensionError(f"take along axis {axis} needs a 1-D index, got shape {idx.shape}")
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise DimensionError(f"take: index out of range for axis {axis} of shape {a.shape}")
    src = a.data

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        gx = np.zeros_like(src)
        if ax == 0:
            np.add.at(gx, idx, g)
        else:
            np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return _record("take", (a,), np.take(src, idx, axis=ax), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    rank = tensors[0].ndim
    ax = axis % rank
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != rank or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(
        "concat",
        tensors,
        np.concatenate([t.data for t in tensors], axis=ax),
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


# -- reductions --


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    src = a.shape
    if axis is None:
        return _record(
            "sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, src).copy(),)
        )
    ax = axis % a.ndim

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return _record("sum", (a,), a.data.sum(axis=ax), rule)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


# -- normalization and attention --


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exponent-normalized along ``axis`` with max subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record(
        "softmax", (x,), s, lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize each row over the last axis, then scale by gamma and shift by beta."""
    if eps <= 0.0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1] if x.ndim else 0
    if x.ndim == 0 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {x.shape} needs gamma/beta of shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    xd, gd = x.data, gamma.data
    centered = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = (-1, d)
        return dx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0)

    return _record("layer_norm", (x, gamma, beta), xhat * gd + beta.data, rule)


def cross_entropy(logits: Tensor, targets: Any) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    batch, classes = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape != (batch,):
        raise DimensionError(f"cross_entropy: {tgt.size} targets for a batch of {batch}")
    bad = (tgt < 0) | (tgt >= classes)
    if bad.any():
        raise TargetIndexError(
            f"target {int(tgt[bad][0])} out of range for {classes} classes"
        )
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = float(np.mean(np.log(z[:, 0]) - shifted[rows, tgt]))
    probs = e / z

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        d = probs.copy()
        d[rows, tgt] -= 1.0
        return (d * (g / batch),)

    return _record("cross_entropy", (logits,), np.asarray(loss), rule)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the token axis."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax(mul(matmul(q, transpose(k)), scale), axis=-1)
    return matmul(weights, v)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product self-attention over [n, d] or [B, n, d] tokens."""
    if x.ndim not in (2, 3):
        raise DimensionError(f"self_attention expects [n, d] or [B, n, d] tokens, got {x.shape}")
    d = x.shape[-1]
    for label, w in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        if w.shape != (d, d):
            raise DimensionError(f"self_attention: {label} has shape {w.shape}, tokens need ({d}, {d})")
    return scaled_dot_attention(matmul(x, wq), matmul(x, wk), matmul(x, wv))


def named_tensors(obj: Any, prefix: str) -> dict[str, Tensor]:
    """Flatten a dataclass tree of tensors into ``{"prefix/field/...": tensor}``."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
        return out
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None:
                out.update(named_tensors(value, f"{prefix}/{f.name}"))
        return out
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}{i}"))
    return out
