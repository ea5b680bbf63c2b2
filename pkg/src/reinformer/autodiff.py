"""Dense float64 tensors with reverse-mode automatic differentiation.

Sized for desk-scale sequence models: every value is a 64-bit numpy array,
every operation records its parents and a backward rule, and `backward`
replays the recorded tape in reverse topological order. Gradients accumulate
additively into `Tensor.grad` and are cleared explicitly between optimizer
steps. A central-difference `grad_check` serves as the independent oracle
for every backward rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericsError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus optional gradient and the op that produced it.

    Leaf tensors are created directly; non-leaf tensors are created by the
    module-level operations, which attach the parent tensors and a backward
    rule. `requires_grad` propagates from parents to outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_rule")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (),
                 backward_rule: Callable[[Array], tuple] | None = None):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op = op
        self.parents = parents
        self.backward_rule = backward_rule

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic routes through the recorded ops below.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __getitem__(self, key):
        return slice_(self, key)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None, std: float | None = None) -> Tensor:
    """Leaf tensor with requires_grad. With `std`, fill with clipped normal noise."""
    arr = _as_f64(data)
    if std is not None:
        if rng is None:
            raise ContractError("random init requires an rng")
        arr = np.clip(rng.normal(0.0, std, size=arr.shape), -2.0 * std, 2.0 * std)
    return Tensor(arr, requires_grad=True)


def _make(data: Array, op: str, parents: tuple[Tensor, ...],
          backward_rule: Callable[[Array], tuple]) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents,
                  backward_rule=backward_rule)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g: Array):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)  # may contain one -1
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis, flattened to one 2-D matmul."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[-1],)) if x.ndim != 2 else y


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, "transpose", (x,), lambda g: (g.transpose(inverse),))


def concatenate(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, "concatenate", tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g: Array):
        buf = np.zeros_like(x.data)
        buf[key] += g
        return (buf,)

    return _make(out, "slice", (x,), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _make(out, "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, x.shape).copy(),)

    return _make(out, "mean", (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    return _make(out, "log", (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _make(out, "relu", (x,), lambda g: (g * (x.data > 0.0),))


def gelu(x: Tensor) -> Tensor:
    # Exact erf form; the derivative is Phi(x) + x * phi(x).
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g: Array):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(out, "gelu", (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, "clamp", (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # Stable composition: subtracting the detached row max leaves the
    # derivative unchanged (it cancels inside logsumexp).
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = sub(x, shift)
    lse = log(sum_(exp(z), axis=axis % x.ndim, keepdims=True))
    return sub(z, lse)


def embedding_lookup(table: Tensor, ids: Array) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got dtype {ids.dtype}")
    out = table.data[ids]

    def backward(g: Array):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (buf,)

    return _make(out, "embedding_lookup", (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    out = gain.data * xhat + bias.data

    def backward(g: Array):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (gxhat - m1 - xhat * m2) * inv_sigma
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Causal self-attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Query/key/value/output projections of one attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def causal_attention_mask(t: int, key_valid: Array | None = None,
                          group_size: int = 1) -> Array:
    """Additive mask, 0 where attention is allowed and -inf elsewhere.

    Position i may attend to j <= i. With `key_valid` (bool, (..., T)),
    invalid keys are also blocked, except within a position's own group of
    `group_size` consecutive tokens, so no softmax row is ever empty and a
    position never loses its own timestep.
    """
    causal = np.tril(np.ones((t, t), dtype=bool))
    if key_valid is None:
        allowed = causal
    else:
        kv = np.asarray(key_valid, dtype=bool)
        idx = np.arange(t) // group_size
        same_group = idx[:, None] == idx[None, :]
        allowed = causal & (kv[..., None, :] | same_group)
    return np.where(allowed, 0.0, -np.inf)


def causal_self_attention(x: Tensor, params: AttentionParams, n_heads: int,
                          key_valid: Array | None = None, group_size: int = 1) -> Tensor:
    """Multi-head self-attention over (..., T, D) with a strict causal mask."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"attention expects (T, D) or (B, T, D), got {x.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        if key_valid is not None:
            key_valid = np.asarray(key_valid, dtype=bool)[None, :]
    b, t, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads

    def project(w: Tensor, bias: Tensor) -> Tensor:
        y = linear(x, w, bias)
        return transpose(reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = project(params.wq, params.bq)
    k = project(params.wk, params.bk)
    v = project(params.wv, params.bv)

    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(1.0 / math.sqrt(dh)))
    mask = causal_attention_mask(t, key_valid, group_size=group_size)
    if mask.ndim == 2:
        mask = mask[None, None, :, :]
    else:
        mask = mask[:, None, :, :]
    weights = softmax(add(scores, Tensor(mask)), axis=-1)
    mixed = matmul(weights, v)
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, t, d))
    out = linear(merged, params.wo, params.bo)
    if squeeze:
        out = reshape(out, (t, d))
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    """One recorded operation: output node, input nodes, backward rule."""

    output_id: int
    input_ids: tuple[int, ...]
    op: str
    backward_rule: Callable[[Array], tuple]


class ComputationTape:
    """Recorded operations in topological order (inputs precede outputs)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.entries = [
            TapeEntry(id(n), tuple(id(p) for p in n.parents), n.op, n.backward_rule)
            for n in nodes if n.backward_rule is not None
        ]

    def __len__(self) -> int:
        return len(self.entries)


def trace(root: Tensor) -> ComputationTape:
    """Topologically ordered tape of every node reachable from `root`."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return ComputationTape(order)


def backward(loss: Tensor) -> ComputationTape:
    """Populate `grad` on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively both across multiple uses inside one
    graph and across repeated `backward` calls; call `zero_grads` between
    optimizer steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any gradient-tracked tensor")
    tape = trace(loss)
    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is not None:
                node.grad = node.grad + g
            elif node.backward_rule is None:
                # Leaf grads get a private buffer: optimizers mutate them.
                node.grad = g.copy()
            else:
                node.grad = g
        if node.backward_rule is None:
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg
    return tape


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def global_grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)


def clip_grads_(tensors, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most `max_norm`."""
    tensors = list(tensors)
    norm = global_grad_norm(tensors)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - fd| / max(1, |analytic|). `f` must be
    deterministic and scalar-valued; probe points where it is non-finite
    raise NumericsError.
    """
    if h <= 0:
        raise ContractError(f"grad_check step must be positive, got {h}")
    base = x.data.copy()
    probe = Tensor(base, requires_grad=True)
    loss = f(probe)
    if loss.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericsError("function is non-finite at the probe point")
    backward(loss)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.copy()

    def probe_at(values: Array) -> float:
        val = f(Tensor(values.reshape(base.shape))).data
        if not np.isfinite(val).all():
            raise NumericsError("function is non-finite at a finite-difference probe")
        return float(val)

    flat = base.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        fd[i] = (probe_at(up) - probe_at(down)) / (2.0 * h)
    fd = fd.reshape(base.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom))
