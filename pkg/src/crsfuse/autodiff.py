"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Computation is plain numpy. Operations record themselves on the innermost
active :class:`Tape` only when one of their inputs requires a gradient, so
code run outside a ``with Tape():`` block is an ordinary forward pass.

Broadcasting is deliberately narrow: element-wise ops need identical shapes,
except that a 1-D tensor may be added along the last axis (bias vectors).
Non-differentiable constants (masks) go through :func:`add_const` and
:func:`mul_const`.
"""

from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_TAPES: list["Tape"] = []


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float64 for gradient checks)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Ordered record of operations; node inputs always precede the node."""

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.node_id
        if not t.requires_grad:
            return None
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.shape))
        self.leaves[nid] = t
        t._tape, t.node_id = self, nid
        return nid

    def record(self, kind, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        ids = tuple(-1 if (n := self._node_of(t)) is None else n for t in inputs)
        if all(i < 0 for i in ids):
            return
        nid = len(self.nodes)
        self.nodes.append(Node(kind, ids, backward, out.shape))
        out._tape, out.node_id, out.requires_grad = self, nid, True

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns leaf gradients (also stored on ``.grad``)."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones(loss.shape, dtype=loss.data.dtype)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if inp < 0 or gi is None:
                    continue
                grads[inp] = gi if grads[inp] is None else grads[inp] + gi
            grads[nid] = None
        out = {}
        for nid, t in self.leaves.items():
            g = grads[nid]
            if g is None:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g
            out[t] = g
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _record(kind, out, inputs, backward):
    if _TAPES and any(t.requires_grad for t in inputs):
        _TAPES[-1].record(kind, out, inputs, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x, like: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=like.dtype)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add_const(a, b)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _record("add", out, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        axes = tuple(range(a.ndim - 1))
        return _record("add_bias", out, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add_const(a, -b)
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * _const(c, a.data))
    return _record("scale", out, (a,), lambda g: (g * _const(c, g),))


def add_const(a: Tensor, c) -> Tensor:
    """``a + c`` for a constant ``c`` that broadcasts to ``a.shape``."""
    c = _const(c, a.data)
    out = Tensor(a.data + c)
    if out.shape != a.shape:
        raise ShapeError(f"add_const: constant {c.shape} does not broadcast to {a.shape}")
    return _record("add_const", out, (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """``a * c`` for a constant ``c`` that broadcasts to ``a.shape``."""
    c = _const(c, a.data)
    out = Tensor(a.data * c)
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: constant {c.shape} does not broadcast to {a.shape}")
    return _record("mul_const", out, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)
    return _record("sigmoid", out, (a,), lambda g: (g * s * (1 - s),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(-np.logaddexp(0, -x).astype(x.dtype))
    return _record("log_sigmoid", out, (a,), lambda g: (g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)


_GELU_C = math.sqrt(2 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1 + t))

    def bwd(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _record("gelu", out, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1 - p)
    return mul_const(a, keep)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = Tensor(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", out, (a,), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight applied to every leading index of ``a`` or a
    tensor with exactly the same leading (batch) axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", out, xs, lambda g: np.split(g, splits, axis=axis))


# ---------------------------------------------------------------- indexing

def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding weight must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    out = Tensor(weight.data[ids])

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _record("embedding", out, (weight,), bwd)


def take(a: Tensor, idx) -> Tensor:
    """``a[idx]`` along the first axis for an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record("take", out, (a,), bwd)


def gather_rows(a: Tensor, batch_idx, pos_idx) -> Tensor:
    """``a[batch_idx, pos_idx]`` for ``a`` of shape (B, T, d); result (N, d)."""
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    if a.ndim != 3:
        raise ShapeError("gather_rows expects a rank-3 tensor")
    out = Tensor(a.data[batch_idx, pos_idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (batch_idx, pos_idx), g)
        return (ga,)

    return _record("gather_rows", out, (a,), bwd)


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), bwd)


def softmax_rows(a) -> Tensor:
    return softmax(as_tensor(a))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _const(eps, x.data))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    axes = tuple(range(x.ndim - 1))

    def bwd(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record("layer_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------- optimisation

def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(builtins.sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 0.1):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped_grads, norm_before)``.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    return [(g * factor).astype(g.dtype, copy=False) for g in grads], norm


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter required")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"adam: gradient {g.shape} vs parameter {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam) -> None:
    state.step(grads)


def grads_for(params: Sequence[Tensor], grad_map: dict[Tensor, np.ndarray]) -> list[np.ndarray]:
    """Gradient list aligned with ``params``; unused parameters get zeros."""
    return [grad_map[p] if p in grad_map else np.zeros_like(p.data) for p in params]
