"""A small dense tensor type with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure that pushes an upstream gradient back to them.
:func:`backward` orders the recorded graph topologically (a :class:`Tape`),
replays it in reverse, and by default frees the closures afterwards, so a
graph lives for exactly one forward/backward pass.

Broadcasting follows numpy rules; the backward rules sum gradients back over
broadcast axes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_default_dtype = np.dtype(np.float32)
_recording = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DomainError(f"unsupported floating dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new floating tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph (inference only)."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def is_recording() -> bool:
    return _recording


class Tensor:
    """N-dimensional array that can take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.integer) and arr.dtype != np.bool_:
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_default_dtype)
        if requires_grad and not np.issubdtype(arr.dtype, np.floating):
            raise DomainError("only floating tensors can require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None and np.issubdtype(like.dtype, np.floating) else None
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else _default_dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    """Wrap an op result; attach ``rule`` only if some parent needs grads."""
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.dtype:
        g = g.astype(t.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- tape -----------------------------------------------------------------

class Tape:
    """Operations reachable from a root, in topological (creation) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor, retain_graph: bool = False) -> Tape:
    """Populate ``.grad`` on every leaf that requires gradients.

    Repeated calls accumulate into existing leaf gradients. Unless
    ``retain_graph`` is set, the graph is released afterwards.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor that requires grad")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _accumulate(node, g)
            continue
        # route parent contributions through a scratch dict, not .grad
        node._sink = grads  # type: ignore[attr-defined]
        node._backward(g)
        del node._sink  # type: ignore[attr-defined]
    if not retain_graph:
        for node in tape.nodes:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
    return tape


def _send(out: Tensor, parent: Tensor, g: np.ndarray) -> None:
    """Deliver gradient ``g`` from ``out`` to ``parent``."""
    if not parent.requires_grad:
        return
    sink = out._sink  # type: ignore[attr-defined]
    key = id(parent)
    if key in sink:
        sink[key] = sink[key] + g
    else:
        sink[key] = g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = None

    def rule(g):
        _send(out, a, _unbroadcast(g, a.shape))
        _send(out, b, _unbroadcast(g, b.shape))

    out = _make(a.data + b.data, (a, b), rule)
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = None

    def rule(g):
        _send(out, a, _unbroadcast(g, a.shape))
        _send(out, b, _unbroadcast(-g, b.shape))

    out = _make(a.data - b.data, (a, b), rule)
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = None

    def rule(g):
        if a.requires_grad:
            _send(out, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _send(out, b, _unbroadcast(g * a.data, b.shape))

    out = _make(a.data * b.data, (a, b), rule)
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = None

    def rule(g):
        if a.requires_grad:
            _send(out, a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _send(out, b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out = _make(a.data / b.data, (a, b), rule)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def rule(g):
        _send(out, a, -g)

    out = _make(-a.data, (a,), rule)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    out = None

    def rule(g):
        _send(out, x, g * s * (1.0 - s))

    out = _make(s, (x,), rule)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = None

    def rule(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        _send(out, x, g * d)

    out = _make(0.5 * xd * (1.0 + t), (x,), rule)
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    out = None

    def rule(g):
        _send(out, x, g * e)

    out = _make(e, (x,), rule)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    out = None

    def rule(g):
        _send(out, x, g / x.data)

    out = _make(np.log(x.data), (x,), rule)
    return out


def scale_shift(x, scale, shift) -> Tensor:
    """``scale * x + shift`` with broadcasting (scalars or per-channel)."""
    return add(mul(x, scale), shift)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}") from None
    out = None

    def rule(g):
        if a.requires_grad:
            _send(out, a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _send(out, b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out = _make(a.data @ b.data, (a, b), rule)
    return out


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- shape ------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    out = None

    def rule(g):
        _send(out, x, g.reshape(x.shape))

    out = _make(data, (x,), rule)
    return out


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = None

    def rule(g):
        _send(out, x, np.transpose(g, inverse))

    out = _make(np.transpose(x.data, axes), (x,), rule)
    return out


def swap_last(x) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# -- reductions ---------------------------------------------------------------

def _check_axis(x: Tensor, axis) -> None:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise DomainError(f"axis {ax} out of range for rank {x.ndim}")
        if x.shape[ax] == 0:
            raise DomainError(f"cannot reduce over empty axis {ax}")


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        if x.size == 0:
            raise DomainError("cannot reduce an empty tensor")
    else:
        _check_axis(x, axis)
    out = None

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(out, x, np.broadcast_to(g, x.shape))

    out = _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule)
    return out


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        _check_axis(x, axis)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DomainError("cannot average an empty tensor")
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def max_index(x, axis=-1) -> Tensor:
    """Argmax along ``axis``; ties resolve to the lowest index.

    The result is an integer tensor with no gradient path: it acts as a
    stop-gradient barrier for everything computed from it.
    """
    x = as_tensor(x)
    _check_axis(x, axis)
    return Tensor(np.argmax(x.data, axis=axis).astype(np.int64))


def one_hot(indices, depth: int, dtype=None) -> Tensor:
    idx = indices.data if isinstance(indices, Tensor) else np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise DomainError(f"indices must lie in [0, {depth})")
    eye = np.eye(depth, dtype=dtype or _default_dtype)
    return Tensor(eye[idx])


# -- fused layers -------------------------------------------------------------

def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = None

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _send(out, x, inv * (g - gm - xhat * gx))

    y = _make(xhat.astype(x.dtype), (x,), rule)
    out = y
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine ``<a_n, b_o> / (|a_n| |b_o| + eps)`` → ``(..., N, O)``."""
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"feature widths differ: {a.shape} vs {b.shape}")
    dots = a.data @ np.swapaxes(b.data, -1, -2)
    na = np.sqrt((a.data * a.data).sum(-1))
    nb = np.sqrt((b.data * b.data).sum(-1))
    denom = na[..., :, None] * nb[..., None, :] + eps
    sim = dots / denom
    out = None

    def rule(g):
        gs = g / denom
        w = gs * dots / denom  # d sim / d denom, negated below
        if a.requires_grad:
            coef = (w * nb[..., None, :]).sum(-1)
            scale = np.divide(coef, na, out=np.zeros_like(coef), where=na > 0)
            ga = gs @ b.data - scale[..., None] * a.data
            _send(out, a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            coef = (w * na[..., :, None]).sum(-2)
            scale = np.divide(coef, nb, out=np.zeros_like(coef), where=nb > 0)
            gb = np.swapaxes(gs, -1, -2) @ a.data - scale[..., None] * b.data
            _send(out, b, _unbroadcast(gb, b.shape))

    out = _make(sim.astype(a.dtype), (a, b), rule)
    return out


def neg_euclidean(a, b) -> Tensor:
    """Pairwise ``-|a_n - b_o|`` → ``(..., N, O)``; zero distance has zero slope."""
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"feature widths differ: {a.shape} vs {b.shape}")
    sa = (a.data * a.data).sum(-1)
    sb = (b.data * b.data).sum(-1)
    sq = sa[..., :, None] + sb[..., None, :] - 2.0 * (a.data @ np.swapaxes(b.data, -1, -2))
    dist = np.sqrt(np.maximum(sq, 0.0))
    out = None

    def rule(g):
        # d(-dist)/da_n = -(a_n - b_o) / dist
        w = np.divide(-g, dist, out=np.zeros_like(dist), where=dist > 1e-12)
        if a.requires_grad:
            ga = w.sum(-1)[..., None] * a.data - w @ b.data
            _send(out, a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            wt = np.swapaxes(w, -1, -2)
            gb = wt.sum(-1)[..., None] * b.data - wt @ a.data
            _send(out, b, _unbroadcast(gb, b.shape))

    out = _make((-dist).astype(a.dtype), (a, b), rule)
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} do not match labels {y.shape}")
    if logits.shape[0] == 0:
        raise DomainError("empty batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(len(y))
    loss = -logp[rows, y].mean()
    out = None

    def rule(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        _send(out, logits, g * p / len(y))

    out = _make(np.asarray(loss, dtype=logits.dtype), (logits,), rule)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b
