"""Dense tensors with reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. `Tensor.backward` walks the recorded graph once in reverse
topological order. Under `no_grad()` nothing is recorded, which is how frozen
models run inference (the flag is thread-local).
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from fewvlm.utils.errors import ShapeMismatch

_DTYPE = {"value": np.float32}
_state = threading.local()


def get_dtype():
    return _DTYPE["value"]


def set_dtype(dtype) -> None:
    """Switch the default float width, np.float32 (default) or np.float64 (checks)"""
    _DTYPE["value"] = np.dtype(dtype).type


@contextmanager
def float64_mode():
    prev = _DTYPE["value"]
    set_dtype(np.float64)
    try:
        yield
    finally:
        set_dtype(prev)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """
    A value array plus an optional gradient of the same shape.

    Attributes
    ----------
    data : np.ndarray
        The values, in the default dtype unless given otherwise.
    grad : np.ndarray | None
        Accumulated gradient after `backward`, same shape as `data`.
    requires_grad : bool
        Whether gradients should flow into this tensor.
    name : str | None
        Parameter name, set for model weights.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        nm = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{nm}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`"""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch(
                    f"backward() without a gradient needs a scalar, got {self.shape=}"
                )
            grad = np.ones_like(self.data)
        Graph.from_root(self).backward(grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)


class Graph:
    """The recorded ops reachable from a root, in topological order"""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        # iterative post-order, deep decoder stacks exceed the recursion limit
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def backward(self, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_dtype()))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=True, name=name)


def _make(data, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from err


# ----------------------------------------------------------------------------
#                      Elementwise
# ----------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU"""
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * dinner
        return (g * dx,)

    return _make(out, (x,), backward)


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep `x` where `mask` is True, `fill` elsewhere (mask is broadcast)"""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.data, np.asarray(fill, dtype=x.data.dtype))

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return _make(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
#                      Linear algebra and shape
# ----------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from err
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]} on {axis=}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeMismatch(f"embedding_lookup: ids outside [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _make(out, (weight,), backward)


def gather_last(x: Tensor, ids) -> Tensor:
    """Pick x[..., ids[...]] along the last axis, `ids` has the leading shape of `x`"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeMismatch(f"gather_last: ids {ids.shape} vs leading {x.shape[:-1]}")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), backward)


# ----------------------------------------------------------------------------
#                      Normalization
# ----------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeMismatch(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs features {x.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = (
            inv
            / n
            * (
                n * gxhat
                - gxhat.sum(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------------
#                      Attention
# ----------------------------------------------------------------------------
MASK_FILL = -1e9


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None, n_heads: int
) -> Tensor:
    """
    Scaled dot-product attention over already projected inputs.

    Parameters
    ----------
    q : Tensor
        Queries, shape (..., Tq, D).
    k : Tensor
        Keys, shape (..., Tk, D).
    v : Tensor
        Values, shape (..., Tk, D).
    mask : np.ndarray | None
        Boolean, True where attention is allowed. Broadcastable to the score
        shape (..., n_heads, Tq, Tk); a (..., Tq, Tk) or (..., 1, Tk) mask gets
        a head axis inserted.
    n_heads : int
        Number of heads, must divide D.

    Returns
    -------
    Tensor
        Shape (..., Tq, D). Masked keys receive exactly zero weight.
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ShapeMismatch(f"model dim {d} not divisible by {n_heads=}")
    if k.shape[-1] != d or v.shape != k.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    hd = d // n_heads
    lead = q.shape[:-2]
    tq, tk = q.shape[-2], k.shape[-2]
    nlead = len(lead)

    def split(t: Tensor, n: int) -> Tensor:
        t = reshape(t, lead + (n, n_heads, hd))
        return transpose(t, tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2))

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    scores = matmul(qh, transpose(kh, tuple(range(nlead + 1)) + (nlead + 2, nlead + 1)))
    scores = mul(scores, 1.0 / np.sqrt(hd))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == scores.ndim - 1:
            m = np.expand_dims(m, -3)
        try:
            np.broadcast_shapes(m.shape, scores.shape)
        except ValueError as err:
            raise ShapeMismatch(f"mask {mask.shape} vs scores {scores.shape}") from err
        scores = where(m, scores, MASK_FILL)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh)
    out = transpose(out, tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2))
    return reshape(out, lead + (tq, d))
