"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op records a node carrying a monotone sequence number.
``backward`` gathers the nodes reachable from the loss into a :class:`Tape`
ordered by recording sequence and walks it in reverse.  Broadcasting is
limited to a scalar (or single-element) right operand; anything else goes
through an explicit :func:`expand`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DetachedGraph,
    DomainError,
    NonFiniteError,
    NotScalar,
    ShapeMismatch,
    StaleGraph,
)

MAX_RANK = 4

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; right operands follow the scalar-only broadcast rule
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(out, op)
    t = Tensor._wrap(out)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._node = Node(op, tuple(inputs), backward_fn)
    return t


class Tape:
    """Nodes reachable from one loss, in recording order."""

    def __init__(self, nodes: Iterable[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = {}
        stack = [out._node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            if node.consumed:
                raise StaleGraph("graph already consumed by an earlier backward; re-run forward")
            seen[id(node)] = node
            for inp in node.inputs:
                if inp._node is not None:
                    stack.append(inp._node)
        return cls(seen.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, out: Tensor, seed: np.ndarray) -> None:
        grads = {id(out._node): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is not None:
                    key = id(inp._node)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
                else:
                    ig = np.asarray(ig, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
        for node in self.nodes:
            node.consumed = True
            node.backward_fn = None
            node.inputs = ()


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise DetachedGraph("loss is not connected to any recorded op")
    if loss._node.consumed:
        raise StaleGraph("backward already ran on this graph; re-run forward")
    tape = Tape.from_output(loss)
    tape.run(loss, np.ones_like(loss.data))


# ----------------------------------------------------------------------------
# elementwise


def _operand(a: Tensor, b):
    """Return (array, tensor-or-None, is_scalar) for a right operand."""
    if isinstance(b, Tensor):
        if b.shape == a.shape:
            return b.data, b, False
        if b.size == 1:
            return b.data.reshape(()).astype(a.dtype, copy=False), b, True
        raise ShapeMismatch(f"operand shapes {a.shape} and {b.shape} differ; use expand()")
    if np.ndim(b) != 0:
        raise ShapeMismatch("non-Tensor right operand must be a Python scalar")
    return np.asarray(b, dtype=a.dtype), None, True


def _reduce_for(b: Tensor, g: np.ndarray, scalar: bool) -> np.ndarray:
    if scalar:
        return np.asarray(g.sum()).reshape(b.shape)
    return g


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    bd, bt, sc = _operand(a, b)
    out = a.data + bd

    def bw(g):
        return (g, None if bt is None else _reduce_for(bt, g, sc))

    return _record("add", out, (a,) if bt is None else (a, bt), bw)


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    bd, bt, sc = _operand(a, b)
    out = a.data - bd

    def bw(g):
        return (g, None if bt is None else _reduce_for(bt, -g, sc))

    return _record("sub", out, (a,) if bt is None else (a, bt), bw)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    bd, bt, sc = _operand(a, b)
    ad = a.data
    out = ad * bd

    def bw(g):
        return (g * bd, None if bt is None else _reduce_for(bt, g * ad, sc))

    return _record("mul", out, (a,) if bt is None else (a, bt), bw)


def div(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    bd, bt, sc = _operand(a, b)
    if np.any(bd == 0):
        raise DomainError("division by zero")
    ad = a.data
    out = ad / bd

    def bw(g):
        gb = None if bt is None else _reduce_for(bt, -g * ad / (bd * bd), sc)
        return (g / bd, gb)

    return _record("div", out, (a,) if bt is None else (a, bt), bw)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def pow(a: Tensor, p) -> Tensor:
    """``a ** p`` for a scalar or single-element tensor exponent."""
    a = as_tensor(a)
    pd, pt, sc = _operand(a, p)
    ad = a.data
    p_int = np.all(np.equal(np.mod(pd, 1), 0))
    if not p_int and np.any(ad < 0):
        raise DomainError("fractional power of a negative value")
    if np.any(pd < 0) and np.any(ad == 0):
        raise DomainError("negative power of zero")
    out = ad**pd
    if pt is not None and np.any(ad <= 0):
        raise DomainError("gradient wrt exponent needs a positive base")

    def bw(g):
        ga = g * pd * ad ** (pd - 1)
        gp = None
        if pt is not None:
            gp = _reduce_for(pt, g * out * np.log(ad), sc)
        return (ga, gp)

    return _record("pow", out, (a,) if pt is None else (a, pt), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of non-positive value")
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    keep = ad > floor
    out = np.where(keep, ad, np.asarray(floor, dtype=ad.dtype))
    return _record("clamp_min", out, (a,), lambda g: (g * keep,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    keep = ad > 0
    return _record("relu", ad * keep, (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# shape ops and reductions


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (same rank)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeMismatch(f"cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape).copy()
    return _record("expand", out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _record("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, bw)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros(src, dtype=g.dtype)
        ax = axis % len(src)
        moved = np.moveaxis(ga, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (ga,)

    return _record("take", out, (a,), bw)


def flip(a: Tensor, axis) -> Tensor:
    return _record("flip", np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis),))


# ----------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with x [N, Cin], weight [Cout, Cin]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: x {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, bw)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel channel mixing: x [N, Cin, H, W], weight [Cout, Cin]."""
    if x.ndim != 4 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv1x1: x {x.shape} vs weight {weight.shape}")
    n, cin, h, w = x.shape
    wd = weight.data
    xd = x.data.reshape(n, cin, h * w)
    out = np.matmul(wd, xd)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, wd.shape[0], h, w)

    def bw(g):
        g3 = g.reshape(n, wd.shape[0], h * w)
        gx = np.matmul(wd.T, g3).reshape(x.shape)
        gw = np.einsum("nos,nis->oi", g3, xd)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g3.sum(axis=(0, 2)))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv1x1", out, inputs, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Square-kernel 2-D convolution via im2col; weight [Cout, Cin, k, k]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.shape} vs weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: [N*Ho*Wo, Cin*k*k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", np.ascontiguousarray(out), inputs, bw)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k average pooling; H and W must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _record("avg_pool2d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    return mean(reshape(x, (x.shape[0], x.shape[1], -1)), axis=2)


def masked_mean(x: Tensor, masks: np.ndarray) -> Tensor:
    """Mean of x [N, C, H, W] over each boolean mask in masks [K, H, W] -> [N, C, K]."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3 or masks.shape[1:] != x.shape[2:]:
        raise ShapeMismatch(f"masks {masks.shape} do not match feature {x.shape}")
    counts = masks.reshape(masks.shape[0], -1).sum(axis=1)
    n, c, h, w = x.shape
    m = (masks.reshape(masks.shape[0], -1).T / counts).astype(x.dtype)  # [HW, K]
    xd = x.data.reshape(n * c, h * w)
    out = (xd @ m).reshape(n, c, -1)

    def bw(g):
        return ((g.reshape(n * c, -1) @ m.T).reshape(x.shape),)

    return _record("masked_mean", out, (x,), bw)


# ----------------------------------------------------------------------------
# normalisation, probabilities, losses


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", s, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def nll_mean(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under log-probs [N, C]."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logp.shape[0]
    rows = np.arange(n)
    out = np.asarray(-logp.data[rows, labels].mean())

    def bw(g):
        gl = np.zeros_like(logp.data)
        gl[rows, labels] = -g / n
        return (gl,)

    return _record("nll_mean", out, (logp,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean_: np.ndarray | None = None,
    var: np.ndarray | None = None,
    eps: float = 1e-5,
):
    """Batch norm over axis 0 of x [N, F].

    With ``mean_``/``var`` given the statistics are constants (eval mode);
    otherwise they come from the batch and gradients flow through them.
    Returns ``(out, batch_mean, batch_var)``; batch stats are None in eval mode.
    """
    xd = x.data
    training = mean_ is None
    if training:
        mu = xd.mean(axis=0)
        v = xd.var(axis=0)
    else:
        mu, v = mean_, var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[0]

    def bw(g):
        gg = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        gxhat = g * gamma.data
        if training:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv
        return (gx, gg, gb)

    t = _record("batch_norm", out, (x, gamma, beta), bw)
    if training:
        return t, mu, v
    return t, None, None


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))
