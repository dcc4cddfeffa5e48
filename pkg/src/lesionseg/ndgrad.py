"""Dense tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure computing the vector-Jacobian product. ``backward`` walks
the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericFault, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    """Select the working precision, ``"f32"`` (training) or ``"f64"`` (gradcheck)."""
    global _dtype
    if name not in _DTYPES:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = "f64" if _dtype is np.float64 else "f32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Node:
    """One recorded operation: its inputs and how to push a gradient back to them."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad: bool = False, node: Node | None = None, dtype=None):
        arr = np.array(values, dtype=dtype or _dtype, copy=True)
        if not np.all(np.isfinite(arr)):
            where = node.op if node is not None else "construction"
            raise NumericFault(f"non-finite value produced by {where}")
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.values.dtype), dtype=like.values.dtype)


def _result(values: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    node = Node(op, inputs, backward_fn) if needs else None
    # Ops are evaluated in the dtype of their inputs so f64 gradchecks stay f64.
    return Tensor(values, requires_grad=needs, node=node, dtype=values.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.values)):
        raise NumericFault(f"non-finite input to {op}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    out = a.values + b.values
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    out = a.values - b.values
    return _result(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    av, bv = a.values, b.values
    return _result(
        av * bv, "mul", (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))
    )


def div(a, b) -> Tensor:
    b = _lift(b, a)
    av, bv = a.values, b.values
    if np.any(bv == 0):
        raise NumericFault("division by zero in div")
    out = av / bv

    def grad_fn(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)

    return _result(out, "div", (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0).astype(x.values.dtype), "relu", (x,), lambda g: (g * mask,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.values)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NumericFault("log of non-positive value")
    v = x.values
    return _result(np.log(v), "log", (x,), lambda g: (g / v,))


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant exponent; ``x`` must be non-negative unless the exponent is integral."""
    v = x.values
    out = np.power(v, exponent)
    if exponent == 0:
        return _result(np.ones_like(v), "power", (x,), lambda g: (np.zeros_like(g),))

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * np.power(v, exponent - 1)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _result(out, "power", (x,), grad_fn)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.values >= floor
    out = np.maximum(x.values, floor).astype(x.values.dtype)
    return _result(out, "clamp_min", (x,), lambda g: (g * keep,))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    v = x.values
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    s = _stable_sigmoid(v)
    return _result(out, "softplus", (x,), lambda g: (g * s,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so evaluation mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an explicit random generator")
    keep = (rng.random(x.shape) >= p).astype(x.values.dtype) / (1.0 - p)
    return _result(x.values * keep, "dropout", (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------- reductions


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.values.sum()), "reduce_sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reduce_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.values.size
    return _result(
        np.asarray(x.values.mean()), "reduce_mean", (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def masked_sum(x: Tensor, mask) -> Tensor:
    """Sum of ``x`` over the true cells of ``mask`` (a LabelMask or boolean array)."""
    m = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if m.shape != x.shape[-2:] and m.shape != x.shape:
        raise ShapeError(f"mask shape {m.shape} does not match input shape {x.shape}")
    m = np.broadcast_to(m, x.shape)
    ind = m.astype(x.values.dtype)
    return _result(np.asarray((x.values * ind).sum()), "masked_sum", (x,), lambda g: (g * ind,))


def segment_max(x: Tensor, segments: Sequence[np.ndarray]) -> Tensor:
    """Max of ``x`` over each flat-index segment; the gradient goes to the first argmax."""
    flat = x.values.reshape(-1)
    picks = np.empty(len(segments), dtype=np.int64)
    for i, seg in enumerate(segments):
        if len(seg) == 0:
            raise ContractError("segment_max got an empty segment")
        picks[i] = seg[int(np.argmax(flat[seg]))]
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(flat.size, dtype=g.dtype)
        np.add.at(out, picks, g)
        return (out.reshape(shape),)

    return _result(flat[picks].copy(), "segment_max", (x,), grad_fn)


# ------------------------------------------------------------ shape handling


def take(x: Tensor, index) -> Tensor:
    out = x.values[index]
    shape, dtype = x.shape, x.values.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), "take", (x,), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.values.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects two rank-4 tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}: batch/spatial dims differ")
    ca = a.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)
    return _result(out, "concat_channels", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# -------------------------------------------------------------- spatial ops


def avgpool2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avgpool2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out = x.values.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, "avgpool2", (x,), grad_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, "upsample_nearest2", (x,), grad_fn)


def _same_pad(size: int, extent: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + extent - size, 0)
    return total // 2, total - total // 2, out


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: str = "same",
) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kh,kw]``.

    Dilation spaces the kernel taps ``dilation`` pixels apart (atrous convolution);
    dilation 1 is the ordinary convolution. ``"same"`` zero-pads symmetrically with
    the odd pixel on the bottom/right.
    """
    if stride < 1 or dilation < 1:
        raise ConfigError("stride and dilation must be positive integers")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw], got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    _check_finite(x, "conv2d")
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if padding == "same":
        top, bottom, ho = _same_pad(h, eh, stride)
        left, right, wo = _same_pad(w, ew, stride)
    elif padding == "valid":
        top = bottom = left = right = 0
        if eh > h or ew > w:
            raise ShapeError(f"dilated kernel extent {eh}x{ew} exceeds input {h}x{w}")
        ho, wo = (h - eh) // stride + 1, (w - ew) // stride + 1
    else:
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")

    xv, kv = x.values, kernel.values
    xp = np.pad(xv, ((0, 0), (0, 0), (top, bottom), (left, right))) if top + bottom + left + right else xv
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1

    def tap(i: int, j: int) -> tuple[slice, slice]:
        r, s = i * dilation, j * dilation
        return slice(r, r + span_h, stride), slice(s, s + span_w, stride)

    out = np.zeros((n, f, ho, wo), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = tap(i, j)
            # (N,C,ho,wo) x (F,C) -> (N,ho,wo,F)
            out += np.tensordot(xp[:, :, rs, cs], kv[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.values[None, :, None, None]

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        gx = np.zeros_like(xp)
        gk = np.zeros_like(kv)
        for i in range(kh):
            for j in range(kw):
                rs, cs = tap(i, j)
                gk[:, :, i, j] = np.tensordot(g, xp[:, :, rs, cs], axes=([0, 2, 3], [0, 2, 3]))
                gx[:, :, rs, cs] += np.tensordot(g, kv[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gx[:, :, top : top + h, left : left + w]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _result(out, "conv2d", inputs, grad_fn)


# ------------------------------------------------------------------- backward


def topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` through recorded nodes, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad`` between steps.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, grads):
            if not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericFault(f"non-finite gradient in reverse pass of {t.node.op}")
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
