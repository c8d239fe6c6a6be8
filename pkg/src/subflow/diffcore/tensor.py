"""Reverse-mode autodiff on dense numpy arrays.

A `Tensor` wraps a float array plus an optional gradient buffer. Forward
ops build a closure graph (the tape); `backward()` on a scalar walks it in
reverse topological order and accumulates into `.grad`. Repeated backward
calls accumulate; callers zero grads between steps.

Forward values are checked finite after every op: NaN/Inf raises
`NumericsError` instead of propagating silently. Shape violations raise
`ShapeError` naming the op and the offending shapes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..errors import NumericsError, ShapeError

Arrayish = Union["Tensor", np.ndarray, float, int, list]


class Tensor:
    """Dense float tensor with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        elif dtype is not None:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor({self._op}, shape={self.data.shape}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    # -- tape -------------------------------------------------------------

    def backward(self) -> None:
        """Backprop from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate_grad(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = np.array(pg, copy=True)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape)


def as_tensor(x: Arrayish) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"op '{op}' produced non-finite values")


def _quiet():
    return np.errstate(divide="ignore", invalid="ignore", over="ignore")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Optional[Callable]) -> Tensor:
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a: Arrayish, b: Arrayish) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))
    return _make("add", data, (a, b), bw)


def sub(a: Arrayish, b: Arrayish) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))
    return _make("sub", data, (a, b), bw)


def mul(a: Arrayish, b: Arrayish) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))
    return _make("mul", data, (a, b), bw)


def div(a: Arrayish, b: Arrayish) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with _quiet():
        data = a.data / b.data

    def bw(g):
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))
    return _make("div", data, (a, b), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Arrayish, b: Arrayish) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))
    return _make("matmul", data, (a, b), bw)


def transpose(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.data.shape}")
    def bw(g):
        return ((a, g.T),)
    return _make("transpose", a.data.T.copy(), (a,), bw)


# -- nonlinearities ----------------------------------------------------------

def relu(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def bw(g):
        # subgradient at 0 is 0
        return ((a, g * (a.data > 0)),)
    return _make("relu", data, (a,), bw)


def tanh(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        return ((a, g * (1.0 - data * data)),)
    return _make("tanh", data, (a,), bw)


def sigmoid(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return ((a, g * data * (1.0 - data)),)
    return _make("sigmoid", data, (a,), bw)


def softplus(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    # log(1 + e^x), stabilized for large |x|
    data = np.logaddexp(0.0, a.data)

    def bw(g):
        return ((a, g / (1.0 + np.exp(-a.data))),)
    return _make("softplus", data, (a,), bw)


def exp(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    with _quiet():
        data = np.exp(a.data)

    def bw(g):
        return ((a, g * data),)
    return _make("exp", data, (a,), bw)


def log(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    with _quiet():
        data = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)
    return _make("log", data, (a,), bw)


def sqrt(a: Arrayish) -> Tensor:
    a = as_tensor(a)
    with _quiet():
        data = np.sqrt(a.data)

    def bw(g):
        return ((a, g * 0.5 / data),)
    return _make("sqrt", data, (a,), bw)


def clamp(a: Arrayish, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the value was interior."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def bw(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return ((a, g * inside),)
    return _make("clamp", data, (a,), bw)


# -- reductions / shape ops ---------------------------------------------------

def tsum(a: Arrayish, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.data.shape).copy()),)
    return _make("sum", np.asarray(data), (a,), bw)


def tmean(a: Arrayish, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.data.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / n, a.data.shape).copy()),)
    return _make("mean", np.asarray(data), (a,), bw)


def reshape(a: Arrayish, shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.data.shape)),)
    return _make("reshape", data, (a,), bw)


def concat(tensors: Sequence[Arrayish], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def bw(g):
        outs = []
        offset = 0
        for t, s in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            outs.append((t, g[tuple(idx)]))
            offset += s
        return tuple(outs)
    return _make("concat", data, ts, bw)


# -- image ops (C, H, W layout) ----------------------------------------------

def conv2d(x: Arrayish, weight: Arrayish, bias: Optional[Arrayish] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a (C_in, H, W) image by a (C_out, C_in, kh, kw) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects image (C,H,W) and kernel (O,C,kh,kw), got {x.data.shape}, {weight.data.shape}")
    cin, h, w = x.data.shape
    cout, cin_k, kh, kw = weight.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d channel mismatch: image {x.data.shape} vs kernel {weight.data.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} does not fit image {h}x{w} with padding {padding}")
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]           # (C, hout, wout, kh, kw)
    col = windows.transpose(1, 2, 0, 3, 4).reshape(hout * wout, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray((col @ wmat.T).T).reshape(cout, hout, wout)
    parents = [x, weight]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.data.shape} != ({cout},)")
        out = out + b.data[:, None, None]
        parents.append(b)

    def bw(g):
        gmat = g.reshape(cout, hout * wout)
        dw = (gmat @ col).reshape(weight.data.shape)
        dcol = gmat.T @ wmat                 # (hout*wout, cin*kh*kw)
        dxp = np.zeros((cin, hp, wp), dtype=g.dtype)
        dcol = dcol.reshape(hout, wout, cin, kh, kw).transpose(2, 0, 1, 3, 4)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * hout:stride, j:j + stride * wout:stride] += dcol[:, :, :, i, j]
        dx = dxp[:, padding:hp - padding, padding:wp - padding] if padding else dxp
        grads = [(x, dx), (weight, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(1, 2))))
        return tuple(grads)
    return _make("conv2d", out, parents, bw)


def avg_pool2d(x: Arrayish, k: int) -> Tensor:
    """Non-overlapping k*k average pooling of a (C, H, W) image; H, W divisible by k."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    data = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def bw(g):
        gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return ((x, gx),)
    return _make("avg_pool2d", data, (x,), bw)


def upsample2x(x: Arrayish) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (C, H, W) image."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return ((x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4))),)
    return _make("upsample2x", data, (x,), bw)
