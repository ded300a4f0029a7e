"""Minimal reverse-mode automatic differentiation on float64 numpy buffers.

Every differentiable result records the operation that produced it (its
parents, a backward rule and a forward replay rule), so a loss can be
traced back to its leaves. Only the operations the encoders and losses use
are provided.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


class ConfigurationError(ValueError):
    """Shape or hyperparameter combination an op cannot accept."""


class GradCheckFailure(ArithmeticError):
    def __init__(self, index, message):
        super().__init__(f"{message} at coordinate {index}")
        self.index = index


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_forward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._forward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, forward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._forward = forward_fn
    else:
        out._parents = ()
        out._backward = None
        out._forward = None
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        np.add, "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        np.subtract, "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        np.multiply, "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad / bd, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        np.divide, "div",
    )


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    e = float(exponent)
    xd = x.data

    def bw(g):
        if e == 0.0:
            return (np.zeros_like(xd),)
        return (g * e * xd ** (e - 1.0),)

    return _record(xd ** e, (x,), bw, lambda d: d ** e, "pow")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), np.exp, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), np.log, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), np.sqrt, "sqrt")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(
        np.where(mask, x.data, 0.0), (x,),
        lambda g: (g * mask,),
        lambda d: np.where(d > 0, d, 0.0), "relu",
    )


def _sigmoid(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), _sigmoid, "sigmoid")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(
        np.clip(x.data, lo, hi), (x,),
        lambda g: (g * inside,),
        lambda d: np.clip(d, lo, hi), "clip",
    )


# reductions and shape -----------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(
        np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw,
        lambda d: np.asarray(d.sum(axis=axis, keepdims=keepdims)), "sum",
    )


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) / float(count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(
        x.data.reshape(shape), (x,),
        lambda g: (g.reshape(old),),
        lambda d: d.reshape(shape), "reshape",
    )


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,), lambda d: d.T.copy(), "transpose")


def take(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(x.data[index]), (x,), bw, lambda d: np.array(d[index]), "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bw,
        lambda *ds: np.concatenate(ds, axis=axis), "concat",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), np.matmul, "matmul")


# layers -------------------------------------------------------------------

def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear: input width {x.shape[-1]} != weight in_features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    squeeze = xd.ndim == 1

    def fwd(xd, wd, bd):
        return xd @ wd.T + bd

    def bw(g):
        g2 = g[None, :] if squeeze else g
        x2 = xd[None, :] if squeeze else xd
        gx = g2 @ wd
        return (gx[0] if squeeze else gx, g2.T @ x2, g2.sum(axis=0))

    return _record(fwd(xd, wd, bias.data), (x, weight, bias), bw, fwd, "linear")


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xd: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only [N,C,Ho,Wo,kh,kw] view of strided windows."""
    n, c, h, w = xd.shape
    s0, s1, s2, s3 = xd.strides
    shape = (n, c, (h - kh) // stride + 1, (w - kw) // stride + 1, kh, kw)
    return as_strided(xd, shape, (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        n, c, h, w = xd.shape
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        padded[:, :, padding:padding + h, padding:padding + w] = xd
        xd = padded
    win = _windows(np.ascontiguousarray(xd), kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_forward(xd, wd, bd, stride, padding):
    n = xd.shape[0]
    f, _, kh, kw = wd.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    out = cols @ wd.reshape(f, -1).T + bd
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2).copy(), cols


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError("conv2d expects input [N,C,H,W] and kernel [F,C,kH,kW]")
    n, c, h, w = x.shape
    f, kc, kh, kw = weight.shape
    if kc != c:
        raise ConfigurationError(f"conv2d: kernel expects {kc} channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ConfigurationError("conv2d: kernel larger than padded input")
    if bias.shape != (f,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({f},)")

    out, cols = _conv_forward(x.data, weight.data, bias.data, stride, padding)
    ho, wo = out.shape[2], out.shape[3]
    wd = weight.data

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wd.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return (gxp, gw, gb)

    return _record(
        out, (x, weight, bias), bw,
        lambda xd, wd, bd: _conv_forward(xd, wd, bd, stride, padding)[0], "conv2d",
    )


def _pool_forward(xd, k, stride):
    win = _windows(np.ascontiguousarray(xd), k, k, stride)
    flat = win.reshape(win.shape[:4] + (k * k,))
    return flat.max(axis=-1), flat


def max_pool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    if k <= 0 or stride <= 0:
        raise ConfigurationError("max_pool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ConfigurationError("max_pool2d: window larger than input")
    out, flat = _pool_forward(x.data, k, stride)
    ho, wo = out.shape[2], out.shape[3]

    def bw(g):
        # argmax returns the first maximum, i.e. first in row-major scan order
        arg = flat.argmax(axis=-1)
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        flat_idx = (np.arange(n * c).reshape(n, c, 1, 1) * (h * w) + rows * w + cols).ravel()
        gx = np.bincount(flat_idx, weights=g.ravel(), minlength=n * c * h * w)
        return (gx.reshape(n, c, h, w),)

    return _record(out, (x,), bw, lambda d: _pool_forward(d, k, stride)[0], "max_pool2d")


def global_avg_pool(x) -> Tensor:
    """[N,C,H,W] -> [N,C]"""
    return tmean(x, axis=(2, 3))


def batch_mean(x) -> Tensor:
    return tmean(x, axis=0)


# graph traversal ----------------------------------------------------------

@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


def _topological(root: Tensor, stop: set[int] | None = None) -> list[Tensor]:
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
        if stop is not None and id(t) in stop:
            continue
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Graph:
    """Recorded operations reachable from a tensor, inputs before outputs."""

    def __init__(self, root: Tensor):
        self.tensors = _topological(root)
        self._ids = {id(t): i for i, t in enumerate(self.tensors)}
        self.nodes = [
            Node(t._op, tuple(self._ids[id(p)] for p in t._parents if id(p) in self._ids), i)
            for i, t in enumerate(self.tensors) if not t.is_leaf
        ]

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded op from the recorded leaves."""
        values: dict[int, np.ndarray] = {}
        for t in self.tensors:
            if t.is_leaf:
                values[id(t)] = t.data
            else:
                args = [values.get(id(p), p.data) for p in t._parents]
                values[id(t)] = t._forward(*args)
        return [values[id(t)] for t in self.tensors]


def _propagate(root: Tensor, seed: np.ndarray, stop: set[int] | None = None):
    order = _topological(root, stop)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t.is_leaf or (stop is not None and id(t) in stop):
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return grads, order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads, order = _propagate(loss, np.ones_like(loss.data))
    for t in order:
        g = grads.get(id(t))
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching any ``.grad`` field.

    Traversal stops at the requested inputs, so only the part of the graph
    above them is visited.
    """
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad of a non-scalar output needs grad_output")
        grad_output = np.ones_like(output.data)
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    stop = {id(t) for t in inputs}
    grads, _ = _propagate(output, np.asarray(grad_output, dtype=np.float64), stop)
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data))).reshape(t.shape) for t in inputs]


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    (analytic,) = grad(out, [xt])
    worst = 0.0
    probe = base.copy()
    with no_grad():
        for idx in np.ndindex(base.shape):
            orig = probe[idx]
            probe[idx] = orig + eps
            fp = float(f(Tensor(probe)).data)
            probe[idx] = orig - eps
            fm = float(f(Tensor(probe)).data)
            probe[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(analytic[idx])):
                raise GradCheckFailure(idx, "non-finite value while probing")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# serialization ------------------------------------------------------------

def tensor_to_bytes(t) -> bytes:
    """u32 rank, u32 dims, then little-endian float64 payload."""
    data = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape)
    return header + data.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns it with the offset just past it."""
    if offset + 4 > len(buf):
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset + 4 * rank > len(buf):
        raise ValueError("truncated tensor shape")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = offset + 8 * count
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
    return Tensor(data.astype(np.float64)), end


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
