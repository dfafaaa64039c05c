"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output keeps a reference to a :class:`Node` holding its inputs and a backward
rule; :func:`backward` linearises those nodes into a :class:`Tape` and sweeps
it in reverse. The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _node: Node | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._node = _node

    @property
    def shape(self) -> tuple:
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
        return self._node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data}"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, kind: str, inputs: tuple, backward) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _node=Node(kind, inputs, backward))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul_elementwise", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul_elementwise", (a, b), bw)


mul_elementwise = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


# --------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, "relu", (x,), lambda g: (g * (out > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _make(out, "gelu", (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("log: empty tensor")
    # clamp keeps log finite on exact zeros
    safe = np.maximum(x.data, np.finfo(x.dtype).tiny)
    return _make(np.log(safe), "log", (x,), lambda g: (g / safe,))


def _check_axis(kind: str, x: Tensor, axis: int) -> int:
    if x.size == 0:
        raise ShapeError(f"{kind}: empty tensor")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for shape {x.shape}")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), bw)


def normalize_l2(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    axis = _check_axis("normalize_l2", x, axis)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, "normalize_l2", (x,), bw)


# --------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {x.shape}")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), "mean", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), "slice", (x,), bw)


# --------------------------------------------------------------------------
# convolution


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: padded [N, H, W, C] -> contiguous [N, Ho, Wo, kh, kw, C]
    n, _, _, c = xp.shape
    s_n, s_h, s_w, s_c = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, kh, kw, c), (s_n, s_h * stride, s_w * stride, s_h, s_w, s_c), writeable=False
    )
    return np.ascontiguousarray(view)


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NHWC input with an OIHW kernel, producing NHWC output."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
    n, h, wd, c = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = _im2col_nhwc(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(n * ho * wo, o)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            # col2im, accumulated per stride phase so every add is a dense slice
            hp, wp = xp.shape[1], xp.shape[2]
            hq, wq = -(-hp // stride), -(-wp // stride)
            acc = np.zeros((stride, stride, n, hq, wq, c), dtype=xp.dtype)
            w4 = w.data.transpose(0, 2, 3, 1)
            for i in range(kh):
                for j in range(kw):
                    gij = (g2 @ np.ascontiguousarray(w4[:, i, j, :])).reshape(n, ho, wo, c)
                    acc[i % stride, j % stride][:, i // stride : i // stride + ho, j // stride : j // stride + wo] += gij
            gxp = np.empty((n, hq * stride, wq * stride, c), dtype=xp.dtype)
            for p in range(stride):
                for q in range(stride):
                    gxp[:, p::stride, q::stride] = acc[p, q]
            gx = gxp[:, padding : padding + h, padding : padding + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(n, ho, wo, o), "conv2d", inputs, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel (im2col + matmul)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b, stride=stride, padding=padding)
    return transpose(y, (0, 3, 1, 2))


# --------------------------------------------------------------------------
# dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "gelu": gelu,
    "mean": mean,
    "sum": sum_,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "normalize_l2": normalize_l2,
    "scale": scale,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
}


def apply(op_kind: str, *inputs, **params) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **params)


# --------------------------------------------------------------------------
# backward


@dataclass
class TapeEntry:
    kind: str
    input_ids: tuple
    output_id: int
    backward: Callable


class Tape:
    """Operations reachable from a root, in topological (forward) order."""

    def __init__(self, entries: list[TapeEntry], tensors: dict[int, Tensor]):
        self.entries = entries
        self.tensors = tensors

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.node_id in seen:
                continue
            seen.add(t.node_id)
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and inp.node_id not in seen:
                        stack.append((inp, False))
        tensors = {t.node_id: t for t in order}
        entries = [
            TapeEntry(t._node.kind, tuple(i.node_id for i in t._node.inputs), t.node_id, t._node.backward)
            for t in order
            if t._node is not None
        ]
        return cls(entries, tensors)


def backward(root: Tensor, accumulate: bool = True) -> dict[int, Tensor]:
    """Propagate d(root)/d(node) to every node that requires a gradient.

    Leaf gradients are also accumulated into ``leaf.grad``.
    """
    if root.shape != ():
        raise GradientError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientError("backward: root is detached from the graph")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for entry in reversed(tape.entries):
        g = grads.get(entry.output_id)
        if g is None:
            continue
        node = tape.tensors[entry.output_id]._node
        in_grads = entry.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = ig if prev is None else prev + ig
    out = {}
    for nid, t in tape.tensors.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(t.data)
        if t.is_leaf and accumulate:
            t.grad = g.copy() if t.grad is None else t.grad + g
        out[nid] = Tensor(g)
    return out


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar root w.r.t. the given tensors, without touching ``.grad``."""
    gmap = backward(root, accumulate=False)
    return [gmap[t.node_id].data if t.node_id in gmap else np.zeros_like(t.data) for t in wrt]


def finite_difference_check(f: Callable[[Tensor], Tensor], theta, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central-difference gradients of ``f`` at ``theta``.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    theta = np.array(theta, dtype=np.float64, copy=True)
    x = Tensor(theta.copy(), requires_grad=True)
    y = f(x)
    if y.requires_grad:
        g_ad = grad(y, [x])[0].reshape(-1)
    else:
        g_ad = np.zeros(theta.size)
    flat = theta.reshape(-1)
    g_fd = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(Tensor(theta.copy())).item()
        flat[k] = orig - eps
        fm = f(Tensor(theta.copy())).item()
        flat[k] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {k}")
        g_fd[k] = (fp - fm) / (2 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
