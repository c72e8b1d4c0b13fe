"""Dense-tensor engine with reverse-mode automatic differentiation.

Every array the network touches (feature maps, weights, offset fields) is a
:class:`Tensor`.  Operations build a graph of :class:`TapeNode` records;
``backward`` replays the records in reverse to populate ``.grad`` buffers.
Compute runs in float32 by default; verification code passes float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

# name -> callable, filled by @_op; the gradient-check suite iterates this.
OP_REGISTRY: dict[str, Callable] = {}

_GRAD_ENABLED = True
_TAPE_STACK: list["GradTape"] = []


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class GeometryError(ValueError):
    """Spatial parameters do not produce a valid integer output extent."""


class AutodiffError(RuntimeError):
    """Backward was invoked on a tensor that cannot seed a gradient."""


def _op(name: str):
    def deco(fn):
        OP_REGISTRY[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeNode:
    """One executed differentiable op: inputs, output, and its vjp."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Execution-ordered record of differentiable operations.

    Execution order is a topological order of the graph, so a single reverse
    pass over the record visits each node exactly once.  ``clear`` severs the
    node <-> tensor cycles so saved activations are freed by reference
    counting immediately, not at the garbage collector's leisure; a cleared
    tape cannot be replayed.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            out = node.output
            if out is not None and out._node is node:
                out._node = None
            node.inputs = ()
            node.output = None
            node.backward_fn = None
        self.nodes.clear()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()
        self.clear()

    def backward(self, loss: "Tensor") -> None:
        _replay(self.nodes, loss)


def _replay(nodes: Sequence[TapeNode], loss: "Tensor") -> None:
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is None:  # the loss is itself a leaf
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros(loss.shape, dtype=loss.dtype)
            loss.grad += 1.0
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(nodes):
        gout = pending.pop(id(node.output), None)
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._node is None:  # leaf: accumulate into the public buffer
                if inp.grad is None:
                    inp.grad = np.zeros(inp.shape, dtype=inp.dtype)
                inp.grad += g
            else:
                acc = pending.get(id(inp))
                pending[id(inp)] = g if acc is None else acc + g
    # pending grads for tensors whose producing node is outside `nodes` are
    # intentionally dropped: they are constants w.r.t. this tape


def _graph_topo(loss: "Tensor") -> list[TapeNode]:
    order: list[TapeNode] = []
    seen: set[int] = set()
    stack: list[tuple["Tensor", bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: "Tensor") -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    _replay(_graph_topo(loss), loss)


TensorLike = Union["Tensor", np.ndarray, float, int, list]


class Tensor:
    """Row-major dense array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data: TensorLike, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # ndarrays keep their float precision; everything else computes in f32
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in DTYPE_TAGS else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPE_TAGS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(tuple(inputs), out, backward_fn)
        out._node = node
        if _TAPE_STACK:
            _TAPE_STACK[-1].record(node)
    return out


def _check_same_dtype(a: Tensor, b: Tensor, opname: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{opname}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


@_op("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


@_op("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


@_op("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


@_op("div")
def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


@_op("neg")
def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


@_op("relu")
def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(out, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@_op("gelu")
def gelu(a: Tensor) -> Tensor:
    # tanh approximation; well below test tolerances vs. the erf form
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _record(out, (a,), bwd)


@_op("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), bwd)


@_op("exp")
def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


@_op("sqrt")
def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    out = Tensor(r)

    def bwd(g):
        return (g * 0.5 / r,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


@_op("reshape")
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


@_op("transpose")
def transpose(a: Tensor, axes: Optional[tuple[int, ...]] = None) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record(out, (a,), bwd)


@_op("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchError("concat of an empty sequence")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for ax, (o, b) in enumerate(zip(other, base)) if ax != axis % len(base)
        ):
            raise ShapeMismatchError(
                f"concat axis={axis}: shape {tuple(t.shape)} incompatible with {tuple(tensors[0].shape)}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


@_op("slice")
def slice_(a: Tensor, key) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data[key]))
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _record(out, (a,), bwd)


@_op("broadcast_to")
def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    orig = a.shape
    return _record(out, (a,), lambda g: (_unbroadcast(g, orig),))


@_op("pad2d")
def pad2d(a: Tensor, pads: tuple[int, int, int, int], value: float = 0.0) -> Tensor:
    """Constant-pad the two trailing axes by (top, bottom, left, right).

    Asymmetric padding expresses the floor-mode geometry of standard CNN
    stems exactly, keeping conv2d's integer output-extent contract strict.
    """
    top, bottom, left, right = pads
    width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = Tensor(np.pad(a.data, width, constant_values=value))
    h, w = a.shape[-2], a.shape[-1]
    key = (Ellipsis, slice(top, top + h), slice(left, left + w))

    def bwd(g):
        return (np.ascontiguousarray(g[key]),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


@_op("sum")
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), bwd)


@_op("mean")
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) / count,)

    return _record(out, (a,), bwd)


@_op("max")
def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    out = Tensor(vals if keepdims else vals.squeeze(ax))
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, ax), g, axis=ax)
        return (full,)

    return _record(out, (a,), bwd)


@_op("softmax")
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), bwd)


@_op("layernorm")
def layernorm(a: Tensor, features: int, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    if a.shape[-1] != features:
        raise ShapeMismatchError(
            f"layernorm: feature extent {a.shape[-1]} does not match features={features}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (a.data - mu) / std
    out = Tensor(xhat)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) / std,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


@_op("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution and sampling
# ---------------------------------------------------------------------------


def _conv_out_extent(extent: int, k: int, stride: int, padding: int, what: str) -> int:
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"conv2d: {what} extent {extent} with kernel {k}, stride {stride}, "
            f"padding {padding} gives a non-integer output extent"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, kh, stride, padding, "height")
    wo = _conv_out_extent(w, kw, stride, padding, "width")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(gcols: np.ndarray, xshape, kh, kw, stride, padding, ho, wo) -> np.ndarray:
    n, c, h, w = xshape
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    gc = gcols.reshape(n, c, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            gp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gc[
                :, :, ki, kj
            ]
    if padding:
        return gp[:, :, padding : padding + h, padding : padding + w]
    return gp


@_op("conv2d")
def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation with zero padding over NCHW input."""
    _check_same_dtype(x, weight, "conv2d")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: input {x.shape} incompatible with kernel {weight.shape}"
        )
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(o, c * kh * kw)
    y = np.matmul(w2, cols).reshape(n, o, ho, wo)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    out = Tensor(y)

    def bwd(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


@_op("maxpool2d")
def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, kernel, stride, padding, "height")
    wo = _conv_out_extent(w, kernel, stride, padding, "width")
    neg = np.finfo(x.dtype).min
    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=neg,
    )
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, kernel * kernel)
    idx = np.argmax(win, axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1).squeeze(-1))
    hp, wp = h + 2 * padding, w + 2 * padding

    def bwd(g):
        gp = np.zeros((n, c, hp * wp), dtype=g.dtype)
        ki, kj = idx // kernel, idx % kernel
        oy = np.arange(ho)[:, None] * stride
        ox = np.arange(wo)[None, :] * stride
        flat = (oy[None, None] + ki) * wp + (ox[None, None] + kj)
        np.add.at(gp, (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], flat), g)
        gfull = gp.reshape(n, c, hp, wp)
        if padding:
            gfull = gfull[:, :, padding : padding + h, padding : padding + w]
        return (np.ascontiguousarray(gfull),)

    return _record(out, (x,), bwd)


@_op("bilinear_sample")
def bilinear_sample(x: Tensor, py, px) -> Tensor:
    """Sample ``x`` (C,H,W) at continuous location (py, px).

    Uses the four integer neighbors; neighbors outside the map contribute
    zero, so locations fully outside [-1, H] x [-1, W] return zeros.
    Differentiable in ``x`` and in the coordinates.
    """
    py = _as_tensor(py, x.dtype)
    px = _as_tensor(px, x.dtype)
    c, h, w = x.shape
    yv, xv = float(py.data), float(px.data)
    y0, x0 = int(np.floor(yv)), int(np.floor(xv))
    fy, fx = yv - y0, xv - x0
    corners = []
    for yc, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xc, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            valid = 0 <= yc < h and 0 <= xc < w
            val = x.data[:, yc, xc] if valid else np.zeros(c, dtype=x.dtype)
            corners.append((yc, xc, wy * wx, valid, val))
    acc = np.zeros(c, dtype=x.dtype)
    for _, _, wgt, _, val in corners:
        acc = acc + wgt * val
    out = Tensor(acc)
    v00, v01, v10, v11 = (corners[i][4] for i in range(4))

    def bwd(g):
        gx = np.zeros((c, h, w), dtype=g.dtype)
        for yc, xc, wgt, valid, _ in corners:
            if valid:
                gx[:, yc, xc] += wgt * g
        dvdy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
        dvdx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
        gy = np.asarray(np.dot(g, dvdy), dtype=g.dtype).reshape(py.shape)
        gxc = np.asarray(np.dot(g, dvdx), dtype=g.dtype).reshape(px.shape)
        return gx, gy, gxc

    return _record(out, (x, py, px), bwd)


_CORNER_STEPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _deform_corners(y0, x0, fy, fx, h, w, nbase):
    """Per-corner (global flat row index, combined weight incl. validity)."""
    wy = (1.0 - fy, fy)
    wx = (1.0 - fx, fx)
    for dy, dx in _CORNER_STEPS:
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        gidx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1) + nbase
        yield gidx, (wy[dy] * wx[dx]) * valid, valid


def _deform_gather(xr, y0, x0, fy, fx, h, w, nbase):
    """Bilinear samples (N, L, T, C) from row-major xr (N*H*W, C)."""
    sampled = None
    for gidx, wgt, _ in _deform_corners(y0, x0, fy, fx, h, w, nbase):
        v = xr[gidx]  # (n, l, t, c)
        np.multiply(v, wgt[..., None], out=v)
        sampled = v if sampled is None else np.add(sampled, v, out=sampled)
    return sampled


@_op("deform_conv2d")
def deform_conv2d(
    x: Tensor, offsets: Tensor, weight: Tensor, bias: Optional[Tensor] = None
) -> Tensor:
    """Deformable convolution, stride 1, padding (K-1)/2.

    ``offsets`` carries per-location (dy, dx) pairs for each of the K*K taps,
    channel-ordered [tap0_dy, tap0_dx, tap1_dy, ...].  Each tap samples the
    input at (base grid + tap offset + learned offset) bilinearly;
    out-of-bounds samples contribute zero.  Differentiable w.r.t. the input,
    the kernel, and the offsets; backward recomputes the gathers instead of
    holding all corner values alive.
    """
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if kh != kw or cw != c:
        raise ShapeMismatchError(f"deform_conv2d: kernel {weight.shape} vs input {x.shape}")
    k = kh
    if offsets.shape != (n, 2 * k * k, h, w):
        raise ShapeMismatchError(
            f"deform_conv2d: offsets {offsets.shape} expected {(n, 2 * k * k, h, w)}"
        )
    pad = (k - 1) // 2
    t = k * k
    l = h * w
    oy = np.repeat(np.arange(h), w).astype(x.dtype)  # (L,)
    ox = np.tile(np.arange(w), h).astype(x.dtype)
    ky = (np.arange(t) // k - pad).astype(x.dtype)  # (T,)
    kx = (np.arange(t) % k - pad).astype(x.dtype)
    offs = offsets.data.reshape(n, t, 2, l)
    # (N, L, T) sample coordinates: row-major layout keeps every downstream
    # GEMM and scatter on contiguous axes
    py = oy[None, :, None] + ky[None, None] + offs[:, :, 0].transpose(0, 2, 1)
    px = ox[None, :, None] + kx[None, None] + offs[:, :, 1].transpose(0, 2, 1)
    y0f = np.floor(py)
    x0f = np.floor(px)
    fy = py - y0f
    fx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    nbase = (np.arange(n) * l).reshape(n, 1, 1)
    xr = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * l, c)
    sampled = _deform_gather(xr, y0, x0, fy, fx, h, w, nbase)
    wr = np.ascontiguousarray(weight.data.reshape(o, c, t).transpose(2, 1, 0)).reshape(t * c, o)
    y = np.matmul(sampled.reshape(n, l, t * c), wr)  # (N, L, O)
    del sampled
    if bias is not None:
        y = y + bias.data
    out = Tensor(np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(n, o, h, w))

    def bwd(g):
        g3 = np.ascontiguousarray(g.reshape(n, o, l).transpose(0, 2, 1))  # (N, L, O)
        gs = np.matmul(g3, wr.T).reshape(n, l, t, c)
        gxr = np.zeros((n * l, c), dtype=x.dtype)
        acc = None  # re-accumulated bilinear samples, for the kernel gradient
        proj = []  # per-corner <gs, v> reductions, for the offset gradient
        tmp = np.empty_like(gs)
        for gidx, wgt, valid in _deform_corners(y0, x0, fy, fx, h, w, nbase):
            v = xr[gidx]
            np.multiply(v, valid[..., None], out=v)  # zero out-of-bounds corners
            proj.append((gs * v).sum(axis=3))  # (N, L, T)
            np.multiply(v, wgt[..., None], out=v)
            acc = v if acc is None else np.add(acc, v, out=acc)
            np.multiply(gs, wgt[..., None], out=tmp)
            np.add.at(gxr, gidx.reshape(-1), tmp.reshape(-1, c))
        gwr = np.matmul(acc.reshape(n, l, t * c).transpose(0, 2, 1), g3).sum(axis=0)
        gw = np.ascontiguousarray(gwr.reshape(t, c, o).transpose(2, 1, 0)).reshape(weight.shape)
        gx = np.ascontiguousarray(gxr.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        # offset gradient: bilinear derivative contracted against gs per corner
        r00, r01, r10, r11 = proj
        goff = np.empty((n, t, 2, l), dtype=x.dtype)
        goff[:, :, 0] = ((r10 - r00) * (1.0 - fx) + (r11 - r01) * fx).transpose(0, 2, 1)
        goff[:, :, 1] = ((r01 - r00) * (1.0 - fy) + (r11 - r10) * fy).transpose(0, 2, 1)
        grads = [gx, goff.reshape(offsets.shape), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return _record(out, inputs, bwd)


def _interp_matrix(out_extent: int, in_extent: int, scale: int, dtype) -> np.ndarray:
    """Half-pixel bilinear interpolation matrix (rows are convex weights)."""
    m = np.zeros((out_extent, in_extent), dtype=dtype)
    for i in range(out_extent):
        src = (i + 0.5) / scale - 0.5
        src = min(max(src, 0.0), in_extent - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_extent - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


@_op("upsample_bilinear")
def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel alignment)."""
    n, c, h, w = x.shape
    wr = _interp_matrix(h * scale, h, scale, x.dtype)
    wc = _interp_matrix(w * scale, w, scale, x.dtype)
    out = Tensor(np.matmul(wr, np.matmul(x.data, wc.T)))

    def bwd(g):
        return (np.matmul(wr.T, np.matmul(g, wc)),)

    return _record(out, (x,), bwd)
