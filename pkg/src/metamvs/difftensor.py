"""Minimal reverse-mode automatic differentiation on top of numpy.

Only the primitives needed by the depth network and its losses are provided.
A graph is built dynamically while operations run; ``Tensor.backward`` walks
it in reverse topological order, accumulates gradients into every tensor that
requires them, and then frees the graph.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_state = {"grad_enabled": True, "debug": False}


class NumericalError(FloatingPointError):
    """Raised in debug mode when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for non-finite values while active."""
    prev = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node.op == "leaf" or not node._parents:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._parents = ()
            node._backward = None

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _reduce_sum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    # 64-bit accumulator, result stored at input precision
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary(a, b) -> tuple[Tensor, Tensor]:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # keep the open interval even where float rounding saturates
    out = np.clip(out, np.finfo(out.dtype).tiny, np.nextafter(out.dtype.type(1), out.dtype.type(0)))
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                              _unbroadcast(np.where(mask, 0, g), b.shape)), "where")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _reduce_sum(a.data, axis, keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = (np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _result(out, (a,), backward, "mean")


def variance(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Population variance, composed from differentiable primitives."""
    m = mean(a, axis, keepdims=True)
    return mean(square(a - m), axis, keepdims)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _result(np.array(out, copy=True), (a,), backward, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    indices = np.asarray(indices)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        gm = np.moveaxis(ga, axis, 0)
        np.add.at(gm, indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _result(out, (a,), backward, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, backward, "concat")


def pad(a: Tensor, width: int, axes: Sequence[int], mode: str = "constant") -> Tensor:
    """Pad ``width`` elements on both sides of each listed axis.

    ``mode`` is ``"constant"`` (zeros) or ``"reflect"`` (mirror without
    repeating the edge sample, as numpy does).
    """
    if mode == "constant":
        pw = [(0, 0)] * a.ndim
        for ax in axes:
            pw[ax] = (width, width)
        crop = tuple(slice(width, width + a.shape[ax]) if ax in axes else slice(None)
                     for ax in range(a.ndim))
        return _result(np.pad(a.data, pw), (a,), lambda g: (g[crop],), "pad")
    if mode == "reflect":
        out = a
        for ax in axes:
            idx = np.pad(np.arange(a.shape[ax]), width, mode="reflect")
            out = take(out, idx, ax)
        return out
    raise ValueError(f"unknown pad mode {mode!r}")


# ---------------------------------------------------------------------------
# convolution, normalization, resampling
# ---------------------------------------------------------------------------

def _conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int, nd: int) -> Tensor:
    batched = x.ndim == nd + 2
    if x.ndim not in (nd + 1, nd + 2):
        raise DimensionError(f"conv{nd}d expects input rank {nd + 1} or {nd + 2}, got shape {x.shape}")
    if weight.ndim != nd + 2:
        raise DimensionError(f"conv{nd}d kernel must have rank {nd + 2}, got shape {weight.shape}")
    xd = x.data if batched else x.data[None]
    cin = xd.shape[1]
    if weight.shape[1] != cin:
        raise DimensionError(
            f"conv{nd}d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv{nd}d bias shape {bias.shape} does not match kernel {weight.shape}")
    k = weight.shape[2:]
    spatial = tuple(range(2, 2 + nd))
    if padding:
        xp = np.pad(xd, [(0, 0), (0, 0)] + [(padding, padding)] * nd)
    else:
        xp = xd
    if any(xp.shape[2 + i] < k[i] for i in range(nd)):
        raise DimensionError(f"conv{nd}d kernel {weight.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, k, axis=spatial)
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    B, out_sp = xd.shape[0], win.shape[2:2 + nd]
    O = weight.shape[0]
    # im2col once: rows are (batch, output position), columns (channel, kernel offset)
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(-1, cin * int(np.prod(k)))
    wmat = weight.data.reshape(O, -1)
    out = (wmat @ cols.T).reshape((O, B) + out_sp)
    out = np.ascontiguousarray(np.swapaxes(out, 0, 1))
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * nd)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(np.swapaxes(gb, 0, 1)).reshape(O, -1)
        gw = (gmat @ cols).reshape(weight.shape) if weight.requires_grad else None
        gbias = _reduce_sum(gb, axis=(0,) + spatial) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape((cin,) + tuple(k) + (B,) + out_sp)
            gxp = np.zeros_like(xp)
            for off in np.ndindex(*k):
                sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp))
                gxp[(slice(None), slice(None)) + sl] += np.swapaxes(gcols[(slice(None),) + off], 0, 1)
            if padding:
                gxp = gxp[(slice(None), slice(None)) + (slice(padding, -padding),) * nd]
            gx = gxp if batched else gxp[0]
        return gx, gw, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, f"conv{nd}d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([B,]C,H,W) with ``weight`` (O,C,kh,kw)."""
    return _conv(x, weight, bias, stride, padding, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([B,]C,D,H,W) with ``weight`` (O,C,kd,kh,kw)."""
    return _conv(x, weight, bias, stride, padding, 3)


def spatial_norm(x: Tensor, scale: Tensor, shift: Tensor, nd: int, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of each sample over its ``nd`` trailing axes.

    Stands in for batch normalization so the result does not depend on the
    batch size (desk-scale batches are often a single sample).
    """
    axes = tuple(range(x.ndim - nd, x.ndim))
    c_axis = x.ndim - nd - 1
    bshape = [1] * x.ndim
    bshape[c_axis] = x.shape[c_axis]
    mu = np.mean(x.data, axis=axes, keepdims=True, dtype=np.float64)
    var = np.mean((x.data - mu) ** 2, axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    s = scale.data.reshape(bshape)
    out = xhat * s + shift.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != c_axis)

    def backward(g):
        gs = _reduce_sum(g * xhat, axis=red) if scale.requires_grad else None
        gsh = _reduce_sum(g, axis=red) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * s
            m1 = np.mean(gh, axis=axes, keepdims=True, dtype=np.float64)
            m2 = np.mean(gh * xhat, axis=axes, keepdims=True, dtype=np.float64)
            gx = (inv * (gh - m1 - xhat * m2)).astype(x.dtype)
        return gx, gs, gsh

    return _result(out.astype(x.dtype), (x, scale, shift), backward, "spatial_norm")


def upsample2x(x: Tensor, nd: int) -> Tensor:
    """Nearest-neighbour x2 upsampling of the ``nd`` trailing axes."""
    out = x.data
    for ax in range(x.ndim - nd, x.ndim):
        out = np.repeat(out, 2, axis=ax)

    def backward(g):
        shape = list(x.shape[: x.ndim - nd])
        for n in x.shape[x.ndim - nd:]:
            shape += [n, 2]
        g = g.reshape(shape)
        return (g.sum(axis=tuple(range(x.ndim - nd + 1, x.ndim - nd + 2 * nd, 2))),)

    return _result(out, (x,), backward, "upsample2x")


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        s = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (out * (g - s),)

    return _result(out, (x,), backward, "softmax")


def softmax_over_depth(volume: Tensor) -> Tensor:
    """Per-pixel softmax along the leading (depth) axis of a [D,H,W] volume."""
    return softmax(volume, axis=0)


BORDER_TOL = 1e-4


def bilinear_sample(image: Tensor, coords) -> tuple[Tensor, np.ndarray]:
    """Sample ``image`` (C,H,W) at continuous pixel ``coords`` (2,...).

    ``coords[0]`` is the column (x) and ``coords[1]`` the row (y). A location
    is valid when it lies inside ``[0, W-1] x [0, H-1]``, i.e. when all four
    interpolation neighbours are inside the image; invalid locations sample 0.
    Points within ``BORDER_TOL`` px of the border count as on it, so rounding
    in upstream geometry does not drop whole edge rows.
    Returns the sampled tensor (C, ...) and the float 0/1 validity map.
    """
    coords = _as_tensor(coords, image)
    C, H, W = image.shape
    x = coords.data[0]
    y = coords.data[1]
    tol = BORDER_TOL
    valid = (np.isfinite(x) & np.isfinite(y) & (x >= -tol) & (x <= W - 1 + tol)
             & (y >= -tol) & (y <= H - 1 + tol))
    xc = np.clip(np.where(valid, x, 0), 0, W - 1)
    yc = np.clip(np.where(valid, y, 0), 0, H - 1)
    x0 = np.clip(np.floor(xc), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xc - x0).astype(image.dtype)
    wy = (yc - y0).astype(image.dtype)
    vf = valid.astype(image.dtype)
    img = image.data
    i00, i01 = img[:, y0, x0], img[:, y0, x1]
    i10, i11 = img[:, y1, x0], img[:, y1, x1]
    w00 = (1 - wx) * (1 - wy) * vf
    w01 = wx * (1 - wy) * vf
    w10 = (1 - wx) * wy * vf
    w11 = wx * wy * vf
    out = i00 * w00 + i01 * w01 + i10 * w10 + i11 * w11

    def backward(g):
        gi = gc = None
        if image.requires_grad:
            flat = np.concatenate([(y0 * W + x0).ravel(), (y0 * W + x1).ravel(),
                                   (y1 * W + x0).ravel(), (y1 * W + x1).ravel()])
            gi = np.empty_like(img)
            for c in range(C):
                gcm = g[c]
                wts = np.concatenate([(gcm * w00).ravel(), (gcm * w01).ravel(),
                                      (gcm * w10).ravel(), (gcm * w11).ravel()])
                gi[c] = np.bincount(flat, weights=wts, minlength=H * W).reshape(H, W)
        if coords.requires_grad:
            dx = ((1 - wy) * (i01 - i00) + wy * (i11 - i10)) * vf
            dy = ((1 - wx) * (i10 - i00) + wx * (i11 - i01)) * vf
            gc = np.stack([_reduce_sum(g * dx, axis=0), _reduce_sum(g * dy, axis=0)])
        return gi, gc

    return _result(out, (image, coords), backward, "bilinear_sample"), vf


# ---------------------------------------------------------------------------
# parameters, optimizers, checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"MMVS"
FORMAT_VERSION = 1


class ParamSet:
    """Ordered, named collection of parameter arrays."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | dict | None = None):
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        if items is not None:
            if isinstance(items, dict):
                items = items.items()
            for name, value in items:
                self._data[name] = np.asarray(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._data[name] = np.asarray(value)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def clone(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._data.items())

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, v.astype(dtype)) for k, v in self._data.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._data.items())

    def num_values(self) -> int:
        return sum(v.size for v in self._data.values())

    def leaves(self, frozen: Iterable[str] = ()) -> dict[str, Tensor]:
        """Fresh leaf tensors for a forward pass; frozen names get no grad."""
        frozen = set(frozen)
        return {k: Tensor(v, requires_grad=k not in frozen) for k, v in self._data.items()}

    def check_compatible(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise DimensionError(f"parameter names differ: {self.names()} vs {other.names()}")
        for k, v in self._data.items():
            if v.shape != other[k].shape:
                raise DimensionError(f"parameter {k!r}: shape {v.shape} vs {other[k].shape}")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        for name, value in self._data.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", value.ndim))
            buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
            buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        if blob[:4] != MAGIC:
            raise ValueError("not a parameter checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 8
        out = cls()
        try:
            while pos < len(blob):
                (n,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                name = blob[pos:pos + n].decode("utf-8")
                pos += n
                (rank,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                shape = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                count = int(np.prod(shape)) if rank else 1
                if pos + 4 * count > len(blob):
                    raise ValueError(f"truncated checkpoint while reading {name!r}")
                value = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
                out[name] = value.astype(np.float32)
                pos += 4 * count
        except struct.error as exc:
            raise ValueError(f"truncated checkpoint: {exc}") from None
        return out

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamSet":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, frozen: Iterable[str] = ()) -> ParamSet:
    """Return ``params - lr * grads`` as a new set; ``params`` is not touched."""
    params.check_compatible(grads)
    frozen = set(frozen)
    out = ParamSet()
    for name, value in params.items():
        if name in frozen or lr == 0:
            out[name] = value.copy()
        else:
            out[name] = (value - value.dtype.type(lr) * grads[name].astype(value.dtype)).astype(value.dtype)
    return out


class Adam:
    """Adam optimizer with explicit, serializable state."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: ParamSet | None = None
        self.v: ParamSet | None = None
        self.t = 0

    def step(self, params: ParamSet, grads: ParamSet, frozen: Iterable[str] = ()) -> ParamSet:
        params.check_compatible(grads)
        if self.m is None:
            self.m, self.v = params.zeros_like(), params.zeros_like()
        frozen = set(frozen)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = ParamSet()
        for name, value in params.items():
            if name in frozen:
                out[name] = value.copy()
                continue
            g = grads[name].astype(np.float64)
            m = b1 * self.m[name] + (1 - b1) * g
            v = b2 * self.v[name] + (1 - b2) * g * g
            self.m[name], self.v[name] = m.astype(np.float32), v.astype(np.float32)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[name] = (value - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(value.dtype)
        return out

    def state(self) -> ParamSet:
        st = ParamSet([("adam.t", np.array(self.t, dtype=np.float32))])
        if self.m is not None:
            for name in self.m:
                st["adam.m/" + name] = self.m[name]
                st["adam.v/" + name] = self.v[name]
        return st

    def load_state(self, st: ParamSet) -> None:
        self.t = int(st["adam.t"])
        names = [k[len("adam.m/"):] for k in st if k.startswith("adam.m/")]
        if names:
            self.m = ParamSet((n, st["adam.m/" + n]) for n in names)
            self.v = ParamSet((n, st["adam.v/" + n]) for n in names)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-3,
                 indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` w.r.t. ``array`` (in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    idxs = np.ndindex(*array.shape) if indices is None else indices
    for idx in idxs:
        old = array[idx]
        array[idx] = old + h
        fp = fn()
        array[idx] = old - h
        fm = fn()
        array[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-3) -> float:
    """Relative error between autodiff and central-difference gradients.

    ``fn`` receives one Tensor per array and returns a scalar Tensor. The
    error is measured on the gradients of all arrays stacked into one vector,
    so a parameter with an exactly zero gradient (a bias in front of a
    normalization, say) does not turn rounding noise into a 100% error.
    Arrays should be float64 for a meaningful comparison.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    ana_all, num_all = [], []
    for leaf, arr in zip(leaves, arrays):
        work = arr.copy()

        def f():
            with no_grad():
                return float(fn(*[Tensor(work) if a is arr else Tensor(a) for a in arrays]).data)

        num_all.append(numeric_grad(f, work, h).ravel())
        ana_all.append((leaf.grad if leaf.grad is not None else np.zeros_like(arr)).ravel())
    return relative_error(np.concatenate(ana_all), np.concatenate(num_all))
