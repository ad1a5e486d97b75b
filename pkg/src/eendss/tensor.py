"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable primitive computes its forward value with numpy and,
when any input requires gradients, appends the output to a per-thread
:class:`Tape` together with a closure returning the input adjoints.
:func:`backward` replays the tape in reverse creation order, which is a
valid reverse topological order because an output is always recorded after
its inputs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Tape:
    """Ordered record of the operations executed while recording is on."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    """A dense array with an optional gradient.

    Data is stored as float32 unless ``dtype`` is given explicitly; float64
    tensors are supported so that gradient checks can run at high precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _contiguous(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, retain_tape: bool = False):
        return backward(self, retain_tape=retain_tape)


def _contiguous(a: np.ndarray) -> np.ndarray:
    return a if a.flags.c_contiguous else a.copy()


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tape = get_tape()
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _lift(a, like), _lift(b, like)


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _result(out, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with a slope broadcastable against ``x``."""
    _check_broadcast("prelu", x.data, slope.data)
    neg = np.minimum(x.data, 0)
    out = x.data + (slope.data - 1) * neg

    def bw(g):
        gx = g + (slope.data - 1) * (g * (neg < 0)) if x.requires_grad else None
        if slope.requires_grad:
            if slope.size == 1:
                gs = np.asarray(np.vdot(g.ravel(), neg.ravel()), dtype=g.dtype).reshape(slope.shape)
            else:
                gs = _unbroadcast(g * neg, slope.shape)
        else:
            gs = None
        return gx, gs

    return _result(out.astype(x.dtype, copy=False), (x, slope), bw, "prelu")


def clamp(x: Tensor, low: float | None = None, high: float | None = None) -> Tensor:
    """Clip values; the gradient passes only where the input is inside the range."""
    out = np.clip(x.data, low, high)
    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x.data >= low
    if high is not None:
        inside &= x.data <= high
    return _result(out, (x,), lambda g: (g * inside,), "clamp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, axes: int | Sequence[int] = -1, eps: float = 1e-8,
               weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalise to zero mean and unit variance over ``axes``.

    ``weight`` and ``bias``, when given, are broadcast against the output
    as an elementwise affine map.
    """
    axes = _norm_axes(axes, x.ndim)
    trailing = axes == tuple(range(x.ndim - len(axes), x.ndim))
    if trailing:
        # reduce over one flattened trailing axis; much faster than a multi-axis reduce
        lead = x.shape[:x.ndim - len(axes)]
        flat = x.data.reshape(lead + (-1,))
        keep = lead + (1,) * len(axes)
        mu = flat.mean(axis=-1).reshape(keep)
        xc = x.data - mu
        var = np.einsum("...i,...i->...", xc.reshape(flat.shape), xc.reshape(flat.shape)).reshape(keep) / flat.shape[-1]
    else:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    y = xc * inv

    def _mean(a):
        if trailing:
            return a.reshape(lead + (-1,)).mean(axis=-1).reshape(keep)
        return a.mean(axis=axes, keepdims=True)
    out = y
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gw = _unbroadcast(g * y, weight.shape) if weight is not None and weight.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gy = g * weight.data if weight is not None else g
            gm = _mean(gy)
            gym = _mean(gy * y)
            gx = inv * (gy - gm - y * gym)
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    parents = [x] + [t for t in (weight, bias) if t is not None]
    return _result(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Sum with 64-bit accumulation; the result keeps the input dtype."""
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = (np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _result(np.asarray(out), (x,), bw, "mean")


def astype(x: Tensor, dtype) -> Tensor:
    """Cast to ``dtype``; the gradient is cast back to the input dtype."""
    return _result(x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),), "astype")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    index = index.data if isinstance(index, Tensor) else index
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(_contiguous(np.asarray(out)), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` follows :func:`numpy.pad`."""
    widths = list(widths)
    if len(widths) != x.ndim:
        raise ShapeError("pad", f"{len(widths)} pad widths for a {x.ndim}-d tensor")
    out = np.pad(x.data, widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(out, (x,), lambda g: (g[index],), "pad")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """1-D convolution (cross-correlation) of ``x`` with shape (batch, in, length).

    ``weight`` has shape (out, in // groups, kernel). Only dense (groups=1)
    and depthwise (groups = in = out) layouts are supported.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("conv1d", f"expected 3-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, length = x.shape
    cout, cin_g, k = weight.shape
    if groups == 1:
        if cin_g != cin:
            raise ShapeError("conv1d", f"input has {cin} channels but weight expects {cin_g}")
    elif not (groups == cin == cout and cin_g == 1):
        raise ShapeError("conv1d", f"unsupported grouping: groups={groups}, input {x.shape}, weight {weight.shape}")
    lout = conv_output_length(length, k, stride, padding, dilation)
    if lout < 1:
        raise ShapeError("conv1d", f"input length {length} shorter than dilated kernel {dilation * (k - 1) + 1}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    span = stride * (lout - 1) + 1
    taps = [slice(j * dilation, j * dilation + span, stride) for j in range(k)]

    if groups == 1:
        # cols: (n, lout, cin * k)
        cols = np.stack([xp[:, :, t] for t in taps], axis=-1).transpose(0, 2, 1, 3).reshape(n, lout, cin * k)
        w2 = weight.data.reshape(cout, cin * k)
        out = np.matmul(cols, w2.T).transpose(0, 2, 1)
    else:
        out = np.zeros((n, cout, lout), dtype=np.result_type(x.data, weight.data))
        for j, t in enumerate(taps):
            out += weight.data[None, :, 0, j, None] * xp[:, :, t]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = _contiguous(out)

    def bw(g):
        gx = gw = gb = None
        if groups == 1:
            gt = g.transpose(0, 2, 1)  # (n, lout, cout)
            if weight.requires_grad:
                gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
            if x.requires_grad:
                gcols = np.matmul(gt, w2).reshape(n, lout, cin, k)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for j, t in enumerate(taps):
                    gxp[:, :, t] += gcols[:, :, :, j].transpose(0, 2, 1)
                gx = gxp[:, :, padding:padding + length] if padding else gxp
        else:
            if weight.requires_grad:
                gw = np.stack([(g * xp[:, :, t]).sum(axis=(0, 2)) for t in taps], axis=-1)[:, None, :]
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for j, t in enumerate(taps):
                    gxp[:, :, t] += weight.data[None, :, 0, j, None] * g
                gx = gxp[:, :, padding:padding + length] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv1d")


def conv_transpose1d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution; ``weight`` has shape (in, out, kernel).

    Output length is ``(length - 1) * stride + kernel``.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("conv_transpose1d", f"expected 3-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, length = x.shape
    if weight.shape[0] != cin:
        raise ShapeError("conv_transpose1d", f"input has {cin} channels but weight expects {weight.shape[0]}")
    _, cout, k = weight.shape
    lout = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    w2 = weight.data.reshape(cin, cout * k)
    xt = x.data.transpose(0, 2, 1)  # (n, length, cin)
    y = np.matmul(xt, w2).reshape(n, length, cout, k)
    out = np.zeros((n, cout, lout), dtype=y.dtype)
    for j in range(k):
        out[:, :, j:j + span:stride] += y[:, :, :, j].transpose(0, 2, 1)

    def bw(g):
        gy = np.stack([g[:, :, j:j + span:stride] for j in range(k)], axis=-1)  # (n, cout, length, k)
        gy = gy.transpose(0, 2, 1, 3).reshape(n, length, cout * k)
        gx = np.matmul(gy, w2.T).transpose(0, 2, 1) if x.requires_grad else None
        gw = np.tensordot(xt, gy, axes=([0, 1], [0, 1])).reshape(weight.shape) if weight.requires_grad else None
        return gx, gw

    return _result(out, (x, weight), bw, "conv_transpose1d")


def lstm(x: Tensor, h0: Tensor, c0: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """Single-layer LSTM over ``x`` of shape (batch, time, input).

    Gate order is (input, forget, cell, output). Returns a tensor of shape
    (batch, time, 2 * hidden) holding ``[h_t, c_t]`` for every step, so the
    hidden sequence and the final cell state are both reachable by slicing.
    """
    n, steps, _ = x.shape
    hidden = h0.shape[-1]
    if w_ih.shape[0] != 4 * hidden or w_hh.shape != (4 * hidden, hidden):
        raise ShapeError("lstm", f"weights {w_ih.shape}, {w_hh.shape} do not match hidden size {hidden}")
    xw = np.matmul(x.data, w_ih.data.T) + bias.data  # (n, steps, 4h)
    dtype = xw.dtype
    hs = np.zeros((n, steps + 1, hidden), dtype=dtype)
    cs = np.zeros((n, steps + 1, hidden), dtype=dtype)
    gates = np.zeros((n, steps, 4 * hidden), dtype=dtype)
    tanh_c = np.zeros((n, steps, hidden), dtype=dtype)
    hs[:, 0], cs[:, 0] = h0.data, c0.data
    for t in range(steps):
        z = xw[:, t] + hs[:, t] @ w_hh.data.T
        i = 0.5 * (1.0 + np.tanh(0.5 * z[:, :hidden]))
        f = 0.5 * (1.0 + np.tanh(0.5 * z[:, hidden:2 * hidden]))
        gg = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * hidden:]))
        gates[:, t] = np.concatenate([i, f, gg, o], axis=-1)
        cs[:, t + 1] = f * cs[:, t] + i * gg
        tanh_c[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tanh_c[:, t]
    out = np.concatenate([hs[:, 1:], cs[:, 1:]], axis=-1)

    def bw(g):
        gh_seq, gc_seq = g[..., :hidden], g[..., hidden:]
        dz = np.zeros_like(gates)
        dh_next = np.zeros((n, hidden), dtype=dtype)
        dc_next = np.zeros((n, hidden), dtype=dtype)
        whh = w_hh.data
        for t in range(steps - 1, -1, -1):
            i, f = gates[:, t, :hidden], gates[:, t, hidden:2 * hidden]
            gg, o = gates[:, t, 2 * hidden:3 * hidden], gates[:, t, 3 * hidden:]
            dh = gh_seq[:, t] + dh_next
            tc = tanh_c[:, t]
            dc = gc_seq[:, t] + dc_next + dh * o * (1.0 - tc * tc)
            dz[:, t, :hidden] = dc * gg * i * (1.0 - i)
            dz[:, t, hidden:2 * hidden] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, t, 2 * hidden:3 * hidden] = dc * i * (1.0 - gg * gg)
            dz[:, t, 3 * hidden:] = dh * tc * o * (1.0 - o)
            dh_next = dz[:, t] @ whh
            dc_next = dc * f
        gx = np.matmul(dz, w_ih.data) if x.requires_grad else None
        gwih = np.tensordot(dz, x.data, axes=([0, 1], [0, 1])) if w_ih.requires_grad else None
        gwhh = np.tensordot(dz, hs[:, :-1], axes=([0, 1], [0, 1])) if w_hh.requires_grad else None
        gb = dz.sum(axis=(0, 1)) if bias.requires_grad else None
        return gx, dh_next, dc_next, gwih, gwhh, gb

    return _result(out, (x, h0, c0, w_ih, w_hh, bias), bw, "lstm")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(root: Tensor, retain_tape: bool = False) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) to every reachable tensor that requires grad.

    Leaf gradients are accumulated into ``.grad`` and also returned as a map
    keyed by tensor. The tape is cleared afterwards unless ``retain_tape``.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = get_tape()
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: dict[int, Tensor] = {id(root): root}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                holders[key] = parent
    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = holders[key]
        if t._backward is not None and t is not root:
            continue
        g = np.array(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    if not retain_tape:
        tape.clear()
    return result


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction.

    Parameters whose gradient is ``None`` are left untouched, including
    their moment estimates. A step containing a non-finite gradient is
    skipped entirely and counted in :attr:`skipped_steps`.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.param_steps = [0] * len(self.params)
        self.step_count = 0
        self.skipped_steps = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> bool:
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        for p, g in zip(self.params, grads):
            if g is not None and g.shape != p.shape:
                raise ShapeError("adam", f"gradient shape {g.shape} does not match parameter {p.shape}")
        if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
            self.skipped_steps += 1
            return False
        self.step_count += 1
        b1, b2 = self.betas
        for idx, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.param_steps[idx] += 1
            t = self.param_steps[idx]
            m, v = self.m[idx], self.v[idx]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        return True

    def state_dict(self) -> dict:
        return {"lr": self.lr, "step_count": self.step_count, "skipped_steps": self.skipped_steps}


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for p in params]))) if params else 0.0
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total
