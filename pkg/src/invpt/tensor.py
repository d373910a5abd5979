"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op accepts an optional leading batch axis; the spatial ops (conv2d,
pooling, resize) operate on the trailing ``(C, H, W)`` / ``(H, W)`` axes.
Backward rules are hand-written per op and checked against
:func:`finite_diff_grad` in the test suite.
"""
from __future__ import annotations

import contextlib
import functools
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested op."""


class ConfigError(ValueError):
    """An op or layer was configured with unsupported parameters."""


class DataError(ValueError):
    """Label or input values fall outside the documented domain."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# -- branch recording -------------------------------------------------------

@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the discrete decisions (ReLU sign patterns, top-k picks) made
    by ops inside the block, in execution order."""
    prev = getattr(_state, "branches", None)
    log: list = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def _note_branch(decision: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(decision.copy())


def same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# -- FLOP instrumentation ---------------------------------------------------

def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
        _state.scope = []
    return _state.counters


@contextlib.contextmanager
def count_flops() -> Iterator[Counter]:
    """Tally conventional FLOPs of every op executed inside the block.

    Keys are ``(scope, category)`` where scope is the ``/``-joined stack of
    :func:`flop_scope` labels active when the op ran.
    """
    counter: Counter = Counter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    _counters()
    _state.scope.append(name)
    try:
        yield
    finally:
        _state.scope.pop()


def record_flops(category: str, flops: int) -> None:
    """Add ``flops`` under ``category`` to every active counter."""
    counters = _counters()
    if not counters:
        return
    key = ("/".join(_state.scope), category)
    for c in counters:
        c[key] += int(flops)


# -- core types --------------------------------------------------------------

@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A float64 array plus an optional record of how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

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
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _fail_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, bw) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), bw)
    return out


class Graph:
    """Nodes reachable from a root, ordered so inputs precede consumers."""

    def __init__(self, order: list[Tensor]):
        self.order = order

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.order if t._node is not None]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
            if t._node is not None:
                for inp in reversed(t._node.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = graph or Graph.trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t._node.inputs, t._node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_branch(mask)
    return _result(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose",
                   lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, "concat", lambda g: np.split(g, bounds, axis=axis))


def split(a: Tensor, sections: int | Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split into equal ``sections`` or at the given section sizes."""
    n = a.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise DimensionError(f"cannot split extent {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise DimensionError(f"section sizes {sizes} do not sum to {n}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        outs.append(_result(a.data[sl], (a,), "split", bw))
        start += size
    return outs


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    record_flops("matmul", 2 * m * k * n * (out.size // (m * n)))

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), "matmul", bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; w is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear expects last axis {w.shape[0]}, got {x.shape}")
    rows = x.size // x.shape[-1]
    x2 = x.data.reshape(rows, -1)
    out = (x2 @ w.data).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        out = out + b.data
    record_flops("linear", 2 * rows * w.shape[0] * w.shape[1])
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(rows, -1)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, inputs, "linear", bw)


# -- convolution and resampling ----------------------------------------------

def _batched(x: Tensor, op: str) -> bool:
    if x.ndim == 3:
        return False
    if x.ndim == 4:
        return True
    raise DimensionError(f"{op} expects (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of (N,)C_in,H,W input with (C_out,C_in,kh,kw) weights."""
    batched = _batched(x, "conv2d")
    xd = x.data if batched else x.data[None]
    n, cin, h, wd = xd.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d weight expects {wcin} input channels, got {cin}")
    if not ((kh % 2 == 1 and kw % 2 == 1) or (kh == kw == 1)):
        raise ConfigError(f"conv2d kernel must be odd, got {kh}x{kw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output extent non-positive ({ho}x{wo})")
    # columns are ordered (kh, kw, C_in) so the channel axis stays innermost
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    xh = xd.transpose(0, 2, 3, 1)
    if kh == kw == 1 and stride == 1 and pad == 0:
        cols = xh.reshape(-1, cin)
    else:
        xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xh
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    record_flops("conv", 2 * n * cout * ho * wo * cin * kh * kw)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gd = g if batched else g[None]
        g2 = gd.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            gw = np.ascontiguousarray(gw)
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if kh == kw == 1 and stride == 1 and pad == 0:
                gx = gcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
                gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i: i + stride * ho: stride, j: j + stride * wo: stride] += gcols[:, :, :, i, j]
                gx = gxp[:, pad: pad + h, pad: pad + wd].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx if batched else gx[0])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, inputs, "conv2d", bw)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                      stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride; w is (C_in,C_out,k,k)."""
    batched = _batched(x, "transposed_conv2d")
    xd = x.data if batched else x.data[None]
    n, cin, h, wd = xd.shape
    wcin, cout, kh, kw = w.shape
    if kh != stride or kw != stride:
        raise ConfigError(f"transposed_conv2d needs kernel == stride, got {kh}x{kw} / {stride}")
    if wcin != cin:
        raise DimensionError(f"transposed_conv2d weight expects {wcin} channels, got {cin}")
    k = stride
    x2 = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = w.data.reshape(cin, -1)
    out = (x2 @ wmat).reshape(n, h, wd, cout, k, k)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, h * k, wd * k)
    if b is not None:
        out = out + b.data[:, None, None]
    record_flops("tconv", 2 * n * cin * h * wd * cout * k * k)
    if not batched:
        out = out[0]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gd = g if batched else g[None]
        g2 = gd.reshape(n, cout, h, k, wd, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * wd, -1)
        gx = None
        if x.requires_grad:
            gx = (g2 @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx if batched else gx[0])
        gw = (x2.T @ g2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gd.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), inputs, "transposed_conv2d", bw)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Mean over non-overlapping k x k cells of the last two axes."""
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {k} does not divide {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // k, k, w // k, k)).mean(axis=(-3, -1))
    record_flops("pool", x.size)

    def bw(g):
        g = np.broadcast_to(g[..., :, None, :, None] / (k * k),
                            lead + (h // k, k, w // k, k))
        return (g.reshape(x.shape),)

    return _result(out, (x,), "avg_pool2d", bw)


@functools.lru_cache(maxsize=None)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the half-pixel bilinear weights of output sample i."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of the last two axes, half-pixel centers, edge clamp."""
    if height < 1 or width < 1:
        raise DimensionError(f"resize target must be positive, got {height}x{width}")
    h, w = x.shape[-2:]
    rh = interp_matrix(h, height)
    rw = interp_matrix(w, width)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    record_flops("resize", 8 * out.size)

    def bw(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _result(out, (x,), "bilinear_resize", bw)


# -- normalisation and softmax -----------------------------------------------

NORM_EPS = 1e-5


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    record_flops("softmax", 5 * y.size)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", bw)


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def _norm_backward(g, xhat, inv_std, axes, gamma_b):
    gxhat = g * gamma_b if gamma_b is not None else g
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (gxhat - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = NORM_EPS) -> Tensor:
    """Normalise each token over its last (channel) axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    record_flops("norm", 5 * x.size)
    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    red = tuple(range(x.ndim - 1))

    def bw(g):
        grads = [_norm_backward(g, xhat, inv_std, -1,
                                gamma.data if gamma is not None else None)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return grads

    return _result(out, inputs, "layer_norm", bw)


def batch_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1,
               eps: float = NORM_EPS) -> Tensor:
    """Per-channel normalisation; channel axis is 1, all other axes reduce.

    In training mode the running statistics are updated in place.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm expects (N,C,...) input, got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        cnt = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (cnt / max(cnt - 1, 1))
    else:
        xc = x.data - running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    std = np.sqrt(var + eps)
    inv_std = 1.0 / std
    xhat = xc / std
    g_b = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat if g_b is None else xhat * g_b
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    record_flops("norm", 5 * x.size)
    inputs = [x] + [t for t in (gamma, beta) if t is not None]

    def bw(g):
        if training:
            gx = _norm_backward(g, xhat, inv_std, axes, g_b)
        else:
            gx = g * (inv_std if g_b is None else inv_std * g_b)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes))
        if beta is not None:
            grads.append(g.sum(axis=axes))
        return grads

    return _result(out, inputs, "batch_norm", bw)


@dataclass
class BatchStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> "BatchStats":
        return cls(np.zeros(channels), np.ones(channels))


def normalize(x: Tensor, mode: str, gamma: Tensor | None = None,
              beta: Tensor | None = None, stats: BatchStats | None = None,
              training: bool = True) -> Tensor:
    """Layer or batch normalisation behind one entry point."""
    if mode == "layer":
        return layer_norm(x, gamma, beta)
    if mode == "batch":
        if stats is None:
            stats = BatchStats.fresh(x.shape[1])
        return batch_norm(x, gamma, beta, stats.running_mean, stats.running_var,
                          training, stats.momentum)
    raise ConfigError(f"unknown normalisation mode {mode!r}")


# -- selection ----------------------------------------------------------------

def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis.

    Ties go to the lower index; the result is sorted ascending.
    """
    v = np.asarray(v.data if isinstance(v, Tensor) else v)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.sort(np.argsort(-v, axis=-1, kind="stable")[..., :k], axis=-1)
    _note_branch(order)
    return order


def _full_index(idx: np.ndarray, axis: int, shape: tuple) -> tuple:
    grids = list(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij", sparse=True))
    grids[axis] = idx
    return tuple(grids)


def gather(x: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis`` with a scatter-add backward."""
    axis = axis % x.ndim
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather index out of range for extent {n}")
    shape = list(x.shape)
    shape[axis] = idx.shape[axis]
    idx = np.broadcast_to(idx, shape)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, _full_index(idx, axis, g.shape), g)
        return (full,)

    return _result(out, (x,), "gather", bw)


def gather_columns(a: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    return gather(a, np.broadcast_to(idx, a.shape[:-1] + idx.shape[-1:]), axis=-1)


def scatter(x: Tensor, idx: np.ndarray, size: int, axis: int = -1) -> Tensor:
    """Place ``x`` at positions ``idx`` of a zero tensor with extent ``size``."""
    axis = axis % x.ndim
    idx = np.broadcast_to(np.asarray(idx, dtype=np.intp), x.shape)
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape)
    np.add.at(out, _full_index(idx, axis, x.shape), x.data)
    return _result(out, (x,), "scatter",
                   lambda g: (np.take_along_axis(g, idx, axis=axis),))


# -- losses -------------------------------------------------------------------

IGNORE_INDEX = 255


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean softmax cross-entropy over non-ignored positions; class axis 1."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise DataError(f"label id {int(labels[bad][0])} outside [0, {k})")
    n_valid = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = (np.log(s[:, 0]) - picked) * valid
    loss = nll.sum() / n_valid if n_valid else 0.0

    def bw(g):
        if not n_valid:
            return (np.zeros_like(logits.data),)
        p = e / s
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * valid[:, None] * (float(g) / n_valid),)

    return _result(np.asarray(loss), (logits,), "cross_entropy", bw)


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise DimensionError(f"target {target.shape} does not match prediction {pred.shape}")
    return mean(tabs(pred - Tensor(target)))


# -- finite differences ----------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    return finite_diff_inplace(lambda: f(Tensor(base)), base, h)


def finite_diff_inplace(f: Callable[[], Tensor | float], arr: np.ndarray,
                        h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``arr``, perturbed in place.

    ``arr`` is restored exactly after every coordinate.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("finite_diff_inplace needs a contiguous array")
    gflat = grad.reshape(-1)

    def ev():
        out = f()
        return float(out.item() if isinstance(out, Tensor) else out)

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = ev()
            flat[i] = orig - h
            fm = ev()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def finite_diff_smooth(f: Callable[[], Tensor | float], arr: np.ndarray,
                       h: float = 3e-5) -> tuple[np.ndarray, np.ndarray]:
    """Five-point central differences of ``f()`` w.r.t. ``arr``, perturbed in
    place, with kink detection.

    Returns ``(grad, smooth)``. ``smooth`` is False for coordinates whose
    stencil changes a ReLU sign pattern or a top-k pick; their difference
    quotient does not estimate a derivative.
    """
    grad = np.zeros_like(arr)
    smooth = np.ones(arr.shape, dtype=bool)
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("finite_diff_smooth needs a contiguous array")
    gflat, sflat = grad.reshape(-1), smooth.reshape(-1)

    def ev():
        with record_branches() as log:
            out = f()
        return float(out.item() if isinstance(out, Tensor) else out), log

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            vals, logs = [], []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                v, b = ev()
                vals.append(v)
                logs.append(b)
            flat[i] = orig
            gflat[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            sflat[i] = all(same_branches(logs[0], b) for b in logs[1:])
    return grad, smooth


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference, 0 when both are zero."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
