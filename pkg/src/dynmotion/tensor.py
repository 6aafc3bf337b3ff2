"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Graph`.
``backward`` walks that tape in exact reverse insertion order, so the
recording order doubles as the topological order.

Conventions:
  * no implicit broadcasting; a python scalar is the only thing that mixes
    with a tensor of a different shape
  * convolutions are cross-correlations (kernels are never flipped)
  * non-finite values raise :class:`NonFiniteError` as soon as they appear
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Node:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager to make it the active tape for the current
    thread. Outside any ``with Graph():`` block ops go to a per-thread
    default graph, which must be cleared by hand.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, *exc):
        _state().stack.pop()
        return False


class _State(threading.local):
    def __init__(self):
        self.stack = [Graph()]
        self.recording = True


_local = _State()


def _state() -> _State:
    return _local


def current_graph() -> Graph:
    return _state().stack[-1]


def default_graph() -> Graph:
    return _state().stack[0]


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    st = _state()
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(TRAIN_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self._graph = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def record(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of an op and put it on the active tape.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    _check_finite(out, name)
    result = Tensor(out)
    st = _state()
    if st.recording and any(t.requires_grad for t in inputs):
        graph = st.stack[-1]
        result.requires_grad = True
        result._node = Node(name, tuple(inputs), result, backward)
        result._graph = graph
        graph.record(result._node)
    return result


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("add", a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("sub", a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def negate(a: Tensor) -> Tensor:
    return record("negate", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return record("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "negate":
        return negate(a)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if b is None:
        raise ValueError(f"{kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (g.transpose(inv),))


def mean(a: Tensor, axis=None) -> Tensor:
    """Mean over ``axis`` (int, tuple, or None for all)."""
    out = a.data.mean(axis=axis)
    axes = tuple(range(a.data.ndim)) if axis is None else np.atleast_1d(axis)
    axes = tuple(int(x) % a.data.ndim for x in axes)
    count = math.prod(a.shape[i] for i in axes)
    shape = a.shape

    def backward(g):
        g = np.expand_dims(np.asarray(g), axes)
        return (np.broadcast_to(g / a.data.dtype.type(count), shape).copy(),)

    return record("mean", np.asarray(out, dtype=a.dtype), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.full(shape, g, dtype=a.dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """a[start:stop] along the first axis."""
    if not 0 <= start <= stop <= a.shape[0]:
        raise ValueError(f"rows [{start}:{stop}] out of range for leading size {a.shape[0]}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record("rows", a.data[start:stop].copy(), (a,), backward)


def shift_scale(x: Tensor, shift, scale) -> Tensor:
    """(x - shift) * scale with constant per-column ``shift`` and ``scale``."""
    shift = np.asarray(shift, dtype=x.dtype)
    scale = np.asarray(scale, dtype=x.dtype)
    if shift.shape != x.shape[-1:] or scale.shape != x.shape[-1:]:
        raise ValueError(f"shift/scale must have shape {x.shape[-1:]}")
    return record("shift_scale", (x.data - shift) * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the bias added to every row.

    x is [n] or [m×n], w is [n×k], b is [k].
    """
    if w.data.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def backward(g):
        if xd.ndim == 1:
            return g @ wd.T, np.outer(xd, g), g
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return record("linear", out, (x, w, b), backward)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    nd = logits.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"softmax axis {axis} invalid for shape {logits.shape}")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (logits,), backward)


def standardize(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) along ``axis`` (no learned affine)."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"standardize axis {axis} invalid for shape {x.shape}")
    xc = x.data - x.data.mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + x.data.dtype.type(eps))
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return record("standardize", y, (x,), backward)


# ---------------------------------------------------------------- padding helpers

def pad_replicate(x: np.ndarray, pads: Sequence[tuple[int, int]]) -> np.ndarray:
    return np.pad(x, pads, mode="edge") if any(p for pp in pads for p in pp) else x


def unpad_replicate(g: np.ndarray, pads: Sequence[tuple[int, int]]) -> np.ndarray:
    """Adjoint of :func:`pad_replicate`: fold padded borders back onto edges."""
    for axis, (lo, hi) in enumerate(pads):
        if not lo and not hi:
            continue
        n = g.shape[axis] - lo - hi
        core = np.take(g, np.arange(lo, lo + n), axis=axis)
        if lo:
            edge = [slice(None)] * g.ndim
            edge[axis] = slice(0, 1)
            core[tuple(edge)] += np.take(g, np.arange(lo), axis=axis).sum(axis=axis, keepdims=True)
        if hi:
            edge = [slice(None)] * g.ndim
            edge[axis] = slice(n - 1, n)
            core[tuple(edge)] += np.take(g, np.arange(lo + n, lo + n + hi), axis=axis).sum(
                axis=axis, keepdims=True)
        g = core
    return g


# ---------------------------------------------------------------- convolution

def conv3d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           spatial_stride: int = 1, padding: str = "same-replicate") -> Tensor:
    """3-D cross-correlation of a C×T×H×W volume with C'×C×kt×kh×kw kernels.

    The temporal stride is always 1. ``same-replicate`` clamps to the edge
    and keeps T; spatial extents become ceil(H / stride).
    """
    if x.data.ndim != 4 or kernels.data.ndim != 5:
        raise ValueError(f"conv3d expects C×T×H×W input and 5-D kernels, got {x.shape}, {kernels.shape}")
    C, T, H, W = x.shape
    Co, Ci, kt, kh, kw = kernels.shape
    if Ci != C:
        raise ValueError(f"conv3d: kernel expects {Ci} input channels, input has {C}")
    st = int(spatial_stride)
    if st < 1:
        raise ValueError("spatial_stride must be >= 1")
    if padding == "same-replicate":
        if not (kt % 2 and kh % 2 and kw % 2):
            raise ValueError(f"same-replicate padding needs odd kernel extents, got {kernels.shape[2:]}")
        pads = ((0, 0), (kt // 2, kt // 2), (kh // 2, kh // 2), (kw // 2, kw // 2))
    elif padding == "valid":
        pads = ((0, 0),) * 4
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = pad_replicate(x.data, pads)
    if kt > xp.shape[1] or kh > xp.shape[2] or kw > xp.shape[3]:
        raise ValueError(f"conv3d: kernel {kernels.shape[2:]} larger than padded input {xp.shape[1:]}")

    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))[:, :, ::st, ::st]
    To, Ho, Wo = win.shape[1:4]
    # im2col: rows are (c, a, b, d) taps, columns are output positions
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(C * kt * kh * kw, -1)
    kmat = kernels.data.reshape(Co, -1)
    out = (kmat @ cols).reshape(Co, To, Ho, Wo)
    if bias is not None:
        if bias.shape != (Co,):
            raise ValueError(f"conv3d: bias shape {bias.shape}, expected ({Co},)")
        out += bias.data[:, None, None, None]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        g2 = g.reshape(Co, -1)
        gk = (g2 @ cols.T).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(C, kt, kh, kw, To, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gxp[:, a:a + To, b:b + st * (Ho - 1) + 1:st, c:c + st * (Wo - 1) + 1:st] += gcols[:, a, b, c]
            gx = unpad_replicate(gxp, pads)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2, 3))

    return record("conv3d", out, inputs, backward)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Leaf gradients accumulate across calls; use ``zero_grad`` to reset.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    nodes = loss._graph.nodes
    try:
        stop = next(i for i in range(len(nodes) - 1, -1, -1) if nodes[i] is loss._node)
    except StopIteration:
        raise ValueError("loss is not recorded on its graph (was it cleared?)") from None
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes[:stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.dtype)
            if ig.shape != inp.shape:
                ig = ig.reshape(inp.shape)
            if inp.is_leaf:
                _accumulate(inp, ig)
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    _check_finite(g, "gradient")
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Relative error between backprop and central differences.

    ``f`` maps a float64 tensor to a scalar tensor. ``coords`` restricts the
    comparison to a subset of flat indices (all by default). The result is
    max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|): every coordinate is
    judged against the scale of the whole gradient, so entries that are
    tiny only by cancellation do not turn round-off into large errors.
    A gradient that is identically zero on both sides gives 0.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=CHECK_DTYPE)
    _check_finite(base, "grad_check point")
    x = Tensor(base.copy(), requires_grad=True)
    with Graph():
        y = f(x)
        backward(y)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = old - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differencing")
            numeric[j] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)[idx]
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - numeric).max() / scale)
