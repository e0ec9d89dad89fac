"""Reverse-mode automatic differentiation over dense float32 arrays.

Every operation builds its output eagerly and, when any input requires a
gradient, records a closure computing the vector-Jacobian product.  The graph
is rebuilt on every forward pass (define-by-run); :func:`backward` walks it in
reverse topological order.

Reductions (``sum``/``mean``) accumulate in float64 before casting back.
"""

from __future__ import annotations

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

F32 = np.float32

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, node_id: int):
        super().__init__(f"op '{op}' (node {node_id}) produced non-finite values")
        self.op = op
        self.node_id = node_id


def _dt():
    return getattr(_state, "dtype", F32)


@contextmanager
def precision(dtype):
    """Run the engine at another float precision (float64 for reference oracles)."""
    prev = _dt()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "parents", "vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_dt())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, id={self.node_id}{tag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_dt())
    out.node_id = next(_ids)
    out.op = op
    out.name = None
    if not np.isfinite(out.data).all():
        raise NonFiniteError(op, out.node_id)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p == 2:
        return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return _emit("pow", ad ** p, (a,), lambda g: (p * g * ad ** (p - 1),))


def square(a) -> Tensor:
    return power(a, 2)


# ---------------------------------------------------------------------------
# elementwise unary


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, _dt()(0))
    return _emit("relu", out, (a,), lambda g: (g * (out > 0),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    em1 = np.expm1(np.minimum(x, 0))
    out = np.where(pos, x, alpha * em1)
    return _emit("elu", out, (a,), lambda g: (g * np.where(pos, _dt()(1), alpha * (em1 + 1)),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(_dt())
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(_dt()(0), x)
    sig = np.exp(x - out)
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _emit("log", out, (a,), lambda g: (g / x,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(_dt())

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    n = math.prod(shape[ax] for ax in axes) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over empty axes of shape {shape}")
    out = (np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims) / n).astype(_dt())

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / _dt()(n), shape),)

    return _emit("mean", out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return _emit("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None))) or p is Ellipsis for p in parts)

    def vjp(g):
        full = np.zeros(shape, dtype=_dt())
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", a.data[idx], (a,), vjp)


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather along axis 0 (rows may repeat)."""
    a = as_tensor(a)
    rows = np.asarray(rows)
    n = a.shape[0]
    flat_tail = int(np.prod(a.shape[1:], dtype=np.int64))

    def vjp(g):
        g2 = g.reshape(len(rows), flat_tail)
        full = np.zeros((n, flat_tail), dtype=np.float64)
        for j in range(flat_tail):
            full[:, j] = np.bincount(rows, weights=g2[:, j], minlength=n)
        return (full.astype(_dt()).reshape(a.shape),)

    return _emit("take_rows", a.data[rows], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * nd
        outs = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def concat_channels(tensors: Sequence) -> Tensor:
    """Concatenate NCHW maps along C."""
    return concat(tensors, axis=1)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# linear algebra / convolution


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 2 and g.ndim == 2:
            gb = ad.T @ g
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), vjp)


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))


def _corr(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, x (N,C,H,W), w (O,C,kh,kw) -> (N,O,Ho,Wo)."""
    o, c, kh, kw = w.shape
    if kh == 1 and kw == 1:
        return np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    win = _windows(x, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, b=None, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) over NCHW input."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
    _, _, kh, kw = w.shape
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs odd kernels, got {w.shape}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    out = _corr(xp, w.data)
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    wd = w.data
    H, W = xd.shape[2], xd.shape[3]

    def vjp(g):
        if kh == 1 and kw == 1:
            gw = np.einsum("nohw,nchw->oc", g, xp, optimize=True)[:, :, None, None]
        else:
            gw = np.tensordot(g, _windows(xp, kh, kw), axes=([0, 2, 3], [0, 2, 3]))
        wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1))) if (kh > 1 or kw > 1) else g
        gxp = _corr(gpad, wf)
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gw.astype(_dt())]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _emit("conv2d", out, parents, vjp)


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims of {x.shape} must be even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=_dt())
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _emit("maxpool2", out, (x,), vjp)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of NCHW maps."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample2", out, (x,), vjp)


def grid_sample(img, xs: np.ndarray, ys: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Bilinear gather from per-batch images at fixed pixel-index coordinates.

    img (N, C, H, W); xs, ys, valid (N, Hq, Wq).  Samples with ``valid`` false
    (or any tap outside the image) produce zeros.  Gradients flow to ``img``
    only.
    """
    img = as_tensor(img)
    n, c, h, w = img.shape
    if xs.shape != ys.shape or xs.shape[0] != n:
        raise ShapeError(f"grid_sample: image {img.shape} vs coords {xs.shape}/{ys.shape}")
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0).astype(_dt())
    fy = (ys - y0).astype(_dt())
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 <= w - 1) & (y0 <= h - 1)
    if valid is not None:
        ok &= valid
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1 = np.clip(x1, 0, w - 1)
    y1 = np.clip(y1, 0, h - 1)
    okf = ok.astype(_dt())
    taps = [
        (y0c, x0c, (1 - fx) * (1 - fy) * okf),
        (y0c, x1, fx * (1 - fy) * okf),
        (y1, x0c, (1 - fx) * fy * okf),
        (y1, x1, fx * fy * okf),
    ]
    bidx = np.arange(n).reshape(n, *([1] * (xs.ndim - 1)))
    flat = [((bidx * h + yy) * w + xx).reshape(-1) for yy, xx, _ in taps]
    src = img.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    out = np.zeros((xs.size, c), dtype=_dt())
    for fi, (_, _, wt) in zip(flat, taps):
        out += src[fi] * wt.reshape(-1, 1)
    out = out.reshape(*xs.shape, c)
    out = np.moveaxis(out, -1, 1)

    def vjp(g):
        gq = np.moveaxis(g, 1, -1).reshape(-1, c)
        acc = np.zeros((n * h * w, c), dtype=np.float64)
        for fi, (_, _, wt) in zip(flat, taps):
            wv = wt.reshape(-1)
            for ch in range(c):
                acc[:, ch] += np.bincount(fi, weights=gq[:, ch] * wv, minlength=n * h * w)
        return (acc.astype(_dt()).reshape(n, h, w, c).transpose(0, 3, 1, 2),)

    return _emit("grid_sample", out, (img,), vjp)


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Topologically ordered op records reachable from a root tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.vjp is None and t.requires_grad]


class GradMap(dict):
    """node-id -> gradient array; unreachable tensors read as zeros."""

    def of(self, t: Tensor) -> np.ndarray:
        g = self.get(t.node_id)
        return np.zeros(t.shape, dtype=t.data.dtype) if g is None else g


def backward(loss: Tensor, graph: Graph | None = None) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to every requires-grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    graph = graph or Graph.from_root(loss)
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=_dt())}
    for node in reversed(graph.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.vjp is None:
            grads[node.node_id] = np.asarray(g, dtype=_dt()).reshape(node.shape)
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
    return grads


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    gm = backward(loss)
    return [gm.of(p) for p in params]


def reachable_leaves(loss: Tensor) -> set[int]:
    return {t.node_id for t in Graph.from_root(loss).leaves()}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamMoments:
    """Bias-corrected Adam; replaces each parameter's data array."""
    moments.t += 1
    t = moments.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad {g.shape} does not match param '{name}' {p.shape}")
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=p.data.dtype)
            v = np.zeros(p.shape, dtype=p.data.dtype)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: moment {m.shape} does not match param '{name}' {p.shape}")
        m = (beta1 * m + (1 - beta1) * g).astype(p.data.dtype)
        v = (beta2 * v + (1 - beta2) * g * g).astype(p.data.dtype)
        moments.m[name] = m
        moments.v[name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype)
    return moments


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step > total_steps:
        logger.warning("cosine_lr: step %d past total %d, clamping to 0", step, total_steps)
        return 0.0
    if step < 0:
        raise ValueError("step must be non-negative")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
